#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgf/attention.hpp"
#include "bgf/blocks.hpp"

namespace bgf {

enum class NeckOp { CBS, CSP, C2f, Upsample, Downsample, Concat, WeightedSum, BRA, SE, ECA, CBAM, CA, Identity };

const char* neck_op_name(NeckOp op);
NeckOp parse_neck_op(const std::string& s);
bool is_attention_op(NeckOp op);

// Backbone taps are addressed by the reserved ids "P2".."P5".
struct NeckNode {
  std::string id;
  NeckOp op = NeckOp::Identity;
  int level = 3;                // declared pyramid level; spatial = input / 2^level
  std::int64_t channels = 0;    // output width of CBS/CSP/C2f/Downsample
  std::int64_t repeats = 1;     // CSP/C2f
  std::int64_t kernel = 1;      // CBS
  bool shortcut = false;        // C2f
};

struct NeckEdge {
  std::string src;
  std::string dst;
};

// Edge order is the concat order at each destination.
struct NeckGraph {
  std::string name;
  std::vector<std::string> taps;
  std::vector<NeckNode> nodes;
  std::vector<NeckEdge> edges;
  std::vector<std::string> outputs;
  AttentionConfig attention;

  const NeckNode* find(const std::string& id) const;
  std::vector<std::string> inputs_of(const std::string& id) const;
};

bool is_tap_id(const std::string& id);
int tap_level(const std::string& id);

struct FeatureShape {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  bool operator==(const FeatureShape&) const = default;
};

struct NeckPlan {
  std::vector<std::string> order;              // topological, nodes only
  std::map<std::string, FeatureShape> shapes;  // taps and nodes
  std::vector<FeatureShape> output_shapes;
};

// Symbolic shape pass. tap_channels is indexed by level (entries for unused
// levels are ignored). Throws GraphError on cycles or dangling references and
// ShapeError on shape violations.
NeckPlan plan_neck(const NeckGraph& g, const std::map<int, std::int64_t>& tap_channels, std::int64_t input_size);

// Channel concat in the given order.
template <typename T>
Var<T> fuse_concat(const std::vector<Var<T>>& inputs);

// sum_i relu(w_i) / (sum_j relu(w_j) + eps) * x_i.
template <typename T>
Var<T> fuse_weighted(const std::vector<Var<T>>& inputs, Var<T> weights, T eps = T(1e-4));

template <typename T>
class Neck {
 public:
  Neck(NeckGraph graph, std::map<int, std::int64_t> tap_channels, std::int64_t input_size, std::mt19937_64& rng);

  // taps: "P2".."P5" -> feature map. Returns one map per output, in order.
  std::vector<Var<T>> forward(const std::map<std::string, Var<T>>& taps);
  void visit(const TensorVisitor<T>& v);
  std::int64_t parameter_count();

  const NeckGraph& graph() const { return graph_; }
  const NeckPlan& plan() const { return plan_; }
  std::vector<int> output_levels() const;
  // Attention layers keyed by node id (for inspection in tests).
  Layer<T>* layer(const std::string& id);

 private:
  NeckGraph graph_;
  NeckPlan plan_;
  std::map<std::string, std::unique_ptr<Layer<T>>> layers_;
  std::map<std::string, Parameter<T>> fusion_weights_;
};

// Output widths per level P2..P5 and block repeats for presets.
struct NeckWidths {
  std::array<std::int64_t, 4> level{32, 64, 96, 128};
  std::int64_t repeats = 1;
};

NeckGraph preset_fpn_panet(const NeckWidths& w = {});
NeckGraph preset_bifpn(const NeckWidths& w = {});
NeckGraph preset_bgf(const NeckWidths& w = {});
NeckGraph preset_by_name(const std::string& name, const NeckWidths& w = {});
// Swaps every attention node for the given variant.
NeckGraph with_attention(NeckGraph g, AttentionKind kind);

nlohmann::json neck_to_json(const NeckGraph& g);
NeckGraph neck_from_json(const nlohmann::json& j);
nlohmann::json attention_to_json(const AttentionConfig& a);
AttentionConfig attention_from_json(const nlohmann::json& j);

}  // namespace bgf
