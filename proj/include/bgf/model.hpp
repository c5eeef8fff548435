#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgf/blocks.hpp"
#include "bgf/head.hpp"
#include "bgf/losses.hpp"
#include "bgf/neck.hpp"

namespace bgf {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Stem CBS (stride 2), then per level P2..P5 a stride-2 CBS and a C2f with
// shortcuts; SPPF closes P5.
struct BackboneConfig {
  std::int64_t in_channels = 3;
  std::int64_t stem = 16;
  std::array<std::int64_t, 4> widths{32, 64, 128, 256};
  std::array<std::int64_t, 4> repeats{1, 2, 2, 1};
};

struct ModelConfig {
  std::string name = "BGF-YOLO";
  std::int64_t input_size = 640;
  BackboneConfig backbone;
  std::string neck_preset = "bgf";  // used when `neck` is empty
  std::optional<NeckGraph> neck;
  NeckWidths neck_widths{{32, 64, 128, 256}, 1};
  AttentionConfig attention;
  HeadConfig head;  // empty strides are derived from the neck outputs
  LossConfig loss;

  ModelConfig();
  // Neck graph with the attention variant and parameters applied.
  NeckGraph resolved_neck() const;
  // Config with head strides filled in. Throws ConfigError on any
  // inconsistency (strides, reg_max, widths, neck shapes).
  ModelConfig resolved() const;
  std::map<int, std::int64_t> tap_channels() const;
};

// Small widths for desk-scale runs at 128 px.
ModelConfig toy_model_config();

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json loss_config_to_json(const LossConfig& c);
LossConfig loss_config_from_json(const nlohmann::json& j);

template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, std::mt19937_64& rng);
  // "P2".."P5" feature maps.
  std::map<std::string, Var<T>> forward(Var<T> x);
  void visit(const TensorVisitor<T>& v);

 private:
  std::unique_ptr<ConvBlock<T>> stem_;
  std::vector<std::unique_ptr<ConvBlock<T>>> down_;
  std::vector<std::unique_ptr<C2f<T>>> stage_;
  std::unique_ptr<Sppf<T>> sppf_;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  // images: [N, C, H, W] at the configured input size.
  HeadOutput<T> forward(Graph<T>& g, const NdTensor<T>& images);
  void visit(const TensorVisitor<T>& v);
  std::int64_t parameter_count();

  const ModelConfig& config() const { return cfg_; }
  const AnchorPoints& anchors() const { return anchors_; }
  const Neck<T>& neck() const { return *neck_; }

 private:
  ModelConfig cfg_;
  std::mt19937_64 rng_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<Neck<T>> neck_;
  std::unique_ptr<DetectHead<T>> head_;
  AnchorPoints anchors_;
};

struct SummaryRow {
  std::string section;  // backbone / neck / head
  std::string name;
  std::string kind;
  FeatureShape shape;
  std::int64_t params = 0;
};

struct ModelSummary {
  std::string name;
  std::int64_t input_size = 0;
  std::vector<SummaryRow> rows;
  std::int64_t parameters = 0;
};

// Builds the model at cfg.input_size and lists per-node output shapes.
ModelSummary summarize(const ModelConfig& cfg);
std::string summary_table(const ModelSummary& s);
nlohmann::json summary_to_json(const ModelSummary& s);

}  // namespace bgf
