#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "bgf/layer.hpp"
#include "bgf/ops.hpp"

namespace bgf {

// Per sample and query region, the k routed region ids in descending
// affinity order (ties: lower id first). ids[(n * regions + r) * k + j].
struct RoutingIndex {
  std::int64_t batch = 0;
  std::int64_t regions = 0;
  std::int64_t k = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::int64_t n, std::int64_t r, std::int64_t j) const {
    return ids[static_cast<std::size_t>((n * regions + r) * k + j)];
  }
};

// [N,C,H,W] -> [N, S*S, (H/S)*(W/S), C]. Region id = row * S + col; tokens
// inside a region are row-major.
template <typename T>
Var<T> region_partition(Var<T> x, std::int64_t grid);
// Inverse of region_partition.
template <typename T>
Var<T> region_merge(Var<T> regions, std::int64_t grid, std::int64_t height, std::int64_t width);

// q_region, k_region: [N, R, C] region descriptors. Affinity = q_region * k_region^T.
template <typename T>
RoutingIndex topk_routing(const NdTensor<T>& q_region, const NdTensor<T>& k_region, std::int64_t k);

struct BraConfig {
  std::int64_t channels = 0;
  std::int64_t region_grid = 2;  // S
  std::int64_t topk = 0;         // 0 -> ceil(S*S/2)
  std::int64_t heads = 1;
  bool local_context = true;     // depthwise 3x3 on V

  std::int64_t resolved_topk() const { return topk > 0 ? topk : (region_grid * region_grid + 1) / 2; }
  void validate() const;
};

// Bi-level routing attention with residual: out = x + W_o(attn(x) + lce(V)).
template <typename T>
class BiLevelRoutingAttention final : public Layer<T> {
 public:
  BiLevelRoutingAttention(const std::string& name, const BraConfig& cfg, std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;

  const BraConfig& config() const { return cfg_; }
  // Routing computed by the most recent forward.
  const RoutingIndex& last_routing() const { return last_routing_; }

  Parameter<T> w_q, w_k, w_v, w_o;  // [C_out, C_in]
  Parameter<T> b_o;                 // [C]
  Parameter<T> lce_weight;          // [C, 1, 3, 3]
  Parameter<T> lce_bias;            // [C]

 private:
  BraConfig cfg_;
  RoutingIndex last_routing_;
};

// Squeeze-and-excitation: x * sigmoid(W2 relu(W1 gap(x))).
template <typename T>
class SqueezeExcitation final : public Layer<T> {
 public:
  SqueezeExcitation(const std::string& name, std::int64_t channels, std::int64_t reduction, std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;
  // Channel gate [N, C, 1, 1] for x.
  Var<T> gate(Var<T> x);

  Parameter<T> w1, b1, w2, b2;  // w1 [C, h], w2 [h, C]
};

// Efficient channel attention: 1-D conv over the pooled channel vector.
template <typename T>
class EfficientChannelAttention final : public Layer<T> {
 public:
  EfficientChannelAttention(const std::string& name, std::int64_t channels, std::int64_t kernel, std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;
  Var<T> gate(Var<T> x);

  static std::int64_t kernel_for_channels(std::int64_t channels);

  std::int64_t kernel;
  Parameter<T> weight;  // [1, 1, 1, k]
};

// Channel gate from a shared MLP on avg- and max-pooled features, then a
// spatial gate from a conv over channel-mean and channel-max maps.
template <typename T>
class Cbam final : public Layer<T> {
 public:
  Cbam(const std::string& name, std::int64_t channels, std::int64_t reduction, std::int64_t spatial_kernel,
       std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;

  std::int64_t spatial_kernel;
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> spatial_weight;  // [1, 2, k, k]
};

// Coordinate attention: direction-aware pooling along H and W, shared 1x1
// transform (conv, BN, hard-swish), separate sigmoid gates per direction.
template <typename T>
class CoordinateAttention final : public Layer<T> {
 public:
  CoordinateAttention(const std::string& name, std::int64_t channels, std::int64_t reduction, std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;

  std::int64_t mip;
  Parameter<T> conv1_w, conv1_b;  // [mip, C, 1, 1]
  Parameter<T> bn_gamma, bn_beta;
  ops::BatchNormBuffers<T> bn_stats;
  Parameter<T> conv_h_w, conv_h_b;  // [C, mip, 1, 1]
  Parameter<T> conv_w_w, conv_w_b;
  std::string name;
};

enum class AttentionKind { BRA, SE, ECA, CBAM, CA };

struct AttentionConfig {
  AttentionKind kind = AttentionKind::BRA;
  BraConfig bra;                    // channels filled per placement
  std::int64_t se_reduction = 16;
  std::int64_t eca_kernel = 0;      // 0 -> derived from channels
  std::int64_t cbam_reduction = 16;
  std::int64_t cbam_kernel = 7;
  std::int64_t ca_reduction = 32;
};

const char* attention_kind_name(AttentionKind k);
AttentionKind parse_attention_kind(const std::string& s);
// One-letter model-name prefix: S, E, C, A, B.
char attention_letter(AttentionKind k);

template <typename T>
std::unique_ptr<Layer<T>> make_attention(const std::string& name, AttentionKind kind, std::int64_t channels,
                                         const AttentionConfig& cfg, std::mt19937_64& rng);

}  // namespace bgf
