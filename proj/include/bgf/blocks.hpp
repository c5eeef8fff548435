#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bgf/layer.hpp"
#include "bgf/ops.hpp"

namespace bgf {

enum class BlockKind { CBS, C2f, CSP, SPPF };

struct BlockSpec {
  BlockKind kind = BlockKind::CBS;
  std::int64_t channels_in = 0;
  std::int64_t channels_out = 0;
  std::int64_t repeats = 1;
  bool shortcut = false;
  std::int64_t kernel = 1;  // CBS only
  std::int64_t stride = 1;  // CBS only
};

// Conv (no bias) -> BatchNorm -> SiLU. Padding is kernel/2.
template <typename T>
class ConvBlock final : public Layer<T> {
 public:
  ConvBlock(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::int64_t kernel, std::int64_t stride,
            std::mt19937_64& rng, ops::BatchNormOptions bn = {});

  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;

  static std::int64_t count(std::int64_t c_in, std::int64_t c_out, std::int64_t kernel) {
    return c_out * c_in * kernel * kernel + 2 * c_out;
  }

  std::int64_t in_channels() const { return c_in_; }
  std::int64_t out_channels() const { return c_out_; }

  Parameter<T> weight;
  Parameter<T> bn_gamma;
  Parameter<T> bn_beta;
  ops::BatchNormBuffers<T> bn_stats;
  std::string name;

 private:
  std::int64_t c_in_, c_out_, kernel_, stride_;
  ops::BatchNormOptions bn_opt_;
};

// Two 3x3 CBS units with an optional residual add.
template <typename T>
class Bottleneck final : public Layer<T> {
 public:
  Bottleneck(const std::string& name, std::int64_t channels, bool shortcut, std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;
  static std::int64_t count(std::int64_t c) { return 2 * ConvBlock<T>::count(c, c, 3); }

  ConvBlock<T> cv1;
  ConvBlock<T> cv2;
  bool shortcut;
};

// Entry 1x1 CBS to 2h channels, split into halves, n bottlenecks each fed by the
// previous output and appended to the concat list, exit 1x1 CBS. h = c_out/2.
template <typename T>
class C2f final : public Layer<T> {
 public:
  C2f(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::int64_t n, bool shortcut,
      std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;
  static std::int64_t count(std::int64_t c_in, std::int64_t c_out, std::int64_t n);

  std::int64_t hidden;
  ConvBlock<T> cv1;
  std::vector<std::unique_ptr<Bottleneck<T>>> blocks;
  ConvBlock<T> cv2;
};

// Two parallel 1x1 CBS branches; the second runs through n residual
// bottlenecks; concat; exit 1x1 CBS. h = c_out/2.
template <typename T>
class CspBlock final : public Layer<T> {
 public:
  CspBlock(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::int64_t n, std::mt19937_64& rng);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;
  static std::int64_t count(std::int64_t c_in, std::int64_t c_out, std::int64_t n);

  std::int64_t hidden;
  ConvBlock<T> cv1;
  ConvBlock<T> cv2;
  std::vector<std::unique_ptr<Bottleneck<T>>> blocks;
  ConvBlock<T> cv3;
};

// 1x1 CBS to c_in/2, three chained max pools (k=5, s=1, p=2), concat of the four
// stages, 1x1 CBS to c_out.
template <typename T>
class Sppf final : public Layer<T> {
 public:
  Sppf(const std::string& name, std::int64_t c_in, std::int64_t c_out, std::mt19937_64& rng, std::int64_t pool = 5);
  Var<T> forward(Var<T> x) override;
  void visit(const TensorVisitor<T>& v) override;
  static std::int64_t count(std::int64_t c_in, std::int64_t c_out);

  std::int64_t hidden;
  std::int64_t pool;
  ConvBlock<T> cv1;
  ConvBlock<T> cv2;
};

template <typename T>
std::unique_ptr<Layer<T>> make_block(const std::string& name, const BlockSpec& spec, std::mt19937_64& rng);
std::int64_t block_parameter_count(const BlockSpec& spec);

}  // namespace bgf
