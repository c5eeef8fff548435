#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "bgf/blocks.hpp"
#include "bgf/box.hpp"

namespace bgf {

// Cell centers (pixels) of every scale, concatenated scale by scale, each grid
// row-major.
struct AnchorPoints {
  std::int64_t input_size = 0;
  std::vector<std::int64_t> strides;
  std::vector<std::int64_t> grids;  // cells per side, per scale
  std::vector<double> cx, cy, stride;

  std::size_t size() const { return cx.size(); }
};

AnchorPoints make_anchor_points(std::int64_t input_size, const std::vector<std::int64_t>& strides);

struct HeadConfig {
  std::vector<std::int64_t> strides{4, 8, 16, 32};
  std::int64_t num_classes = 1;
  std::int64_t reg_max = 16;    // bins 0..reg_max
  std::int64_t cls_width = 0;   // 0 -> max(c_in of the finest scale, min(classes, 100))
  std::int64_t reg_width = 0;   // 0 -> max(16, c_in / 4, 4 * reg_max)

  std::int64_t bins() const { return reg_max + 1; }
};

template <typename T>
struct HeadOutput {
  Var<T> cls;  // [N, A, classes] logits
  Var<T> reg;  // [N, A, 4 * bins] logits, side-major (l, t, r, b)
};

// Decoupled anchor-free head: per scale a classification branch and a
// regression branch, each two 3x3 CBS followed by a 1x1 conv.
template <typename T>
class DetectHead {
 public:
  DetectHead(const std::string& name, const std::vector<std::int64_t>& in_channels, const HeadConfig& cfg,
             std::int64_t input_size, std::mt19937_64& rng);

  HeadOutput<T> forward(const std::vector<Var<T>>& features);
  void visit(const TensorVisitor<T>& v);
  const HeadConfig& config() const { return cfg_; }

 private:
  struct Branch {
    std::unique_ptr<ConvBlock<T>> a, b;
    Parameter<T> w, bias;
  };
  Var<T> run(Branch& br, Var<T> x);

  HeadConfig cfg_;
  std::vector<Branch> cls_, reg_;
};

// Softmax expectation per side. logits: [A, 4 * bins] (or [A, 4, bins]);
// returns [A, 4] distances in stride units.
template <typename T>
NdTensor<T> dfl_decode(const NdTensor<T>& logits, std::int64_t reg_max);

// Per-anchor boxes in pixels from decoded distances [A, 4].
std::vector<Box> distances_to_boxes(const NdTensor<double>& dist, const AnchorPoints& anchors);

// cls: [A, classes] logits, reg: [A, 4 * bins] logits for one image. Keeps
// anchors whose best class score (sigmoid) >= conf, clips to the image and drops
// boxes that become empty. Sorted by score, descending.
std::vector<Detection> decode_boxes(const NdTensor<double>& cls, const NdTensor<double>& reg,
                                    const AnchorPoints& anchors, std::int64_t reg_max, double conf,
                                    int image_id = 0);

// Class-wise greedy suppression. Order: score descending, ties by input index.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

struct TalConfig {
  std::int64_t topk = 10;
  double alpha = 0.5;   // score exponent
  double beta = 6.0;    // IoU exponent
};

struct Assignment {
  std::vector<int> gt;          // per anchor: gt index or -1
  std::vector<double> score;    // normalized alignment target, 0 for background
  std::vector<double> iou;      // IoU of the prediction with its gt
  std::int64_t num_pos = 0;
};

// Task-aligned assignment for one image. scores: [A * classes] probabilities,
// pred: one box per anchor (pixels).
Assignment assign_targets(const AnchorPoints& anchors, const std::vector<GroundTruth>& gts,
                          std::span<const double> scores, std::int64_t num_classes, const std::vector<Box>& pred,
                          const TalConfig& cfg = {});

}  // namespace bgf
