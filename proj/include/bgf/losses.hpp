#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "bgf/autograd.hpp"
#include "bgf/box.hpp"
#include "bgf/head.hpp"

namespace bgf {

struct ScalarLoss {
  double loss = 0;
  std::vector<double> grad;
};

// logits: 4 * bins values, side-major. Mean over the four sides of the
// two-bin interpolated cross entropy.
ScalarLoss dfl_loss(std::span<const double> logits, const std::array<double, 4>& target, std::int64_t reg_max);

enum class ClsLossKind { BCE, Varifocal };
const char* cls_loss_name(ClsLossKind k);
ClsLossKind parse_cls_loss(const std::string& s);

struct VarifocalParams {
  double alpha = 0.75;
  double gamma = 2.0;
};

// Summed over all elements. Varifocal treats targets > 0 as positives
// weighted by the target, and negatives by alpha * p^gamma.
ScalarLoss cls_loss(std::span<const double> logits, std::span<const double> targets, ClsLossKind kind,
                    const VarifocalParams& vfl = {});

struct LossWeights {
  double box = 7.5;
  double cls = 0.5;
  double dfl = 1.5;
};

struct LossConfig {
  IouVariant reg = IouVariant::CIoU;
  ClsLossKind cls = ClsLossKind::BCE;
  LossWeights weights;
  VarifocalParams varifocal;
  TalConfig tal;
  std::int64_t reg_max = 16;
};

// Weighted components; total is their sum.
struct LossBreakdown {
  double box = 0;
  double cls = 0;
  double dfl = 0;
  double total = 0;
  std::int64_t num_pos = 0;
};

struct DetectionLossResult {
  LossBreakdown parts;
  NdTensor<double> grad_cls;              // like cls_logits
  NdTensor<double> grad_reg;              // like reg_logits
  std::vector<DetachedTerms> detached;    // one per positive, image-major, anchor order
  double mean_liou = 0;                   // over positives
};

// Assigns every image of the batch from the current predictions.
// cls_logits [N, A, classes], reg_logits [N, A, 4 * bins].
std::vector<Assignment> assign_batch(const NdTensor<double>& cls_logits, const NdTensor<double>& reg_logits,
                                     const AnchorPoints& anchors, const std::vector<std::vector<GroundTruth>>& gts,
                                     const LossConfig& cfg);

// box_w * sum_pos box_loss + cls_w * sum cls_loss + dfl_w * sum_pos dfl_loss,
// each divided by max(1, positives). Box geometry is evaluated in stride
// units. The WIoU state is read, not updated; `frozen` replays detached terms.
DetectionLossResult detection_loss(const NdTensor<double>& cls_logits, const NdTensor<double>& reg_logits,
                                   const AnchorPoints& anchors, const std::vector<std::vector<GroundTruth>>& gts,
                                   const std::vector<Assignment>& assignments, const LossConfig& cfg,
                                   const WiouState& wiou = {}, const std::vector<DetachedTerms>* frozen = nullptr);

// Graph node wrapping detection_loss. Writes the breakdown and, for WIoU,
// updates the state after evaluation.
template <typename T>
Var<T> detection_loss_node(Var<T> cls_logits, Var<T> reg_logits, const AnchorPoints& anchors,
                           const std::vector<std::vector<GroundTruth>>& gts, const std::vector<Assignment>& assignments,
                           const LossConfig& cfg, WiouState* wiou, LossBreakdown* parts);

}  // namespace bgf
