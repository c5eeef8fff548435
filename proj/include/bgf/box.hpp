#pragma once

#include <array>
#include <string>

#include "bgf/tensor.hpp"

namespace bgf {

// Axis-aligned box in pixels.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  // Throws ShapeError unless x2 > x1 and y2 > y1 (and all finite).
  static Box checked(double x1, double y1, double x2, double y2);

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const;
};

struct Detection {
  Box box;
  double score = 0;
  int class_id = 0;
  int image_id = 0;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
  int image_id = 0;
};

// Plain intersection over union; 0 when the union is empty.
double box_iou(const Box& a, const Box& b);

enum class IouVariant { IoU, GIoU, DIoU, CIoU, EIoU, SIoU, WIoU };

const char* iou_variant_name(IouVariant v);
IouVariant parse_iou_variant(const std::string& s);

struct IouMetrics {
  double iou = 0, giou = 0, diou = 0, ciou = 0, eiou = 0, siou = 0;
};

inline constexpr double kIouEps = 1e-7;

// All six overlap metrics. Both boxes must be valid.
IouMetrics iou_metrics(const Box& a, const Box& b);

// Dynamic focusing state for WIoU v3.
struct WiouState {
  double mean = 1.0;  // EMA of the IoU loss
  double momentum = 0.01;
  double alpha = 1.9;
  double delta = 3.0;

  void update(double liou) { mean = (1.0 - momentum) * mean + momentum * liou; }
};

// Quantities that receive no gradient: CIoU's alpha and WIoU's enclosing
// normalizer and focusing coefficient.
struct DetachedTerms {
  double ciou_alpha = 0;
  double wiou_c2 = 0;
  double wiou_r = 0;
};

// Value and gradient with respect to the first box (x1, y1, x2, y2).
struct BoxLossResult {
  double loss = 0;
  std::array<double, 4> grad{};
  double liou = 0;  // 1 - iou, for WIoU state updates
  DetachedTerms detached;
};

// Pure evaluation; the first box may be degenerate (a predicted box). The
// WIoU focusing coefficient uses wiou.mean. Passing `frozen` replaces the
// detached terms with fixed values, which makes the returned gradient exact
// for finite-difference checks.
BoxLossResult box_loss(const Box& pred, const Box& target, IouVariant variant, const WiouState& wiou = {},
                       const DetachedTerms* frozen = nullptr);

// 1 - metric, or the WIoU v3 loss. WIoU requires a state, which is updated
// with this evaluation afterwards.
BoxLossResult iou_loss(const Box& pred, const Box& target, IouVariant variant, WiouState* state = nullptr);

}  // namespace bgf
