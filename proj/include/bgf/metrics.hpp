#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgf/box.hpp"

namespace bgf {

// One image, one class. Detections are visited by descending score (ties by
// input order); each takes the best-IoU unmatched ground truth (ties by lower
// index) and is a true positive iff that IoU >= iou_thresh.
std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                   double iou_thresh);

// 101-point interpolated AP over detections ranked by descending score (ties by
// input order). nullopt when there is nothing to score (no ground truth and no
// detections); 0 when there are detections but no ground truth.
std::optional<double> average_precision(const std::vector<bool>& tp, const std::vector<double>& scores,
                                        std::size_t num_gt);

struct PrPoint {
  double confidence = 0;
  double precision = 0;
  double recall = 0;
};

struct ClassMetrics {
  int class_id = 0;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  double precision = 0;  // at the shared best-F1 confidence
  double recall = 0;
  std::optional<double> ap50;
  std::optional<double> ap50_95;
  std::vector<PrPoint> pr_curve;  // IoU 0.50, one point per distinct confidence
};

struct MetricsReport {
  double precision = 0;
  double recall = 0;
  double map50 = 0;
  double map50_95 = 0;
  double best_f1_confidence = 0;
  std::vector<ClassMetrics> classes;
  std::vector<double> map_per_threshold;  // IoU 0.50, 0.55, ..., 0.95
};

std::vector<double> coco_iou_thresholds();

MetricsReport map_summary(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts);

nlohmann::json metrics_to_json(const MetricsReport& r);
std::string metrics_table(const MetricsReport& r);

}  // namespace bgf
