#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "bgf/train.hpp"

namespace bgf {

enum class AblationAxis { Attention, Neck, Loss };
const char* ablation_axis_name(AblationAxis a);
AblationAxis parse_ablation_axis(const std::string& s);

struct AblationVariant {
  std::string model;    // e.g. CGF-YOLO, BBF-YOLO, BGF-E-YOLO
  std::string variant;  // e.g. cbam, bifpn, eiou
  ModelConfig config;
};

// The sweep for an axis, in table order, derived from `base`.
std::vector<AblationVariant> ablation_variants(AblationAxis axis, const ModelConfig& base);

struct AblationOptions {
  AblationAxis axis = AblationAxis::Loss;
  ModelConfig base = toy_model_config();
  TrainConfig train;
  PredictOptions predict;
  std::string split = "val";
};

struct AblationRow {
  std::string model;
  std::string variant;
  std::int64_t parameters = 0;
  double initial_loss = 0;
  double final_loss = 0;
  bool finite = true;
  MetricsReport metrics;
  double seconds = 0;
};

struct AblationResult {
  AblationAxis axis = AblationAxis::Loss;
  std::vector<AblationRow> rows;
};

AblationResult run_ablation(const AblationOptions& opt, const DatasetDescriptor& ds);

// Model | P | R | mAP50 | mAP50:95 plus the toy-run loss columns.
std::string ablation_table(const AblationResult& r);
nlohmann::json ablation_to_json(const AblationResult& r);

}  // namespace bgf
