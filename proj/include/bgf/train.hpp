#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgf/checkpoint.hpp"
#include "bgf/io.hpp"
#include "bgf/metrics.hpp"
#include "bgf/model.hpp"

namespace bgf {

enum class Precision { F32, F64 };
const char* precision_name(Precision p);
Precision parse_precision(const std::string& s);

struct TrainConfig {
  double lr0 = 0.01;
  double lr_final = 0.01;     // linear from lr0; constant when equal
  double momentum = 0.937;
  double weight_decay = 5e-4;  // conv and linear weights only
  std::int64_t warmup_steps = 0;  // linear ramp from 0 to the scheduled lr
  std::int64_t batch = 5;
  std::int64_t epochs = 120;
  std::int64_t steps = 0;     // 0 -> epochs * ceil(train / batch)
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;

  void validate() const;
  std::int64_t total_steps(std::int64_t train_images) const;
  double lr_at(std::int64_t step, std::int64_t total) const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepLog {
  std::int64_t step = 0;
  double lr = 0;
  LossBreakdown loss;
};

std::string loss_log_header();
std::string loss_log_row(const StepLog& s);

struct TrainOptions {
  std::optional<std::filesystem::path> log_csv;
  std::optional<std::filesystem::path> checkpoint_out;
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::vector<StepLog> log;
  Checkpoint checkpoint;
  double seconds = 0;
};

// SGD with momentum over the train split; batches follow a per-epoch
// shuffle keyed by the seed. A non-finite loss aborts with the component named.
TrainResult train_toy(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const DatasetDescriptor& ds,
                      const TrainOptions& opt = {});

struct PredictOptions {
  double conf = 0.001;
  double nms_iou = 0.7;
  std::int64_t max_det = 300;
  std::int64_t batch = 8;
};

// [C, H, W] model input for an image (bilinear resize to input_size).
template <typename T>
NdTensor<T> prepare_image(const Image& img, std::int64_t channels, std::int64_t input_size);

// Detections in original image pixels, image ids = split index.
std::vector<std::vector<Detection>> predict_split(const Checkpoint& ckpt, const std::vector<LabeledImage>& images,
                                                  const PredictOptions& opt = {});

struct EvalResult {
  MetricsReport report;
  std::vector<std::vector<Detection>> detections;
};

EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const DatasetDescriptor& ds, const std::string& split,
                               const PredictOptions& opt = {});

// Scores a directory of precomputed detection files (one <stem>.txt per image).
MetricsReport evaluate_detection_dir(const std::filesystem::path& dir, const DatasetDescriptor& ds,
                                     const std::string& split);

}  // namespace bgf
