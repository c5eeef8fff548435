#include "bgf/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "bgf/synthetic.hpp"

namespace bgf {

namespace fs = std::filesystem;

const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& s) {
  if (s == "f32" || s == "float32" || s == "float") return Precision::F32;
  if (s == "f64" || s == "float64" || s == "double") return Precision::F64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

void TrainConfig::validate() const {
  if (lr0 < 0 || lr_final < 0) throw ConfigError("learning rates must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (epochs < 1 && steps < 1) throw ConfigError("need epochs >= 1 or steps >= 1");
  if (steps < 0 || warmup_steps < 0) throw ConfigError("steps must be >= 0");
}

std::int64_t TrainConfig::total_steps(std::int64_t train_images) const {
  if (steps > 0) return steps;
  return epochs * ((train_images + batch - 1) / batch);
}

double TrainConfig::lr_at(std::int64_t step, std::int64_t total) const {
  const double t = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
  double lr = lr0 + (lr_final - lr0) * t;
  if (warmup_steps > 0 && step < warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  return lr;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"lr_final", c.lr_final},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"steps", c.steps},
          {"seed", c.seed},
          {"precision", precision_name(c.precision)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig c;
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_final = j.value("lr_final", c.lr_final);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.batch = j.value("batch", c.batch);
    c.epochs = j.value("epochs", c.epochs);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

std::string loss_log_header() { return "step,lr,box,cls,dfl,total\n"; }

std::string loss_log_row(const StepLog& s) {
  char line[256];
  std::snprintf(line, sizeof line, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(s.step), s.lr,
                s.loss.box, s.loss.cls, s.loss.dfl, s.loss.total);
  return line;
}

template <typename T>
NdTensor<T> prepare_image(const Image& img, std::int64_t channels, std::int64_t input_size) {
  if (img.width == input_size && img.height == input_size) return image_to_tensor<T>(img, channels);
  const NdTensor<T> src = image_to_tensor<T>(img, channels);
  NdTensor<T> out({channels, input_size, input_size});
  const double sx = static_cast<double>(img.width) / static_cast<double>(input_size);
  const double sy = static_cast<double>(img.height) / static_cast<double>(input_size);
  for (std::int64_t y = 0; y < input_size; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < input_size; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < channels; ++c) {
        auto at = [&](std::int64_t yy, std::int64_t xx) {
          return static_cast<double>(src[(c * img.height + yy) * img.width + xx]);
        };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                         wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out[(c * input_size + y) * input_size + x] = static_cast<T>(v);
      }
    }
  }
  return out;
}

template NdTensor<float> prepare_image(const Image&, std::int64_t, std::int64_t);
template NdTensor<double> prepare_image(const Image&, std::int64_t, std::int64_t);

namespace {

std::vector<GroundTruth> scale_gts(const std::vector<GroundTruth>& gts, double sx, double sy) {
  std::vector<GroundTruth> out = gts;
  for (auto& g : out) g.box = {g.box.x1 * sx, g.box.y1 * sy, g.box.x2 * sx, g.box.y2 * sy};
  return out;
}

// Top-level keys whose values differ.
std::string diff_keys(const nlohmann::json& a, const nlohmann::json& b) {
  std::string out;
  for (const auto& [k, v] : a.items()) {
    if (!b.contains(k) || b.at(k) != v) out += (out.empty() ? "" : ", ") + k;
  }
  for (const auto& [k, v] : b.items()) {
    if (!a.contains(k)) out += (out.empty() ? "" : ", ") + k;
  }
  return out;
}

nlohmann::json resume_key(const TrainConfig& c) {
  nlohmann::json j = train_config_to_json(c);
  j.erase("steps");
  j.erase("epochs");
  return j;
}

template <typename T>
TrainResult train_impl(const ModelConfig& model_cfg, const TrainConfig& tc, const DatasetDescriptor& ds,
                       const TrainOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  tc.validate();
  const ModelConfig cfg = model_cfg.resolved();
  Model<T> model(cfg, tc.seed);
  std::vector<Parameter<T>*> params;
  model.visit({[&params](Parameter<T>& p) { params.push_back(&p); }, nullptr});
  std::vector<NdTensor<T>> velocity;
  for (auto* p : params) velocity.emplace_back(p->value.shape());

  const auto train = load_split(ds, "train");
  if (train.empty()) throw ConfigError(ds.root.string() + ": train split is empty");
  const std::int64_t n = static_cast<std::int64_t>(train.size());
  const std::int64_t in = cfg.input_size, ch = cfg.backbone.in_channels;
  std::vector<NdTensor<T>> inputs;
  std::vector<std::vector<GroundTruth>> targets;
  for (const auto& li : train) {
    inputs.push_back(prepare_image<T>(li.image, ch, in));
    targets.push_back(scale_gts(li.gts, static_cast<double>(in) / static_cast<double>(li.image.width),
                                static_cast<double>(in) / static_cast<double>(li.image.height)));
  }

  const std::int64_t total = tc.total_steps(n);
  std::int64_t start = 0;
  WiouState wiou;
  if (opt.resume_from) {
    const Checkpoint ck = load_checkpoint(*opt.resume_from);
    const nlohmann::json want = model_config_to_json(cfg);
    if (ck.model != want) {
      throw ConfigError("config mismatch with checkpoint " + opt.resume_from->string() + ": model fields differ (" +
                        diff_keys(ck.model, want) + ")");
    }
    if (!ck.train.contains("config") || ck.train.at("config") != resume_key(tc)) {
      const nlohmann::json have = ck.train.value("config", nlohmann::json::object());
      throw ConfigError("config mismatch with checkpoint " + opt.resume_from->string() + ": train fields differ (" +
                        diff_keys(have, resume_key(tc)) + ")");
    }
    restore_model(model, ck);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const CheckpointTensor* t = ck.find(params[i]->name, "momentum");
      if (!t || t->shape != velocity[i].shape()) {
        throw CheckpointError("checkpoint lacks momentum for " + params[i]->name);
      }
      for (std::size_t k = 0; k < t->data.size(); ++k) velocity[i][static_cast<std::int64_t>(k)] = static_cast<T>(t->data[k]);
    }
    start = ck.train.value("step", std::int64_t{0});
    wiou.mean = ck.train.value("wiou_mean", wiou.mean);
  }

  std::ofstream log_file;
  if (opt.log_csv) {
    if (opt.log_csv->has_parent_path()) fs::create_directories(opt.log_csv->parent_path());
    log_file.open(*opt.log_csv, start > 0 ? std::ios::app : std::ios::trunc);
    if (!log_file) throw Error(opt.log_csv->string() + ": cannot open for writing");
    if (start == 0) log_file << loss_log_header();
  }

  // Sample k of the stream is perm(epoch)[k mod n], perm keyed by (seed, epoch).
  std::int64_t perm_epoch = -1;
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  auto sample = [&](std::int64_t k) {
    const std::int64_t e = k / n;
    if (e != perm_epoch) {
      std::iota(perm.begin(), perm.end(), std::int64_t{0});
      Rng rng(mix_seed(tc.seed, 0x5eed0000ULL + static_cast<std::uint64_t>(e)));
      for (std::int64_t i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(rng.integer(0, i))]);
      perm_epoch = e;
    }
    return perm[static_cast<std::size_t>(k % n)];
  };

  TrainResult res;
  const std::int64_t b = tc.batch;
  const std::int64_t img_numel = ch * in * in;
  for (std::int64_t step = start; step < total; ++step) {
    NdTensor<T> x({b, ch, in, in});
    std::vector<std::vector<GroundTruth>> gts;
    for (std::int64_t j = 0; j < b; ++j) {
      const std::int64_t idx = sample(step * b + j);
      std::copy(inputs[static_cast<std::size_t>(idx)].data().begin(), inputs[static_cast<std::size_t>(idx)].data().end(),
                x.ptr() + j * img_numel);
      gts.push_back(targets[static_cast<std::size_t>(idx)]);
      for (auto& g : gts.back()) g.image_id = static_cast<int>(j);
    }
    Graph<T> g(true);
    const HeadOutput<T> out = model.forward(g, x);
    const auto assignments = assign_batch(out.cls.value().template cast<double>(),
                                          out.reg.value().template cast<double>(), model.anchors(), gts, cfg.loss);
    StepLog sl;
    sl.step = step;
    sl.lr = tc.lr_at(step, total);
    Var<T> loss;
    try {
      loss = detection_loss_node(out.cls, out.reg, model.anchors(), gts, assignments, cfg.loss, &wiou, &sl.loss);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("step " + std::to_string(step) + ": " + e.what());
    }
    g.backward(loss);
    // The loss is a per-positive mean over the batch; scaling by the batch
    // size gives per-image gradient magnitudes.
    const T gscale = static_cast<T>(b);
    const T lr = static_cast<T>(sl.lr), mom = static_cast<T>(tc.momentum), wd = static_cast<T>(tc.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<T>& p = *params[i];
      if (!p.grad.all_finite()) {
        throw NonFiniteError("step " + std::to_string(step) + ": non-finite gradient for " + p.name);
      }
      const bool decay = p.value.rank() >= 2;
      T* w = p.value.ptr();
      T* v = velocity[i].ptr();
      const T* gr = p.grad.ptr();
      for (std::int64_t k = 0; k < p.value.numel(); ++k) {
        const T d = gscale * gr[k] + (decay ? wd * w[k] : T(0));
        v[k] = mom * v[k] + d;
        w[k] -= lr * v[k];
      }
      p.zero_grad();
    }
    if (log_file) log_file << loss_log_row(sl) << std::flush;
    if (opt.on_step) opt.on_step(sl);
    res.log.push_back(sl);
  }

  res.checkpoint = capture_model(model);
  for (std::size_t i = 0; i < params.size(); ++i) {
    CheckpointTensor t;
    t.name = params[i]->name;
    t.kind = "momentum";
    t.shape = velocity[i].shape();
    t.data.assign(velocity[i].data().begin(), velocity[i].data().end());
    res.checkpoint.tensors.push_back(std::move(t));
  }
  res.checkpoint.train = {{"config", resume_key(tc)}, {"step", total}, {"wiou_mean", wiou.mean}};
  if (opt.checkpoint_out) save_checkpoint(*opt.checkpoint_out, res.checkpoint);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

template <typename T>
std::vector<std::vector<Detection>> predict_impl(const Checkpoint& ckpt, const std::vector<LabeledImage>& images,
                                                 const PredictOptions& opt) {
  Model<T> model(model_config_from_json(ckpt.model), 0);
  restore_model(model, ckpt);
  const ModelConfig& cfg = model.config();
  const std::int64_t in = cfg.input_size, ch = cfg.backbone.in_channels;
  const std::int64_t bs = std::max<std::int64_t>(1, opt.batch);
  const std::int64_t a = static_cast<std::int64_t>(model.anchors().size());
  const std::int64_t nc = cfg.head.num_classes, nr = 4 * cfg.head.bins();
  std::vector<std::vector<Detection>> out(images.size());
  for (std::size_t s = 0; s < images.size(); s += static_cast<std::size_t>(bs)) {
    const std::size_t e = std::min(images.size(), s + static_cast<std::size_t>(bs));
    NdTensor<T> x({static_cast<std::int64_t>(e - s), ch, in, in});
    for (std::size_t i = s; i < e; ++i) {
      const NdTensor<T> t = prepare_image<T>(images[i].image, ch, in);
      std::copy(t.data().begin(), t.data().end(), x.ptr() + static_cast<std::int64_t>(i - s) * ch * in * in);
    }
    Graph<T> g(false);
    const HeadOutput<T> h = model.forward(g, x);
    const NdTensor<T>& cls = h.cls.value();
    const NdTensor<T>& reg = h.reg.value();
    for (std::size_t i = s; i < e; ++i) {
      const auto k = static_cast<std::int64_t>(i - s);
      NdTensor<double> c({a, nc}), r({a, nr});
      for (std::int64_t q = 0; q < a * nc; ++q) c[q] = static_cast<double>(cls[k * a * nc + q]);
      for (std::int64_t q = 0; q < a * nr; ++q) r[q] = static_cast<double>(reg[k * a * nr + q]);
      auto dets = nms(decode_boxes(c, r, model.anchors(), cfg.head.reg_max, opt.conf, static_cast<int>(i)), opt.nms_iou);
      if (static_cast<std::int64_t>(dets.size()) > opt.max_det) dets.resize(static_cast<std::size_t>(opt.max_det));
      const double sx = static_cast<double>(images[i].image.width) / static_cast<double>(in);
      const double sy = static_cast<double>(images[i].image.height) / static_cast<double>(in);
      for (auto& d : dets) d.box = {d.box.x1 * sx, d.box.y1 * sy, d.box.x2 * sx, d.box.y2 * sy};
      out[i] = std::move(dets);
    }
  }
  return out;
}

}  // namespace

TrainResult train_toy(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const DatasetDescriptor& ds,
                      const TrainOptions& opt) {
  if (train_cfg.precision == Precision::F32) return train_impl<float>(model_cfg, train_cfg, ds, opt);
  return train_impl<double>(model_cfg, train_cfg, ds, opt);
}

std::vector<std::vector<Detection>> predict_split(const Checkpoint& ckpt, const std::vector<LabeledImage>& images,
                                                  const PredictOptions& opt) {
  Precision p = Precision::F64;
  if (ckpt.train.contains("config")) p = train_config_from_json(ckpt.train.at("config")).precision;
  if (p == Precision::F32) return predict_impl<float>(ckpt, images, opt);
  return predict_impl<double>(ckpt, images, opt);
}

EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const DatasetDescriptor& ds, const std::string& split,
                               const PredictOptions& opt) {
  const auto images = load_split(ds, split);
  EvalResult r;
  r.detections = predict_split(ckpt, images, opt);
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  for (std::size_t i = 0; i < images.size(); ++i) {
    dets.insert(dets.end(), r.detections[i].begin(), r.detections[i].end());
    gts.insert(gts.end(), images[i].gts.begin(), images[i].gts.end());
  }
  r.report = map_summary(dets, gts);
  return r;
}

MetricsReport evaluate_detection_dir(const fs::path& dir, const DatasetDescriptor& ds, const std::string& split) {
  if (!fs::is_directory(dir)) throw FormatError(dir.string() + ": not a directory of detection files");
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  int id = 0;
  for (const auto& rel : ds.split(split)) {
    const fs::path f = dir / (fs::path(rel).stem().string() + ".txt");
    if (fs::exists(f)) {
      auto d = read_detections(f, id);
      dets.insert(dets.end(), d.begin(), d.end());
    }
    const Image img = read_pnm(ds.image_path(rel));
    auto g = load_yolo_labels(ds.label_path(rel), img.width, img.height, id);
    gts.insert(gts.end(), g.begin(), g.end());
    ++id;
  }
  return map_summary(dets, gts);
}

}  // namespace bgf
