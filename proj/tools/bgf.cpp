// Command-line front end: summary, train, eval, ablate, gradcheck, gen-data.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "bgf/ablate.hpp"
#include "bgf/gradcheck_suite.hpp"
#include "bgf/io.hpp"
#include "bgf/model.hpp"
#include "bgf/synthetic.hpp"
#include "bgf/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void error_line(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"type", kind}, {"message", message}}}}.dump() << std::endl;
}

struct Configs {
  bgf::ModelConfig model;
  bgf::TrainConfig train;
};

// A config file is either a model config or {"model": {...}, "train": {...}}.
Configs load_configs(const std::string& path, const bgf::ModelConfig& fallback) {
  Configs c{fallback, {}};
  if (path.empty()) return c;
  json j;
  try {
    j = json::parse(bgf::read_text_file(path));
  } catch (const json::exception& e) {
    throw bgf::ConfigError(path + ": " + e.what());
  }
  if (j.contains("model") || j.contains("train")) {
    if (j.contains("model")) c.model = bgf::model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = bgf::train_config_from_json(j.at("train"));
  } else {
    c.model = bgf::model_config_from_json(j);
  }
  return c;
}

bgf::ModelConfig preset_config(const std::string& preset) {
  if (preset == "toy") return bgf::toy_model_config();
  bgf::ModelConfig c;
  if (preset == "bgf") return c;
  c.neck_preset = preset;
  c.name = preset == "bifpn" ? "BBF-YOLO" : "YOLOv8";
  return c;
}

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
  } else {
    bgf::write_text_file(out, text);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BGF-YOLO toolkit: model summary, toy training, evaluation, ablations, gradient checks"};
  app.require_subcommand(1);

  std::string config, dataset, out, preset = "bgf";
  std::uint64_t seed = 0;
  std::int64_t steps = 0, input_size = 0;
  bool as_json = false, table = false;

  auto* summary = app.add_subcommand("summary", "Layer table, per-node shapes and parameter count");
  summary->add_option("--config", config, "Model config JSON");
  summary->add_option("--preset", preset, "bgf, bifpn, fpn-panet or toy (without --config)")
      ->check(CLI::IsMember({"bgf", "bifpn", "fpn-panet", "toy"}));
  summary->add_option("--input-size", input_size, "Input resolution");
  summary->add_flag("--json", as_json, "Emit JSON");
  summary->add_option("--out", out, "Write to file instead of stdout");

  bgf::SyntheticSpec spec;
  bgf::SplitCounts counts;
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic blob dataset");
  gen->add_option("--out", out, "Dataset root")->required();
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--input-size,--image-size", spec.image_size, "Image side in pixels");
  gen->add_option("--train", counts.train, "Train images");
  gen->add_option("--val", counts.val, "Validation images");
  gen->add_option("--test", counts.test, "Test images");
  gen->add_option("--min-objects", spec.min_objects);
  gen->add_option("--max-objects", spec.max_objects);
  gen->add_option("--min-radius", spec.min_radius);
  gen->add_option("--max-radius", spec.max_radius);
  gen->add_option("--noise", spec.noise, "Gaussian noise stddev in [0, 1] units");

  std::string resume, log_csv, precision;
  std::int64_t batch = 0;
  std::optional<double> lr, lr_final;
  auto* train = app.add_subcommand("train", "Train on a dataset's train split");
  train->add_option("--config", config, "Model config or {model, train} JSON (default: toy config)");
  train->add_option("--dataset", dataset, "Dataset root")->required();
  train->add_option("--seed", seed, "Initialization and shuffling seed");
  train->add_option("--steps", steps, "SGD steps (default: epochs x batches)");
  train->add_option("--input-size", input_size, "Input resolution");
  train->add_option("--batch", batch, "Batch size");
  train->add_option("--lr", lr, "Initial learning rate");
  train->add_option("--lr-final", lr_final, "Final learning rate");
  train->add_option("--precision", precision, "f32 or f64");
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--log", log_csv, "Loss log CSV (default: <out>.csv)");
  train->add_option("--resume", resume, "Resume from checkpoint");

  std::string checkpoint, detections, split = "val", save_dets;
  bgf::PredictOptions popt;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint or a detection directory on a split");
  eval->add_option("--dataset", dataset, "Dataset root")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to run");
  eval->add_option("--detections", detections, "Directory of precomputed <stem>.txt detection files");
  eval->add_option("--split", split, "Split name");
  eval->add_option("--conf", popt.conf, "Confidence threshold");
  eval->add_option("--nms-iou", popt.nms_iou, "NMS IoU threshold");
  eval->add_option("--out", out, "Report JSON path");
  eval->add_option("--save-detections", save_dets, "Write per-image detection files here");
  eval->add_flag("--table", table, "Print a metrics table instead of JSON");

  std::string axis = "loss";
  auto* ablate = app.add_subcommand("ablate", "Run an ablation sweep and print a comparison table");
  ablate->add_option("--axis", axis, "attention, neck or loss")->check(CLI::IsMember({"attention", "neck", "loss"}));
  ablate->add_option("--config", config, "Base config JSON (default: toy config)");
  ablate->add_option("--dataset", dataset, "Dataset root")->required();
  ablate->add_option("--seed", seed);
  ablate->add_option("--steps", steps, "SGD steps per variant (default 20)");
  ablate->add_option("--input-size", input_size);
  ablate->add_option("--conf", popt.conf);
  ablate->add_option("--nms-iou", popt.nms_iou);
  ablate->add_option("--out", out, "Result JSON path");

  std::size_t seeds = 20;
  std::vector<std::string> suites;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  grad->add_option("--seeds", seeds, "Seeds per case");
  grad->add_option("--suite", suites, "ops, blocks, attention, losses (repeatable)");
  grad->add_option("--seed", seed, "Unused; accepted for symmetry");
  grad->add_option("--out", out, "Result JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line("usage", e.what());
    return 2;
  }

  try {
    if (*summary) {
      bgf::ModelConfig mc = load_configs(config, preset_config(preset)).model;
      if (input_size > 0) mc.input_size = input_size;
      const bgf::ModelSummary s = bgf::summarize(mc);
      write_or_print(out, as_json ? bgf::summary_to_json(s).dump(2) + "\n" : bgf::summary_table(s));
    } else if (*gen) {
      spec.seed = seed;
      const auto ds = bgf::gen_synthetic(spec, counts, out);
      std::cout << json{{"dataset", out},
                        {"train", ds.splits.at("train").size()},
                        {"val", ds.splits.at("val").size()},
                        {"test", ds.splits.at("test").size()}}
                       .dump()
                << "\n";
    } else if (*train) {
      Configs c = load_configs(config, bgf::toy_model_config());
      if (input_size > 0) c.model.input_size = input_size;
      if (steps > 0) c.train.steps = steps;
      if (batch > 0) c.train.batch = batch;
      if (lr) c.train.lr0 = *lr;
      if (lr_final) c.train.lr_final = *lr_final;
      else if (lr) c.train.lr_final = *lr;
      if (!precision.empty()) c.train.precision = bgf::parse_precision(precision);
      if (train->count("--seed")) c.train.seed = seed;
      bgf::TrainOptions opt;
      opt.checkpoint_out = fs::path(out);
      opt.log_csv = fs::path(log_csv.empty() ? out + ".csv" : log_csv);
      if (!resume.empty()) opt.resume_from = fs::path(resume);
      const auto ds = bgf::load_dataset(dataset);
      const bgf::TrainResult r = bgf::train_toy(c.model, c.train, ds, opt);
      json j = {{"checkpoint", out}, {"log", opt.log_csv->string()}, {"steps", r.log.size()}, {"seconds", r.seconds}};
      if (!r.log.empty()) {
        j["initial_loss"] = r.log.front().loss.total;
        j["final_loss"] = r.log.back().loss.total;
      }
      std::cout << j.dump() << "\n";
    } else if (*eval) {
      if (checkpoint.empty() == detections.empty()) {
        throw bgf::ConfigError("eval needs exactly one of --checkpoint or --detections");
      }
      const auto ds = bgf::load_dataset(dataset);
      bgf::MetricsReport rep;
      if (!checkpoint.empty()) {
        const bgf::EvalResult r = bgf::evaluate_checkpoint(bgf::load_checkpoint(checkpoint), ds, split, popt);
        rep = r.report;
        if (!save_dets.empty()) {
          const auto& items = ds.split(split);
          for (std::size_t i = 0; i < items.size(); ++i) {
            bgf::write_detections(fs::path(save_dets) / (fs::path(items[i]).stem().string() + ".txt"),
                                  r.detections[i]);
          }
        }
      } else {
        rep = bgf::evaluate_detection_dir(detections, ds, split);
      }
      const std::string text = bgf::metrics_to_json(rep).dump(2) + "\n";
      if (!out.empty()) bgf::write_text_file(out, text);
      std::cout << (table ? bgf::metrics_table(rep) : text);
    } else if (*ablate) {
      Configs c = load_configs(config, bgf::toy_model_config());
      if (input_size > 0) c.model.input_size = input_size;
      bgf::AblationOptions opt;
      opt.axis = bgf::parse_ablation_axis(axis);
      opt.base = c.model;
      opt.train = c.train;
      opt.train.steps = steps > 0 ? steps : 20;
      if (ablate->count("--seed")) opt.train.seed = seed;
      opt.predict = popt;
      const auto ds = bgf::load_dataset(dataset);
      const bgf::AblationResult r = bgf::run_ablation(opt, ds);
      std::cout << bgf::ablation_table(r);
      if (!out.empty()) bgf::write_text_file(out, bgf::ablation_to_json(r).dump(2) + "\n");
    } else if (*grad) {
      bgf::GradSuiteOptions opt;
      opt.seeds = seeds;
      opt.suites = suites;
      const auto entries = bgf::run_grad_suites(opt);
      std::cout << bgf::grad_suite_table(entries);
      if (!out.empty()) bgf::write_text_file(out, bgf::grad_suite_to_json(entries).dump(2) + "\n");
      for (const auto& e : entries)
        if (!e.passed()) return 1;
    }
  } catch (const bgf::ConfigError& e) {
    error_line("config", e.what());
    return 1;
  } catch (const bgf::FormatError& e) {
    error_line("format", e.what());
    return 1;
  } catch (const bgf::NonFiniteError& e) {
    error_line("non_finite", e.what());
    return 1;
  } catch (const bgf::Error& e) {
    error_line("error", e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("internal", e.what());
    return 1;
  }
  return 0;
}
