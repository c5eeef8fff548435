#include "bgf/ablate.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace bgf {

const char* ablation_axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::Attention: return "attention";
    case AblationAxis::Neck: return "neck";
    case AblationAxis::Loss: return "loss";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "attention") return AblationAxis::Attention;
  if (s == "neck") return AblationAxis::Neck;
  if (s == "loss") return AblationAxis::Loss;
  throw ConfigError("unknown ablation axis '" + s + "' (expected attention, neck or loss)");
}

std::vector<AblationVariant> ablation_variants(AblationAxis axis, const ModelConfig& base) {
  std::vector<AblationVariant> out;
  switch (axis) {
    case AblationAxis::Attention:
      for (AttentionKind k : {AttentionKind::SE, AttentionKind::ECA, AttentionKind::CBAM, AttentionKind::CA,
                              AttentionKind::BRA}) {
        ModelConfig c = base;
        c.attention.kind = k;
        c.name = std::string(1, attention_letter(k)) + "GF-YOLO";
        std::string v = attention_kind_name(k);
        for (auto& ch : v) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        out.push_back({c.name, v, c});
      }
      break;
    case AblationAxis::Neck: {
      const std::pair<const char*, const char*> necks[] = {
          {"fpn-panet", "BGF-YOLO w/o GFPN"}, {"bifpn", "BBF-YOLO"}, {"bgf", "BGF-YOLO"}};
      for (const auto& [preset, name] : necks) {
        ModelConfig c = base;
        c.neck.reset();
        c.neck_preset = preset;
        c.head.strides.clear();
        c.name = name;
        out.push_back({c.name, preset, c});
      }
      break;
    }
    case AblationAxis::Loss: {
      const std::pair<IouVariant, const char*> losses[] = {
          {IouVariant::GIoU, "BGF-G-YOLO"}, {IouVariant::DIoU, "BGF-D-YOLO"}, {IouVariant::CIoU, "BGF-YOLO"},
          {IouVariant::EIoU, "BGF-E-YOLO"}, {IouVariant::SIoU, "BGF-S-YOLO"}, {IouVariant::WIoU, "BGF-W-YOLO"}};
      for (const auto& [v, name] : losses) {
        ModelConfig c = base;
        c.loss.reg = v;
        c.name = name;
        out.push_back({c.name, iou_variant_name(v), c});
      }
      break;
    }
  }
  return out;
}

AblationResult run_ablation(const AblationOptions& opt, const DatasetDescriptor& ds) {
  AblationResult res;
  res.axis = opt.axis;
  for (const auto& v : ablation_variants(opt.axis, opt.base)) {
    AblationRow row;
    row.model = v.model;
    row.variant = v.variant;
    TrainResult tr;
    try {
      tr = train_toy(v.config, opt.train, ds);
    } catch (const NonFiniteError&) {
      row.finite = false;
      res.rows.push_back(std::move(row));
      continue;
    }
    for (const auto& s : tr.log) row.finite = row.finite && std::isfinite(s.loss.total);
    if (!tr.log.empty()) {
      row.initial_loss = tr.log.front().loss.total;
      row.final_loss = tr.log.back().loss.total;
    }
    for (const auto& t : tr.checkpoint.tensors)
      if (t.kind == "param") row.parameters += static_cast<std::int64_t>(t.data.size());
    row.metrics = evaluate_checkpoint(tr.checkpoint, ds, opt.split, opt.predict).report;
    row.seconds = tr.seconds;
    res.rows.push_back(std::move(row));
  }
  return res;
}

std::string ablation_table(const AblationResult& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "| %-18s | %-9s | %9s | %9s | %9s | %9s | %9s | %10s | %10s |\n", "Model", "Variant",
                "Params", "P", "R", "mAP50", "mAP50:95", "Loss@0", "Loss@end");
  os << line;
  os << "|" << std::string(20, '-') << "|" << std::string(11, '-');
  for (int i = 0; i < 5; ++i) os << "|" << std::string(11, '-');
  os << "|" << std::string(12, '-') << "|" << std::string(12, '-') << "|\n";
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "| %-18s | %-9s | %9lld | %9.3f | %9.3f | %9.3f | %9.3f | %10.4f | %10.4f |\n",
                  row.model.c_str(), row.variant.c_str(), static_cast<long long>(row.parameters),
                  row.metrics.precision, row.metrics.recall, row.metrics.map50, row.metrics.map50_95, row.initial_loss,
                  row.final_loss);
    os << line;
  }
  return os.str();
}

nlohmann::json ablation_to_json(const AblationResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"model", row.model},
                    {"variant", row.variant},
                    {"parameters", row.parameters},
                    {"initial_loss", row.initial_loss},
                    {"final_loss", row.final_loss},
                    {"finite", row.finite},
                    {"precision", row.metrics.precision},
                    {"recall", row.metrics.recall},
                    {"map50", row.metrics.map50},
                    {"map50_95", row.metrics.map50_95},
                    {"seconds", row.seconds}});
  }
  return {{"axis", ablation_axis_name(r.axis)}, {"rows", rows}};
}

}  // namespace bgf
