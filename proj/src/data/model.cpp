#include "bgf/model.hpp"

#include <cstdio>
#include <sstream>

namespace bgf {

namespace {

const char* kLevelNames[4] = {"P2", "P3", "P4", "P5"};

}  // namespace

ModelConfig::ModelConfig() {
  head.strides.clear();
  attention.bra.region_grid = 2;
  attention.bra.topk = 2;
  attention.bra.heads = 4;
}

NeckGraph ModelConfig::resolved_neck() const {
  NeckGraph g = neck ? *neck : preset_by_name(neck_preset, neck_widths);
  g = with_attention(std::move(g), attention.kind);
  g.attention = attention;
  return g;
}

std::map<int, std::int64_t> ModelConfig::tap_channels() const {
  std::map<int, std::int64_t> m;
  for (int i = 0; i < 4; ++i) m[i + 2] = backbone.widths[static_cast<std::size_t>(i)];
  return m;
}

ModelConfig ModelConfig::resolved() const {
  ModelConfig c = *this;
  if (c.input_size < 32 || c.input_size % 32 != 0) {
    throw ConfigError("input_size must be a positive multiple of 32, got " + std::to_string(c.input_size));
  }
  if (c.backbone.in_channels != 1 && c.backbone.in_channels != 3) throw ConfigError("backbone in_channels must be 1 or 3");
  if (c.backbone.stem < 1) throw ConfigError("backbone stem width must be >= 1");
  for (std::size_t i = 0; i < 4; ++i) {
    if (c.backbone.widths[i] < 2 || c.backbone.widths[i] % 2 != 0) {
      throw ConfigError(std::string("backbone width at ") + kLevelNames[i] + " must be even and >= 2");
    }
    if (c.backbone.repeats[i] < 1) throw ConfigError(std::string("backbone repeats at ") + kLevelNames[i] + " must be >= 1");
  }
  NeckPlan plan;
  NeckGraph g;
  try {
    g = c.resolved_neck();
    plan = plan_neck(g, c.tap_channels(), c.input_size);
  } catch (const Error& e) {
    throw ConfigError(std::string("neck: ") + e.what());
  }
  std::vector<std::int64_t> strides;
  for (const auto& id : g.outputs) strides.push_back(std::int64_t{1} << g.find(id)->level);
  if (c.head.strides.empty()) {
    c.head.strides = strides;
  } else if (c.head.strides != strides) {
    std::string want, got;
    for (auto s : strides) want += " " + std::to_string(s);
    for (auto s : c.head.strides) got += " " + std::to_string(s);
    throw ConfigError("head strides {" + got + " } do not match neck outputs {" + want + " }");
  }
  if (c.head.reg_max < 1) throw ConfigError("head reg_max must be >= 1");
  if (c.head.num_classes < 1) throw ConfigError("head num_classes must be >= 1");
  if (c.loss.reg_max != c.head.reg_max) {
    throw ConfigError("loss reg_max " + std::to_string(c.loss.reg_max) + " differs from head reg_max " +
                      std::to_string(c.head.reg_max));
  }
  return c;
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.name = "BGF-YOLO-toy";
  c.input_size = 128;
  c.backbone.stem = 8;
  c.backbone.widths = {16, 32, 48, 64};
  c.backbone.repeats = {1, 1, 1, 1};
  c.neck_widths = {{16, 32, 48, 64}, 1};
  c.head.cls_width = 16;
  c.head.reg_width = 32;
  c.head.reg_max = 8;
  c.loss.reg_max = 8;
  return c;
}

nlohmann::json loss_config_to_json(const LossConfig& c) {
  return {{"reg", iou_variant_name(c.reg)},
          {"cls", cls_loss_name(c.cls)},
          {"weights", {{"box", c.weights.box}, {"cls", c.weights.cls}, {"dfl", c.weights.dfl}}},
          {"varifocal", {{"alpha", c.varifocal.alpha}, {"gamma", c.varifocal.gamma}}},
          {"tal", {{"topk", c.tal.topk}, {"alpha", c.tal.alpha}, {"beta", c.tal.beta}}},
          {"reg_max", c.reg_max}};
}

LossConfig loss_config_from_json(const nlohmann::json& j) {
  LossConfig c;
  if (j.contains("reg")) c.reg = parse_iou_variant(j.at("reg").get<std::string>());
  if (j.contains("cls")) c.cls = parse_cls_loss(j.at("cls").get<std::string>());
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.box = w.value("box", c.weights.box);
    c.weights.cls = w.value("cls", c.weights.cls);
    c.weights.dfl = w.value("dfl", c.weights.dfl);
  }
  if (j.contains("varifocal")) {
    c.varifocal.alpha = j.at("varifocal").value("alpha", c.varifocal.alpha);
    c.varifocal.gamma = j.at("varifocal").value("gamma", c.varifocal.gamma);
  }
  if (j.contains("tal")) {
    const auto& t = j.at("tal");
    c.tal.topk = t.value("topk", c.tal.topk);
    c.tal.alpha = t.value("alpha", c.tal.alpha);
    c.tal.beta = t.value("beta", c.tal.beta);
  }
  c.reg_max = j.value("reg_max", c.reg_max);
  return c;
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["input_size"] = c.input_size;
  j["backbone"] = {{"in_channels", c.backbone.in_channels},
                   {"stem", c.backbone.stem},
                   {"widths", c.backbone.widths},
                   {"repeats", c.backbone.repeats}};
  if (c.neck) {
    j["neck"] = neck_to_json(*c.neck);
  } else {
    j["neck_preset"] = c.neck_preset;
    j["neck_widths"] = {{"levels", c.neck_widths.level}, {"repeats", c.neck_widths.repeats}};
  }
  j["attention"] = attention_to_json(c.attention);
  j["head"] = {{"strides", c.head.strides},
               {"num_classes", c.head.num_classes},
               {"reg_max", c.head.reg_max},
               {"cls_width", c.head.cls_width},
               {"reg_width", c.head.reg_width}};
  j["loss"] = loss_config_to_json(c.loss);
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    if (j.value("preset", std::string()) == "toy") c = toy_model_config();
    c.name = j.value("name", c.name);
    c.input_size = j.value("input_size", c.input_size);
    if (j.contains("backbone")) {
      const auto& b = j.at("backbone");
      c.backbone.in_channels = b.value("in_channels", c.backbone.in_channels);
      c.backbone.stem = b.value("stem", c.backbone.stem);
      if (b.contains("widths")) c.backbone.widths = b.at("widths").get<std::array<std::int64_t, 4>>();
      if (b.contains("repeats")) c.backbone.repeats = b.at("repeats").get<std::array<std::int64_t, 4>>();
    }
    if (j.contains("neck")) {
      c.neck = neck_from_json(j.at("neck"));
      c.attention = c.neck->attention;
    }
    c.neck_preset = j.value("neck_preset", c.neck_preset);
    if (j.contains("neck_widths")) {
      const auto& w = j.at("neck_widths");
      if (w.contains("levels")) c.neck_widths.level = w.at("levels").get<std::array<std::int64_t, 4>>();
      c.neck_widths.repeats = w.value("repeats", c.neck_widths.repeats);
    }
    if (j.contains("attention")) c.attention = attention_from_json(j.at("attention"));
    if (j.contains("head")) {
      const auto& h = j.at("head");
      if (h.contains("strides")) c.head.strides = h.at("strides").get<std::vector<std::int64_t>>();
      c.head.num_classes = h.value("num_classes", c.head.num_classes);
      c.head.reg_max = h.value("reg_max", c.head.reg_max);
      c.head.cls_width = h.value("cls_width", c.head.cls_width);
      c.head.reg_width = h.value("reg_width", c.head.reg_width);
    }
    if (j.contains("loss")) {
      c.loss = loss_config_from_json(j.at("loss"));
      if (!j.at("loss").contains("reg_max")) c.loss.reg_max = c.head.reg_max;
    } else {
      c.loss.reg_max = c.head.reg_max;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, std::mt19937_64& rng) {
  stem_ = std::make_unique<ConvBlock<T>>("backbone.stem", cfg.in_channels, cfg.stem, 3, 2, rng);
  std::int64_t prev = cfg.stem;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = std::string("backbone.") + kLevelNames[i];
    down_.push_back(std::make_unique<ConvBlock<T>>(p + ".down", prev, cfg.widths[i], 3, 2, rng));
    stage_.push_back(std::make_unique<C2f<T>>(p + ".c2f", cfg.widths[i], cfg.widths[i], cfg.repeats[i], true, rng));
    prev = cfg.widths[i];
  }
  sppf_ = std::make_unique<Sppf<T>>("backbone.P5.sppf", prev, prev, rng);
}

template <typename T>
std::map<std::string, Var<T>> Backbone<T>::forward(Var<T> x) {
  std::map<std::string, Var<T>> out;
  x = stem_->forward(x);
  for (std::size_t i = 0; i < 4; ++i) {
    x = stage_[i]->forward(down_[i]->forward(x));
    if (i == 3) x = sppf_->forward(x);
    out[kLevelNames[i]] = x;
  }
  return out;
}

template <typename T>
void Backbone<T>::visit(const TensorVisitor<T>& v) {
  stem_->visit(v);
  for (std::size_t i = 0; i < 4; ++i) {
    down_[i]->visit(v);
    stage_[i]->visit(v);
  }
  sppf_->visit(v);
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg.resolved()), rng_(seed) {
  backbone_ = std::make_unique<Backbone<T>>(cfg_.backbone, rng_);
  neck_ = std::make_unique<Neck<T>>(cfg_.resolved_neck(), cfg_.tap_channels(), cfg_.input_size, rng_);
  std::vector<std::int64_t> in_ch;
  for (const auto& s : neck_->plan().output_shapes) in_ch.push_back(s.channels);
  head_ = std::make_unique<DetectHead<T>>("head", in_ch, cfg_.head, cfg_.input_size, rng_);
  anchors_ = make_anchor_points(cfg_.input_size, cfg_.head.strides);
}

template <typename T>
HeadOutput<T> Model<T>::forward(Graph<T>& g, const NdTensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != cfg_.backbone.in_channels || images.dim(2) != cfg_.input_size ||
      images.dim(3) != cfg_.input_size) {
    throw ShapeError("model: input " + shape_str(images.shape()) + " does not match [N, " +
                     std::to_string(cfg_.backbone.in_channels) + ", " + std::to_string(cfg_.input_size) + ", " +
                     std::to_string(cfg_.input_size) + "]");
  }
  const auto taps = backbone_->forward(g.constant(images));
  return head_->forward(neck_->forward(taps));
}

template <typename T>
void Model<T>::visit(const TensorVisitor<T>& v) {
  backbone_->visit(v);
  neck_->visit(v);
  head_->visit(v);
}

template <typename T>
std::int64_t Model<T>::parameter_count() {
  std::int64_t n = 0;
  visit({[&n](Parameter<T>& p) { n += p.value.numel(); }, nullptr});
  return n;
}

template class Backbone<float>;
template class Backbone<double>;
template class Model<float>;
template class Model<double>;

ModelSummary summarize(const ModelConfig& cfg_in) {
  Model<float> m(cfg_in, 0);
  const ModelConfig& cfg = m.config();
  ModelSummary s;
  s.name = cfg.name;
  s.input_size = cfg.input_size;

  std::vector<std::pair<std::string, std::int64_t>> counts;
  m.visit({[&counts](Parameter<float>& p) { counts.emplace_back(p.name, p.value.numel()); }, nullptr});
  auto prefixed = [&counts](const std::string& prefix) {
    std::int64_t n = 0;
    for (const auto& [k, v] : counts)
      if (k.rfind(prefix + ".", 0) == 0) n += v;
    return n;
  };

  std::int64_t side = cfg.input_size / 2;
  s.rows.push_back({"backbone", "stem", "CBS", {cfg.backbone.stem, side, side}, prefixed("backbone.stem")});
  for (std::size_t i = 0; i < 4; ++i) {
    side /= 2;
    const std::string p = std::string("backbone.") + kLevelNames[i];
    const FeatureShape fs{cfg.backbone.widths[i], side, side};
    s.rows.push_back({"backbone", std::string(kLevelNames[i]) + ".down", "CBS", fs, prefixed(p + ".down")});
    s.rows.push_back({"backbone", std::string(kLevelNames[i]) + ".c2f", "C2f", fs, prefixed(p + ".c2f")});
    if (i == 3) s.rows.push_back({"backbone", "P5.sppf", "SPPF", fs, prefixed(p + ".sppf")});
  }
  const NeckGraph& g = m.neck().graph();
  for (const auto& id : m.neck().plan().order) {
    const NeckNode& n = *g.find(id);
    std::int64_t params = prefixed("neck." + id);
    if (n.op == NeckOp::WeightedSum) params = static_cast<std::int64_t>(g.inputs_of(id).size());
    s.rows.push_back({"neck", id, neck_op_name(n.op), m.neck().plan().shapes.at(id), params});
  }
  const std::int64_t per_anchor = cfg.head.num_classes + 4 * cfg.head.bins();
  for (std::size_t i = 0; i < cfg.head.strides.size(); ++i) {
    const std::int64_t grid = cfg.input_size / cfg.head.strides[i];
    s.rows.push_back({"head", "detect." + std::to_string(cfg.head.strides[i]), "Detect", {per_anchor, grid, grid},
                      prefixed("head." + std::to_string(i))});
  }
  s.parameters = m.parameter_count();
  return s;
}

std::string summary_table(const ModelSummary& s) {
  std::ostringstream os;
  char line[200];
  os << s.name << " @ " << s.input_size << "x" << s.input_size << "\n";
  std::snprintf(line, sizeof line, "%-9s %-12s %-12s %-18s %10s\n", "section", "node", "type", "output", "params");
  os << line;
  for (const auto& r : s.rows) {
    const std::string shape =
        std::to_string(r.shape.channels) + "x" + std::to_string(r.shape.height) + "x" + std::to_string(r.shape.width);
    std::snprintf(line, sizeof line, "%-9s %-12s %-12s %-18s %10lld\n", r.section.c_str(), r.name.c_str(),
                  r.kind.c_str(), shape.c_str(), static_cast<long long>(r.params));
    os << line;
  }
  os << "parameters: " << s.parameters << "\n";
  return os.str();
}

nlohmann::json summary_to_json(const ModelSummary& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) {
    rows.push_back({{"section", r.section},
                    {"name", r.name},
                    {"type", r.kind},
                    {"shape", {r.shape.channels, r.shape.height, r.shape.width}},
                    {"params", r.params}});
  }
  return {{"name", s.name}, {"input_size", s.input_size}, {"parameters", s.parameters}, {"rows", rows}};
}

}  // namespace bgf
