#include "bgf/neck.hpp"

#include <algorithm>
#include <set>

namespace bgf {

namespace {

struct OpName {
  NeckOp op;
  const char* name;
};

constexpr OpName kOpNames[] = {
    {NeckOp::CBS, "CBS"},         {NeckOp::CSP, "CSP"},
    {NeckOp::C2f, "C2f"},         {NeckOp::Upsample, "Upsample"},
    {NeckOp::Downsample, "Downsample"}, {NeckOp::Concat, "Concat"},
    {NeckOp::WeightedSum, "WeightedSum"}, {NeckOp::BRA, "BRA"},
    {NeckOp::SE, "SE"},           {NeckOp::ECA, "ECA"},
    {NeckOp::CBAM, "CBAM"},       {NeckOp::CA, "CA"},
    {NeckOp::Identity, "Identity"},
};

AttentionKind attention_of(NeckOp op) {
  switch (op) {
    case NeckOp::SE: return AttentionKind::SE;
    case NeckOp::ECA: return AttentionKind::ECA;
    case NeckOp::CBAM: return AttentionKind::CBAM;
    case NeckOp::CA: return AttentionKind::CA;
    default: return AttentionKind::BRA;
  }
}

NeckOp op_of(AttentionKind k) {
  switch (k) {
    case AttentionKind::SE: return NeckOp::SE;
    case AttentionKind::ECA: return NeckOp::ECA;
    case AttentionKind::CBAM: return NeckOp::CBAM;
    case AttentionKind::CA: return NeckOp::CA;
    case AttentionKind::BRA: return NeckOp::BRA;
  }
  return NeckOp::BRA;
}

std::string where(const NeckNode& n) { return "neck node '" + n.id + "' (" + neck_op_name(n.op) + ")"; }

}  // namespace

const char* neck_op_name(NeckOp op) {
  for (const auto& e : kOpNames)
    if (e.op == op) return e.name;
  return "?";
}

NeckOp parse_neck_op(const std::string& s) {
  for (const auto& e : kOpNames)
    if (s == e.name) return e.op;
  throw Error("unknown neck op '" + s + "'");
}

bool is_attention_op(NeckOp op) {
  return op == NeckOp::BRA || op == NeckOp::SE || op == NeckOp::ECA || op == NeckOp::CBAM || op == NeckOp::CA;
}

bool is_tap_id(const std::string& id) { return id.size() == 2 && id[0] == 'P' && id[1] >= '2' && id[1] <= '5'; }

int tap_level(const std::string& id) {
  if (!is_tap_id(id)) throw Error("'" + id + "' is not a backbone tap");
  return id[1] - '0';
}

const NeckNode* NeckGraph::find(const std::string& id) const {
  for (const auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

std::vector<std::string> NeckGraph::inputs_of(const std::string& id) const {
  std::vector<std::string> in;
  for (const auto& e : edges)
    if (e.dst == id) in.push_back(e.src);
  return in;
}

NeckPlan plan_neck(const NeckGraph& g, const std::map<int, std::int64_t>& tap_channels, std::int64_t input_size) {
  NeckPlan plan;
  auto level_extent = [&](int level, const std::string& who) {
    const std::int64_t f = std::int64_t{1} << level;
    if (input_size <= 0 || input_size % f != 0) {
      throw ShapeError(who + ": input size " + std::to_string(input_size) + " not divisible by stride " +
                       std::to_string(f));
    }
    return input_size / f;
  };

  for (const auto& t : g.taps) {
    const int lv = tap_level(t);
    auto it = tap_channels.find(lv);
    if (it == tap_channels.end() || it->second <= 0) throw ShapeError("no channel width for backbone tap " + t);
    const std::int64_t e = level_extent(lv, "tap " + t);
    plan.shapes[t] = {it->second, e, e};
  }
  std::set<std::string> ids;
  for (const auto& n : g.nodes) {
    if (n.id.empty() || is_tap_id(n.id)) throw GraphError("neck node id '" + n.id + "' is empty or reserved");
    if (!ids.insert(n.id).second) throw GraphError("duplicate neck node id '" + n.id + "'");
  }
  for (const auto& e : g.edges) {
    const bool src_ok = ids.count(e.src) || plan.shapes.count(e.src);
    if (!src_ok) throw GraphError("edge source '" + e.src + "' is not a node or declared tap");
    if (!ids.count(e.dst)) throw GraphError("edge destination '" + e.dst + "' is not a node");
  }

  // Kahn's algorithm; among ready nodes, declaration order wins.
  std::map<std::string, std::size_t> pending;
  for (const auto& n : g.nodes) pending[n.id] = 0;
  for (const auto& e : g.edges)
    if (ids.count(e.src)) ++pending[e.dst];
  std::vector<bool> done(g.nodes.size(), false);
  for (std::size_t emitted = 0; emitted < g.nodes.size();) {
    bool progressed = false;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      if (done[i] || pending[g.nodes[i].id] != 0) continue;
      done[i] = true;
      ++emitted;
      progressed = true;
      plan.order.push_back(g.nodes[i].id);
      for (const auto& e : g.edges)
        if (e.src == g.nodes[i].id) --pending[e.dst];
      break;
    }
    if (!progressed) {
      std::string cyc;
      for (std::size_t i = 0; i < g.nodes.size(); ++i)
        if (!done[i]) cyc += (cyc.empty() ? "" : ", ") + g.nodes[i].id;
      throw GraphError("neck graph has a cycle through: " + cyc);
    }
  }

  const BraConfig& bra = g.attention.bra;
  for (const auto& id : plan.order) {
    const NeckNode& n = *g.find(id);
    const auto in = g.inputs_of(id);
    std::vector<FeatureShape> xs;
    for (const auto& s : in) xs.push_back(plan.shapes.at(s));
    const bool fusion = n.op == NeckOp::Concat || n.op == NeckOp::WeightedSum;
    if (fusion && xs.size() < 2) throw ShapeError(where(n) + " needs at least 2 inputs, has " + std::to_string(xs.size()));
    if (!fusion && xs.size() != 1) throw ShapeError(where(n) + " needs exactly 1 input, has " + std::to_string(xs.size()));
    FeatureShape out = xs[0];
    switch (n.op) {
      case NeckOp::Identity:
        break;
      case NeckOp::CBS:
        if (n.kernel < 1 || n.kernel % 2 == 0) throw ShapeError(where(n) + ": kernel must be odd");
        out.channels = n.channels > 0 ? n.channels : out.channels;
        break;
      case NeckOp::CSP:
      case NeckOp::C2f:
        out.channels = n.channels > 0 ? n.channels : out.channels;
        if (out.channels % 2 != 0) throw ShapeError(where(n) + ": odd split width " + std::to_string(out.channels));
        if (n.repeats < 1) throw ShapeError(where(n) + ": repeats must be >= 1");
        if (n.op == NeckOp::C2f && n.shortcut && out.channels != xs[0].channels) {
          throw ShapeError(where(n) + ": shortcut needs equal in/out channels");
        }
        break;
      case NeckOp::Upsample:
        out.height *= 2;
        out.width *= 2;
        break;
      case NeckOp::Downsample:
        out.channels = n.channels > 0 ? n.channels : out.channels;
        out.height = (out.height - 1) / 2 + 1;
        out.width = (out.width - 1) / 2 + 1;
        break;
      case NeckOp::Concat:
        for (std::size_t i = 1; i < xs.size(); ++i) {
          if (xs[i].height != xs[0].height || xs[i].width != xs[0].width) {
            throw ShapeError(where(n) + ": spatial mismatch between '" + in[0] + "' and '" + in[i] + "'");
          }
          out.channels += xs[i].channels;
        }
        break;
      case NeckOp::WeightedSum:
        for (std::size_t i = 1; i < xs.size(); ++i) {
          if (xs[i].height != xs[0].height || xs[i].width != xs[0].width) {
            throw ShapeError(where(n) + ": spatial mismatch between '" + in[0] + "' and '" + in[i] + "'");
          }
          if (xs[i].channels != xs[0].channels) {
            throw ShapeError(where(n) + ": channel mismatch between '" + in[0] + "' and '" + in[i] + "'");
          }
        }
        break;
      case NeckOp::BRA: {
        BraConfig b = bra;
        b.channels = out.channels;
        try {
          b.validate();
        } catch (const ShapeError& e) {
          throw ShapeError(where(n) + ": " + e.what());
        }
        if (out.height % b.region_grid != 0 || out.width % b.region_grid != 0) {
          throw ShapeError(where(n) + ": spatial " + std::to_string(out.height) + "x" + std::to_string(out.width) +
                           " not divisible by region grid " + std::to_string(b.region_grid));
        }
        break;
      }
      case NeckOp::SE:
      case NeckOp::ECA:
      case NeckOp::CBAM:
      case NeckOp::CA:
        break;
    }
    const std::int64_t e = level_extent(n.level, where(n));
    if (out.height != e || out.width != e) {
      throw ShapeError(where(n) + ": computed " + std::to_string(out.height) + "x" + std::to_string(out.width) +
                       " does not match declared level P" + std::to_string(n.level));
    }
    plan.shapes[id] = out;
  }
  if (g.outputs.empty()) throw GraphError("neck graph declares no outputs");
  for (const auto& o : g.outputs) {
    auto it = plan.shapes.find(o);
    if (it == plan.shapes.end()) throw GraphError("neck output '" + o + "' is not a node or tap");
    plan.output_shapes.push_back(it->second);
  }
  return plan;
}

template <typename T>
Var<T> fuse_concat(const std::vector<Var<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("fuse_concat: no inputs");
  if (inputs.size() == 1) return inputs[0];
  for (const auto& x : inputs) {
    if (x.value().rank() != 4 || x.dim(0) != inputs[0].dim(0) || x.dim(2) != inputs[0].dim(2) ||
        x.dim(3) != inputs[0].dim(3)) {
      throw ShapeError("fuse_concat: spatial mismatch " + shape_str(inputs[0].shape()) + " vs " + shape_str(x.shape()));
    }
  }
  return ops::concat(inputs, 1);
}

template <typename T>
Var<T> fuse_weighted(const std::vector<Var<T>>& inputs, Var<T> weights, T eps) {
  if (inputs.empty()) throw ShapeError("fuse_weighted: no inputs");
  const auto m = static_cast<std::int64_t>(inputs.size());
  if (weights.value().rank() != 1 || weights.dim(0) != m) {
    throw ShapeError("fuse_weighted: expected " + std::to_string(m) + " weights, got " + shape_str(weights.shape()));
  }
  for (const auto& x : inputs) {
    if (x.shape() != inputs[0].shape()) {
      throw ShapeError("fuse_weighted: shape mismatch " + shape_str(inputs[0].shape()) + " vs " + shape_str(x.shape()));
    }
  }
  Graph<T>& g = weights.graph();
  const NdTensor<T>& wv = weights.value();
  T denom = eps;
  for (std::int64_t i = 0; i < m; ++i) denom += std::max(wv[i], T(0));
  NdTensor<T> out(inputs[0].shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < m; ++i) {
    const T a = std::max(wv[i], T(0)) / denom;
    const NdTensor<T>& xv = inputs[static_cast<std::size_t>(i)].value();
    for (std::int64_t j = 0; j < n; ++j) out[j] += a * xv[j];
  }
  std::vector<std::size_t> parents;
  for (const auto& x : inputs) parents.push_back(x.id());
  parents.push_back(weights.id());
  return g.record("fuse_weighted", std::move(out), parents, [parents, m, n, eps](Graph<T>& gr, std::size_t self) {
    const NdTensor<T>& gy = gr.grad(self);
    const std::size_t wid = parents.back();
    const NdTensor<T>& wv2 = gr.value(wid);
    T den = eps;
    for (std::int64_t i = 0; i < m; ++i) den += std::max(wv2[i], T(0));
    std::vector<T> dots(static_cast<std::size_t>(m), T(0));
    T mix = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      const std::size_t xid = parents[static_cast<std::size_t>(i)];
      const NdTensor<T>& xv = gr.value(xid);
      const T a = std::max(wv2[i], T(0)) / den;
      T d = 0;
      for (std::int64_t j = 0; j < n; ++j) d += gy[j] * xv[j];
      dots[static_cast<std::size_t>(i)] = d;
      mix += a * d;
      if (gr.requires_grad(xid)) {
        NdTensor<T>& gx = gr.grad(xid);
        for (std::int64_t j = 0; j < n; ++j) gx[j] += a * gy[j];
      }
    }
    if (gr.requires_grad(wid)) {
      NdTensor<T>& gw = gr.grad(wid);
      for (std::int64_t i = 0; i < m; ++i) {
        if (wv2[i] > T(0)) gw[i] += (dots[static_cast<std::size_t>(i)] - mix) / den;
      }
    }
  });
}

template <typename T>
Neck<T>::Neck(NeckGraph graph, std::map<int, std::int64_t> tap_channels, std::int64_t input_size,
              std::mt19937_64& rng)
    : graph_(std::move(graph)), plan_(plan_neck(graph_, tap_channels, input_size)) {
  for (const auto& id : plan_.order) {
    const NeckNode& n = *graph_.find(id);
    const auto in = graph_.inputs_of(id);
    const FeatureShape& x = plan_.shapes.at(in[0]);
    const FeatureShape& y = plan_.shapes.at(id);
    const std::string name = "neck." + id;
    switch (n.op) {
      case NeckOp::CBS:
        layers_[id] = std::make_unique<ConvBlock<T>>(name, x.channels, y.channels, n.kernel, 1, rng);
        break;
      case NeckOp::Downsample:
        layers_[id] = std::make_unique<ConvBlock<T>>(name, x.channels, y.channels, 3, 2, rng);
        break;
      case NeckOp::CSP:
        layers_[id] = std::make_unique<CspBlock<T>>(name, x.channels, y.channels, n.repeats, rng);
        break;
      case NeckOp::C2f:
        layers_[id] = std::make_unique<C2f<T>>(name, x.channels, y.channels, n.repeats, n.shortcut, rng);
        break;
      case NeckOp::BRA:
      case NeckOp::SE:
      case NeckOp::ECA:
      case NeckOp::CBAM:
      case NeckOp::CA:
        layers_[id] = make_attention<T>(name, attention_of(n.op), x.channels, graph_.attention, rng);
        break;
      case NeckOp::WeightedSum:
        fusion_weights_.emplace(id, Parameter<T>(name + ".w", NdTensor<T>::ones({static_cast<std::int64_t>(in.size())})));
        break;
      case NeckOp::Upsample:
      case NeckOp::Concat:
      case NeckOp::Identity:
        break;
    }
  }
}

template <typename T>
std::vector<Var<T>> Neck<T>::forward(const std::map<std::string, Var<T>>& taps) {
  std::map<std::string, Var<T>> vals;
  for (const auto& t : graph_.taps) {
    auto it = taps.find(t);
    if (it == taps.end()) throw ShapeError("neck: missing backbone tap " + t);
    const FeatureShape& s = plan_.shapes.at(t);
    if (it->second.value().rank() != 4 || it->second.dim(1) != s.channels) {
      throw ShapeError("neck: tap " + t + " has shape " + shape_str(it->second.shape()) + ", expected " +
                       std::to_string(s.channels) + " channels");
    }
    vals[t] = it->second;
  }
  for (const auto& id : plan_.order) {
    const NeckNode& n = *graph_.find(id);
    std::vector<Var<T>> xs;
    for (const auto& s : graph_.inputs_of(id)) xs.push_back(vals.at(s));
    Var<T> y;
    switch (n.op) {
      case NeckOp::Identity: y = xs[0]; break;
      case NeckOp::Upsample: y = ops::upsample_nearest2x(xs[0]); break;
      case NeckOp::Concat: y = fuse_concat(xs); break;
      case NeckOp::WeightedSum: {
        Var<T> w = xs[0].graph().parameter(fusion_weights_.at(id));
        y = fuse_weighted(xs, w);
        break;
      }
      default: y = layers_.at(id)->forward(xs[0]); break;
    }
    vals[id] = y;
  }
  std::vector<Var<T>> outs;
  for (const auto& o : graph_.outputs) outs.push_back(vals.at(o));
  return outs;
}

template <typename T>
void Neck<T>::visit(const TensorVisitor<T>& v) {
  for (const auto& id : plan_.order) {
    if (auto it = layers_.find(id); it != layers_.end()) it->second->visit(v);
    if (auto it = fusion_weights_.find(id); it != fusion_weights_.end() && v.on_parameter) v.on_parameter(it->second);
  }
}

template <typename T>
std::int64_t Neck<T>::parameter_count() {
  std::int64_t n = 0;
  visit({[&n](Parameter<T>& p) { n += p.value.numel(); }, nullptr});
  return n;
}

template <typename T>
std::vector<int> Neck<T>::output_levels() const {
  std::vector<int> lv;
  for (const auto& o : graph_.outputs) lv.push_back(is_tap_id(o) ? tap_level(o) : graph_.find(o)->level);
  return lv;
}

template <typename T>
Layer<T>* Neck<T>::layer(const std::string& id) {
  auto it = layers_.find(id);
  return it == layers_.end() ? nullptr : it->second.get();
}

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(std::string name, std::vector<std::string> taps) {
    g.name = std::move(name);
    g.taps = std::move(taps);
  }
  std::string node(std::string id, NeckOp op, int level, const std::vector<std::string>& inputs,
                   std::int64_t channels = 0, std::int64_t repeats = 1, std::int64_t kernel = 1) {
    g.nodes.push_back({id, op, level, channels, repeats, kernel, false});
    for (const auto& s : inputs) g.edges.push_back({s, id});
    return id;
  }
  NeckGraph g;
};

BraConfig neck_bra_defaults() {
  BraConfig b;
  b.region_grid = 2;
  b.topk = 2;
  b.heads = 4;
  return b;
}

}  // namespace

NeckGraph preset_fpn_panet(const NeckWidths& w) {
  GraphBuilder b("fpn-panet", {"P3", "P4", "P5"});
  const auto c = [&](int level) { return w.level[static_cast<std::size_t>(level - 2)]; };
  const std::int64_t n = w.repeats;
  // Top-down.
  b.node("up5", NeckOp::Upsample, 4, {"P5"});
  b.node("cat4", NeckOp::Concat, 4, {"up5", "P4"});
  b.node("td4", NeckOp::C2f, 4, {"cat4"}, c(4), n);
  b.node("up4", NeckOp::Upsample, 3, {"td4"});
  b.node("cat3", NeckOp::Concat, 3, {"up4", "P3"});
  b.node("out3", NeckOp::C2f, 3, {"cat3"}, c(3), n);
  // Bottom-up.
  b.node("down3", NeckOp::Downsample, 4, {"out3"}, c(3));
  b.node("cat4b", NeckOp::Concat, 4, {"down3", "td4"});
  b.node("out4", NeckOp::C2f, 4, {"cat4b"}, c(4), n);
  b.node("down4", NeckOp::Downsample, 5, {"out4"}, c(4));
  b.node("cat5", NeckOp::Concat, 5, {"down4", "P5"});
  b.node("out5", NeckOp::C2f, 5, {"cat5"}, c(5), n);
  b.g.outputs = {"out3", "out4", "out5"};
  b.g.attention.bra = neck_bra_defaults();
  return b.g;
}

NeckGraph preset_bifpn(const NeckWidths& w) {
  GraphBuilder b("bifpn", {"P2", "P3", "P4", "P5"});
  const std::int64_t cw = w.level[1];
  const std::int64_t n = w.repeats;
  for (int lv = 2; lv <= 5; ++lv) {
    b.node("lat" + std::to_string(lv), NeckOp::CBS, lv, {"P" + std::to_string(lv)}, cw, 1, 1);
  }
  // Top-down.
  b.node("up5", NeckOp::Upsample, 4, {"lat5"});
  b.node("att_up5", NeckOp::BRA, 4, {"up5"});
  b.node("sum4", NeckOp::WeightedSum, 4, {"lat4", "att_up5"});
  b.node("td4", NeckOp::CSP, 4, {"sum4"}, cw, n);
  b.node("up4", NeckOp::Upsample, 3, {"td4"});
  b.node("att_up4", NeckOp::BRA, 3, {"up4"});
  b.node("sum3", NeckOp::WeightedSum, 3, {"lat3", "att_up4"});
  b.node("td3", NeckOp::CSP, 3, {"sum3"}, cw, n);
  b.node("up3", NeckOp::Upsample, 2, {"td3"});
  b.node("att_up3", NeckOp::BRA, 2, {"up3"});
  b.node("sum2", NeckOp::WeightedSum, 2, {"lat2", "att_up3"});
  b.node("out2", NeckOp::CSP, 2, {"sum2"}, cw, n);
  // Bottom-up.
  b.node("down2", NeckOp::Downsample, 3, {"out2"}, cw);
  b.node("att_down2", NeckOp::BRA, 3, {"down2"});
  b.node("sum3b", NeckOp::WeightedSum, 3, {"lat3", "td3", "att_down2"});
  b.node("out3", NeckOp::CSP, 3, {"sum3b"}, cw, n);
  b.node("down3", NeckOp::Downsample, 4, {"out3"}, cw);
  b.node("att_down3", NeckOp::BRA, 4, {"down3"});
  b.node("sum4b", NeckOp::WeightedSum, 4, {"lat4", "td4", "att_down3"});
  b.node("out4", NeckOp::CSP, 4, {"sum4b"}, cw, n);
  b.node("down4", NeckOp::Downsample, 5, {"out4"}, cw);
  b.node("att_down4", NeckOp::BRA, 5, {"down4"});
  b.node("sum5", NeckOp::WeightedSum, 5, {"lat5", "att_down4"});
  b.node("out5", NeckOp::CSP, 5, {"sum5"}, cw, n);
  b.g.outputs = {"out2", "out3", "out4", "out5"};
  b.g.attention.bra = neck_bra_defaults();
  return b.g;
}

NeckGraph preset_bgf(const NeckWidths& w) {
  GraphBuilder b("bgf", {"P2", "P3", "P4", "P5"});
  const auto c = [&](int level) { return w.level[static_cast<std::size_t>(level - 2)]; };
  const std::int64_t n = w.repeats;
  // Top-down: upsample, attend, fuse with the same-level tap and the
  // downsampled finer tap (queen fusion), CSP.
  b.node("up5", NeckOp::Upsample, 4, {"P5"});
  b.node("att_up5", NeckOp::BRA, 4, {"up5"});
  b.node("q3", NeckOp::Downsample, 4, {"P3"}, c(3));
  b.node("cat4", NeckOp::Concat, 4, {"att_up5", "P4", "q3"});
  b.node("td4", NeckOp::CSP, 4, {"cat4"}, c(4), n);
  b.node("up4", NeckOp::Upsample, 3, {"td4"});
  b.node("att_up4", NeckOp::BRA, 3, {"up4"});
  b.node("q2", NeckOp::Downsample, 3, {"P2"}, c(2));
  b.node("cat3", NeckOp::Concat, 3, {"att_up4", "P3", "q2"});
  b.node("td3", NeckOp::CSP, 3, {"cat3"}, c(3), n);
  b.node("up3", NeckOp::Upsample, 2, {"td3"});
  b.node("att_up3", NeckOp::BRA, 2, {"up3"});
  b.node("cat2", NeckOp::Concat, 2, {"att_up3", "P2"});
  b.node("out2", NeckOp::CSP, 2, {"cat2"}, c(2), n);
  // Bottom-up: downsample, attend, fuse with the top-down node, the tap and
  // the upsampled coarser node of the previous stage, CSP.
  b.node("down2", NeckOp::Downsample, 3, {"out2"}, c(2));
  b.node("att_down2", NeckOp::BRA, 3, {"down2"});
  b.node("cat3b", NeckOp::Concat, 3, {"att_down2", "td3", "P3", "up4"});
  b.node("out3", NeckOp::CSP, 3, {"cat3b"}, c(3), n);
  b.node("down3", NeckOp::Downsample, 4, {"out3"}, c(3));
  b.node("att_down3", NeckOp::BRA, 4, {"down3"});
  b.node("cat4b", NeckOp::Concat, 4, {"att_down3", "td4", "P4", "up5"});
  b.node("out4", NeckOp::CSP, 4, {"cat4b"}, c(4), n);
  b.node("down4", NeckOp::Downsample, 5, {"out4"}, c(4));
  b.node("att_down4", NeckOp::BRA, 5, {"down4"});
  b.node("cat5", NeckOp::Concat, 5, {"att_down4", "P5"});
  b.node("out5", NeckOp::CSP, 5, {"cat5"}, c(5), n);
  b.g.outputs = {"out2", "out3", "out4", "out5"};
  b.g.attention.bra = neck_bra_defaults();
  return b.g;
}

NeckGraph preset_by_name(const std::string& name, const NeckWidths& w) {
  if (name == "fpn-panet") return preset_fpn_panet(w);
  if (name == "bifpn") return preset_bifpn(w);
  if (name == "bgf") return preset_bgf(w);
  throw Error("unknown neck preset '" + name + "' (expected fpn-panet, bifpn or bgf)");
}

NeckGraph with_attention(NeckGraph g, AttentionKind kind) {
  for (auto& n : g.nodes)
    if (is_attention_op(n.op)) n.op = op_of(kind);
  g.attention.kind = kind;
  return g;
}

nlohmann::json attention_to_json(const AttentionConfig& a) {
  return {{"kind", attention_kind_name(a.kind)},
          {"bra", {{"region_grid", a.bra.region_grid}, {"topk", a.bra.topk}, {"heads", a.bra.heads},
                   {"local_context", a.bra.local_context}}},
          {"se_reduction", a.se_reduction},
          {"eca_kernel", a.eca_kernel},
          {"cbam_reduction", a.cbam_reduction},
          {"cbam_kernel", a.cbam_kernel},
          {"ca_reduction", a.ca_reduction}};
}

AttentionConfig attention_from_json(const nlohmann::json& j) {
  AttentionConfig a;
  if (j.contains("kind")) a.kind = parse_attention_kind(j.at("kind").get<std::string>());
  if (j.contains("bra")) {
    const auto& b = j.at("bra");
    a.bra.region_grid = b.value("region_grid", a.bra.region_grid);
    a.bra.topk = b.value("topk", a.bra.topk);
    a.bra.heads = b.value("heads", a.bra.heads);
    a.bra.local_context = b.value("local_context", a.bra.local_context);
  }
  a.se_reduction = j.value("se_reduction", a.se_reduction);
  a.eca_kernel = j.value("eca_kernel", a.eca_kernel);
  a.cbam_reduction = j.value("cbam_reduction", a.cbam_reduction);
  a.cbam_kernel = j.value("cbam_kernel", a.cbam_kernel);
  a.ca_reduction = j.value("ca_reduction", a.ca_reduction);
  return a;
}

nlohmann::json neck_to_json(const NeckGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json j = {{"id", n.id}, {"op", neck_op_name(n.op)}, {"level", n.level}};
    if (n.channels) j["channels"] = n.channels;
    if (n.op == NeckOp::CSP || n.op == NeckOp::C2f) j["repeats"] = n.repeats;
    if (n.op == NeckOp::CBS) j["kernel"] = n.kernel;
    if (n.op == NeckOp::C2f) j["shortcut"] = n.shortcut;
    nodes.push_back(j);
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges) edges.push_back({e.src, e.dst});
  return {{"name", g.name}, {"taps", g.taps},   {"nodes", nodes},
          {"edges", edges}, {"outputs", g.outputs}, {"attention", attention_to_json(g.attention)}};
}

NeckGraph neck_from_json(const nlohmann::json& j) {
  NeckGraph g;
  g.name = j.value("name", std::string("custom"));
  g.taps = j.at("taps").get<std::vector<std::string>>();
  for (const auto& t : g.taps) tap_level(t);
  for (const auto& nj : j.at("nodes")) {
    NeckNode n;
    n.id = nj.at("id").get<std::string>();
    n.op = parse_neck_op(nj.at("op").get<std::string>());
    n.level = nj.at("level").get<int>();
    n.channels = nj.value("channels", std::int64_t{0});
    n.repeats = nj.value("repeats", std::int64_t{1});
    n.kernel = nj.value("kernel", std::int64_t{1});
    n.shortcut = nj.value("shortcut", false);
    g.nodes.push_back(n);
  }
  for (const auto& e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2) throw Error("neck edge must be a [src, dst] pair");
    g.edges.push_back({e[0].get<std::string>(), e[1].get<std::string>()});
  }
  g.outputs = j.at("outputs").get<std::vector<std::string>>();
  if (j.contains("attention")) {
    g.attention = attention_from_json(j.at("attention"));
  } else {
    g.attention.bra = neck_bra_defaults();
  }
  return g;
}

#define BGF_INSTANTIATE(T)                                                          \
  template Var<T> fuse_concat(const std::vector<Var<T>>&);                          \
  template Var<T> fuse_weighted(const std::vector<Var<T>>&, Var<T>, T);             \
  template class Neck<T>;
BGF_INSTANTIATE(float)
BGF_INSTANTIATE(double)
#undef BGF_INSTANTIATE

}  // namespace bgf
