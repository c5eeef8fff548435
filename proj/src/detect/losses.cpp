#include "bgf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace bgf {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Softmax of one side's bins and its expectation.
double side_softmax(const double* l, std::int64_t bins, double* p) {
  const double m = *std::max_element(l, l + bins);
  double z = 0;
  for (std::int64_t b = 0; b < bins; ++b) z += (p[b] = std::exp(l[b] - m));
  double e = 0;
  for (std::int64_t b = 0; b < bins; ++b) {
    p[b] /= z;
    e += p[b] * static_cast<double>(b);
  }
  return e;
}

}  // namespace

ScalarLoss dfl_loss(std::span<const double> logits, const std::array<double, 4>& target, std::int64_t reg_max) {
  const std::int64_t bins = reg_max + 1;
  if (static_cast<std::int64_t>(logits.size()) != 4 * bins) {
    throw ShapeError("dfl_loss: expected " + std::to_string(4 * bins) + " logits, got " + std::to_string(logits.size()));
  }
  ScalarLoss out;
  out.grad.assign(logits.size(), 0.0);
  std::vector<double> p(static_cast<std::size_t>(bins));
  for (int s = 0; s < 4; ++s) {
    const double y = target[static_cast<std::size_t>(s)];
    if (!(y >= 0.0 && y <= static_cast<double>(reg_max))) {
      throw ShapeError("dfl_loss: target " + std::to_string(y) + " outside [0, " + std::to_string(reg_max) + "]");
    }
    const double* l = logits.data() + s * bins;
    side_softmax(l, bins, p.data());
    const double m = *std::max_element(l, l + bins);
    double z = 0;
    for (std::int64_t b = 0; b < bins; ++b) z += std::exp(l[b] - m);
    const double lse = m + std::log(z);
    const auto lo = static_cast<std::int64_t>(std::floor(y));
    const bool single = static_cast<double>(lo) == y || lo >= reg_max;
    const double wl = single ? 1.0 : static_cast<double>(lo + 1) - y;
    const double wr = single ? 0.0 : y - static_cast<double>(lo);
    double loss = -wl * (l[lo] - lse);
    if (!single) loss -= wr * (l[lo + 1] - lse);
    out.loss += loss / 4.0;
    double* g = out.grad.data() + s * bins;
    for (std::int64_t b = 0; b < bins; ++b) g[b] = (wl + wr) * p[static_cast<std::size_t>(b)] / 4.0;
    g[lo] -= wl / 4.0;
    if (!single) g[lo + 1] -= wr / 4.0;
  }
  return out;
}

const char* cls_loss_name(ClsLossKind k) { return k == ClsLossKind::BCE ? "bce" : "varifocal"; }

ClsLossKind parse_cls_loss(const std::string& s) {
  if (s == "bce") return ClsLossKind::BCE;
  if (s == "varifocal" || s == "vfl") return ClsLossKind::Varifocal;
  throw Error("unknown classification loss '" + s + "'");
}

ScalarLoss cls_loss(std::span<const double> logits, std::span<const double> targets, ClsLossKind kind,
                    const VarifocalParams& vfl) {
  if (logits.size() != targets.size()) throw ShapeError("cls_loss: logits and targets differ in size");
  ScalarLoss out;
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i], t = targets[i];
    if (!(t >= 0.0 && t <= 1.0)) throw ShapeError("cls_loss: target outside [0, 1]");
    const double p = sigmoid(x);
    const double bce = softplus(x) - x * t;
    if (kind == ClsLossKind::BCE || t > 0) {
      const double w = kind == ClsLossKind::BCE ? 1.0 : t;
      out.loss += w * bce;
      out.grad[i] = w * (p - t);
    } else {
      const double pg = std::pow(p, vfl.gamma);
      out.loss += vfl.alpha * pg * bce;
      out.grad[i] = vfl.alpha * pg * (vfl.gamma * (1.0 - p) * bce + p);
    }
  }
  return out;
}

std::vector<Assignment> assign_batch(const NdTensor<double>& cls_logits, const NdTensor<double>& reg_logits,
                                     const AnchorPoints& anchors, const std::vector<std::vector<GroundTruth>>& gts,
                                     const LossConfig& cfg) {
  const std::int64_t n = cls_logits.dim(0), a = cls_logits.dim(1), nc = cls_logits.dim(2);
  const std::int64_t nr = 4 * (cfg.reg_max + 1);
  if (static_cast<std::int64_t>(gts.size()) != n) throw ShapeError("assign_batch: one ground-truth list per image");
  std::vector<Assignment> out;
  for (std::int64_t b = 0; b < n; ++b) {
    NdTensor<double> reg({a, nr});
    std::copy_n(reg_logits.ptr() + b * a * nr, a * nr, reg.ptr());
    const std::vector<Box> pred = distances_to_boxes(dfl_decode(reg, cfg.reg_max), anchors);
    std::vector<double> scores(static_cast<std::size_t>(a * nc));
    for (std::int64_t i = 0; i < a * nc; ++i) scores[static_cast<std::size_t>(i)] = sigmoid(cls_logits[b * a * nc + i]);
    out.push_back(assign_targets(anchors, gts[static_cast<std::size_t>(b)], scores, nc, pred, cfg.tal));
  }
  return out;
}

DetectionLossResult detection_loss(const NdTensor<double>& cls_logits, const NdTensor<double>& reg_logits,
                                   const AnchorPoints& anchors, const std::vector<std::vector<GroundTruth>>& gts,
                                   const std::vector<Assignment>& assignments, const LossConfig& cfg,
                                   const WiouState& wiou, const std::vector<DetachedTerms>* frozen) {
  if (cls_logits.rank() != 3 || reg_logits.rank() != 3) throw ShapeError("detection_loss: expected [N, A, C] inputs");
  const std::int64_t n = cls_logits.dim(0), a = cls_logits.dim(1), nc = cls_logits.dim(2);
  const std::int64_t bins = cfg.reg_max + 1, nr = 4 * bins;
  if (reg_logits.dim(0) != n || reg_logits.dim(1) != a || reg_logits.dim(2) != nr) {
    throw ShapeError("detection_loss: regression logits " + shape_str(reg_logits.shape()) + " do not match");
  }
  if (static_cast<std::int64_t>(anchors.size()) != a) throw ShapeError("detection_loss: anchor count mismatch");
  if (static_cast<std::int64_t>(assignments.size()) != n || static_cast<std::int64_t>(gts.size()) != n) {
    throw ShapeError("detection_loss: one assignment and ground-truth list per image");
  }
  DetectionLossResult r;
  r.grad_cls = NdTensor<double>(cls_logits.shape());
  r.grad_reg = NdTensor<double>(reg_logits.shape());
  std::int64_t npos = 0;
  for (const auto& as : assignments) npos += as.num_pos;
  if (frozen && static_cast<std::int64_t>(frozen->size()) != npos) {
    throw ShapeError("detection_loss: frozen terms do not match the positive count");
  }
  const double denom = static_cast<double>(std::max<std::int64_t>(npos, 1));
  r.parts.num_pos = npos;

  // Classification over every anchor and class.
  std::vector<double> targets(static_cast<std::size_t>(n * a * nc), 0.0);
  for (std::int64_t b = 0; b < n; ++b) {
    const Assignment& as = assignments[static_cast<std::size_t>(b)];
    for (std::int64_t i = 0; i < a; ++i) {
      const int g = as.gt[static_cast<std::size_t>(i)];
      if (g < 0) continue;
      const int c = gts[static_cast<std::size_t>(b)][static_cast<std::size_t>(g)].class_id;
      targets[static_cast<std::size_t>((b * a + i) * nc + c)] = as.score[static_cast<std::size_t>(i)];
    }
  }
  const ScalarLoss cl = cls_loss(cls_logits.data(), targets, cfg.cls, cfg.varifocal);
  const double kc = cfg.weights.cls / denom;
  r.parts.cls = kc * cl.loss;
  for (std::size_t i = 0; i < cl.grad.size(); ++i) r.grad_cls[static_cast<std::int64_t>(i)] = kc * cl.grad[i];

  // Regression over positives.
  const double kb = cfg.weights.box / denom, kd = cfg.weights.dfl / denom;
  double box_sum = 0, dfl_sum = 0, liou_sum = 0;
  std::vector<double> p(static_cast<std::size_t>(4 * bins));
  std::size_t k = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    const Assignment& as = assignments[static_cast<std::size_t>(b)];
    for (std::int64_t i = 0; i < a; ++i) {
      const int g = as.gt[static_cast<std::size_t>(i)];
      if (g < 0) continue;
      const auto ai = static_cast<std::size_t>(i);
      const double s = anchors.stride[ai];
      const double ax = anchors.cx[ai] / s, ay = anchors.cy[ai] / s;
      const Box& gb = gts[static_cast<std::size_t>(b)][static_cast<std::size_t>(g)].box;
      const Box target{gb.x1 / s, gb.y1 / s, gb.x2 / s, gb.y2 / s};
      const double* l = reg_logits.ptr() + (b * a + i) * nr;
      double* gl = r.grad_reg.ptr() + (b * a + i) * nr;
      std::array<double, 4> dist{};
      for (int side = 0; side < 4; ++side) dist[side] = side_softmax(l + side * bins, bins, p.data() + side * bins);
      const Box pred{ax - dist[0], ay - dist[1], ax + dist[2], ay + dist[3]};
      const BoxLossResult bl = box_loss(pred, target, cfg.reg, wiou, frozen ? &(*frozen)[k] : nullptr);
      r.detached.push_back(bl.detached);
      box_sum += bl.loss;
      liou_sum += bl.liou;
      const std::array<double, 4> gd{-bl.grad[0], -bl.grad[1], bl.grad[2], bl.grad[3]};
      for (int side = 0; side < 4; ++side)
        for (std::int64_t j = 0; j < bins; ++j) {
          const double pj = p[static_cast<std::size_t>(side * bins + j)];
          gl[side * bins + j] += kb * gd[side] * pj * (static_cast<double>(j) - dist[side]);
        }
      const double hi = static_cast<double>(cfg.reg_max) - 0.01;
      const std::array<double, 4> ltrb{std::clamp(ax - target.x1, 0.0, hi), std::clamp(ay - target.y1, 0.0, hi),
                                       std::clamp(target.x2 - ax, 0.0, hi), std::clamp(target.y2 - ay, 0.0, hi)};
      const ScalarLoss dl = dfl_loss(std::span<const double>(l, static_cast<std::size_t>(nr)), ltrb, cfg.reg_max);
      dfl_sum += dl.loss;
      for (std::int64_t j = 0; j < nr; ++j) gl[j] += kd * dl.grad[static_cast<std::size_t>(j)];
      ++k;
    }
  }
  r.parts.box = kb * box_sum;
  r.parts.dfl = kd * dfl_sum;
  r.parts.total = r.parts.box + r.parts.cls + r.parts.dfl;
  r.mean_liou = npos > 0 ? liou_sum / static_cast<double>(npos) : 0.0;
  return r;
}

template <typename T>
Var<T> detection_loss_node(Var<T> cls_logits, Var<T> reg_logits, const AnchorPoints& anchors,
                           const std::vector<std::vector<GroundTruth>>& gts, const std::vector<Assignment>& assignments,
                           const LossConfig& cfg, WiouState* wiou, LossBreakdown* parts) {
  auto res = std::make_shared<DetectionLossResult>(detection_loss(cls_logits.value().template cast<double>(),
                                                                  reg_logits.value().template cast<double>(), anchors,
                                                                  gts, assignments, cfg, wiou ? *wiou : WiouState{}));
  if (parts) *parts = res->parts;
  const auto check = [&](double v, const char* what) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("detection loss: non-finite ") + what + " component");
  };
  check(res->parts.box, "box");
  check(res->parts.cls, "cls");
  check(res->parts.dfl, "dfl");
  if (cfg.reg == IouVariant::WIoU && wiou && res->parts.num_pos > 0) wiou->update(res->mean_liou);
  Graph<T>& g = cls_logits.graph();
  const std::size_t cid = cls_logits.id(), rid = reg_logits.id();
  return g.record("detection_loss", NdTensor<T>({1}, static_cast<T>(res->parts.total)), {cid, rid},
                  [res, cid, rid](Graph<T>& gr, std::size_t self) {
                    const double gy = static_cast<double>(gr.grad(self)[0]);
                    if (gr.requires_grad(cid)) {
                      NdTensor<T>& gc = gr.grad(cid);
                      for (std::int64_t i = 0; i < gc.numel(); ++i) gc[i] += static_cast<T>(gy * res->grad_cls[i]);
                    }
                    if (gr.requires_grad(rid)) {
                      NdTensor<T>& gg = gr.grad(rid);
                      for (std::int64_t i = 0; i < gg.numel(); ++i) gg[i] += static_cast<T>(gy * res->grad_reg[i]);
                    }
                  });
}

template Var<float> detection_loss_node(Var<float>, Var<float>, const AnchorPoints&,
                                        const std::vector<std::vector<GroundTruth>>&, const std::vector<Assignment>&,
                                        const LossConfig&, WiouState*, LossBreakdown*);
template Var<double> detection_loss_node(Var<double>, Var<double>, const AnchorPoints&,
                                         const std::vector<std::vector<GroundTruth>>&, const std::vector<Assignment>&,
                                         const LossConfig&, WiouState*, LossBreakdown*);

}  // namespace bgf
