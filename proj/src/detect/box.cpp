#include "bgf/box.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bgf {

namespace {

// Forward-mode dual number carrying d/d(x1, y1, x2, y2) of the first box.
struct Dual {
  double v = 0;
  std::array<double, 4> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
  static Dual seed(double value, int i) {
    Dual r(value);
    r.d[static_cast<std::size_t>(i)] = 1.0;
    return r;
  }
};

Dual scaled(const Dual& a, double dv, double value) {
  Dual r(value);
  for (int i = 0; i < 4; ++i) r.d[i] = dv * a.d[i];
  return r;
}

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator-(const Dual& a) { return scaled(a, -1.0, -a.v); }
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  const double inv2 = 1.0 / (b.v * b.v);
  for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv2;
  return r;
}

double val(double x) { return x; }
double val(const Dual& x) { return x.v; }

double d_exp(double x) { return std::exp(x); }
Dual d_exp(const Dual& x) {
  const double e = std::exp(x.v);
  return scaled(x, e, e);
}
double d_sqrt(double x) { return std::sqrt(x); }
Dual d_sqrt(const Dual& x) {
  const double s = std::sqrt(x.v);
  return scaled(x, s > 0 ? 0.5 / s : 0.0, s);
}
double d_abs(double x) { return std::abs(x); }
Dual d_abs(const Dual& x) { return scaled(x, x.v > 0 ? 1.0 : x.v < 0 ? -1.0 : 0.0, std::abs(x.v)); }
double d_asin(double x) { return std::asin(x); }
Dual d_asin(const Dual& x) { return scaled(x, 1.0 / std::sqrt(1.0 - x.v * x.v), std::asin(x.v)); }
double d_cos(double x) { return std::cos(x); }
Dual d_cos(const Dual& x) { return scaled(x, -std::sin(x.v), std::cos(x.v)); }

// atan(w / h), pi/2 when h == 0.
double aspect_angle(double w, double h) { return h > 0 ? std::atan(w / h) : std::numbers::pi / 2; }
Dual aspect_angle(const Dual& w, const Dual& h) {
  Dual r(aspect_angle(w.v, h.v));
  const double n = w.v * w.v + h.v * h.v;
  if (n > 0)
    for (int i = 0; i < 4; ++i) r.d[i] = (h.v * w.d[i] - w.v * h.d[i]) / n;
  return r;
}

template <typename S>
S smax(const S& a, const S& b) {
  return val(a) >= val(b) ? a : b;
}
template <typename S>
S smin(const S& a, const S& b) {
  return val(a) <= val(b) ? a : b;
}

template <typename S>
struct Terms {
  S iou, giou, diou, ciou, eiou, siou, wiou;
  DetachedTerms detached;
};

template <typename S>
Terms<S> evaluate(const S& ax1, const S& ay1, const S& ax2, const S& ay2, const Box& b, const WiouState& st,
                  const DetachedTerms* frozen = nullptr) {
  constexpr double eps = kIouEps;
  constexpr double pi = std::numbers::pi;
  const S bx1(b.x1), by1(b.y1), bx2(b.x2), by2(b.y2);
  const S wa = ax2 - ax1, ha = ay2 - ay1;
  const S wb = bx2 - bx1, hb = by2 - by1;
  const S iw = smax(smin(ax2, bx2) - smax(ax1, bx1), S(0.0));
  const S ih = smax(smin(ay2, by2) - smax(ay1, by1), S(0.0));
  const S inter = iw * ih;
  const S uni = wa * ha + wb * hb - inter;
  Terms<S> t;
  t.iou = inter / uni;

  const S cw = smax(ax2, bx2) - smin(ax1, bx1);
  const S ch = smax(ay2, by2) - smin(ay1, by1);
  const S carea = cw * ch;
  t.giou = t.iou - smax(carea - uni, S(0)) / carea;

  const S c2 = cw * cw + ch * ch;
  const S dx = (bx1 + bx2 - ax1 - ax2) * S(0.5);
  const S dy = (by1 + by2 - ay1 - ay2) * S(0.5);
  const S rho2 = dx * dx + dy * dy;
  t.diou = t.iou - rho2 / c2;

  const S da = aspect_angle(wb, hb) - aspect_angle(wa, ha);
  const S v = S(4.0 / (pi * pi)) * da * da;
  const double alpha = frozen ? frozen->ciou_alpha : val(v) / ((1.0 - val(t.iou)) + val(v) + eps);
  t.ciou = t.diou - S(alpha) * v;

  t.eiou = t.diou - (wa - wb) * (wa - wb) / (cw * cw + S(eps)) - (ha - hb) * (ha - hb) / (ch * ch + S(eps));

  const S sigma = d_sqrt(dx * dx + dy * dy) + S(eps);
  const S sin_x = d_abs(dx) / sigma, sin_y = d_abs(dy) / sigma;
  const S sin_alpha = val(sin_x) > std::sqrt(0.5) ? sin_y : sin_x;
  const S angle = d_cos(S(2.0) * d_asin(sin_alpha) - S(pi / 2));
  const S gamma = S(2.0) - angle;
  const S rx = (dx / (cw + S(eps))) * (dx / (cw + S(eps)));
  const S ry = (dy / (ch + S(eps))) * (dy / (ch + S(eps)));
  const S distance = (S(1.0) - d_exp(-(gamma * rx))) + (S(1.0) - d_exp(-(gamma * ry)));
  const S ow = d_abs(wa - wb) / smax(wa, wb);
  const S oh = d_abs(ha - hb) / smax(ha, hb);
  const S sw = S(1.0) - d_exp(-ow), sh = S(1.0) - d_exp(-oh);
  const S shape = sw * sw * sw * sw + sh * sh * sh * sh;
  t.siou = t.iou - S(0.5) * (distance + shape);

  const S liou = S(1.0) - t.iou;
  const double beta = val(liou) / st.mean;
  const double c2_frozen = frozen ? frozen->wiou_c2 : val(cw) * val(cw) + val(ch) * val(ch) + eps;
  const double r = frozen ? frozen->wiou_r : beta / (st.delta * std::pow(st.alpha, beta - st.delta));
  t.wiou = S(r) * d_exp(rho2 / S(c2_frozen)) * liou;
  t.detached = {alpha, c2_frozen, r};
  return t;
}

template <typename S>
S pick_loss(const Terms<S>& t, IouVariant v) {
  switch (v) {
    case IouVariant::IoU: return S(1.0) - t.iou;
    case IouVariant::GIoU: return S(1.0) - t.giou;
    case IouVariant::DIoU: return S(1.0) - t.diou;
    case IouVariant::CIoU: return S(1.0) - t.ciou;
    case IouVariant::EIoU: return S(1.0) - t.eiou;
    case IouVariant::SIoU: return S(1.0) - t.siou;
    case IouVariant::WIoU: return t.wiou;
  }
  return S(0.0);
}

}  // namespace

Box Box::checked(double x1, double y1, double x2, double y2) {
  Box b{x1, y1, x2, y2};
  if (!b.valid()) {
    throw ShapeError("degenerate box (" + std::to_string(x1) + ", " + std::to_string(y1) + ", " + std::to_string(x2) +
                     ", " + std::to_string(y2) + ")");
  }
  return b;
}

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x2 > x1 && y2 > y1;
}

double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

const char* iou_variant_name(IouVariant v) {
  switch (v) {
    case IouVariant::IoU: return "iou";
    case IouVariant::GIoU: return "giou";
    case IouVariant::DIoU: return "diou";
    case IouVariant::CIoU: return "ciou";
    case IouVariant::EIoU: return "eiou";
    case IouVariant::SIoU: return "siou";
    case IouVariant::WIoU: return "wiou";
  }
  return "?";
}

IouVariant parse_iou_variant(const std::string& s) {
  for (auto v : {IouVariant::IoU, IouVariant::GIoU, IouVariant::DIoU, IouVariant::CIoU, IouVariant::EIoU,
                 IouVariant::SIoU, IouVariant::WIoU}) {
    if (s == iou_variant_name(v)) return v;
  }
  throw Error("unknown regression loss '" + s + "'");
}

IouMetrics iou_metrics(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw ShapeError("iou_metrics: degenerate box");
  const Terms<double> t = evaluate(a.x1, a.y1, a.x2, a.y2, b, WiouState{});
  return {t.iou, t.giou, t.diou, t.ciou, t.eiou, t.siou};
}

BoxLossResult box_loss(const Box& pred, const Box& target, IouVariant variant, const WiouState& wiou,
                       const DetachedTerms* frozen) {
  if (!target.valid()) throw ShapeError("box loss: degenerate target box");
  if (!(pred.x2 >= pred.x1 && pred.y2 >= pred.y1)) throw ShapeError("box loss: inverted predicted box");
  const Terms<Dual> t = evaluate(Dual::seed(pred.x1, 0), Dual::seed(pred.y1, 1), Dual::seed(pred.x2, 2),
                                 Dual::seed(pred.y2, 3), target, wiou, frozen);
  const Dual l = pick_loss(t, variant);
  BoxLossResult r;
  r.loss = l.v;
  r.grad = l.d;
  r.liou = 1.0 - t.iou.v;
  r.detached = t.detached;
  if (!std::isfinite(r.loss) || !std::all_of(r.grad.begin(), r.grad.end(), [](double g) { return std::isfinite(g); })) {
    throw NonFiniteError(std::string("box loss ") + iou_variant_name(variant) + " produced a non-finite value");
  }
  return r;
}

BoxLossResult iou_loss(const Box& pred, const Box& target, IouVariant variant, WiouState* state) {
  if (variant == IouVariant::WIoU && state == nullptr) throw Error("iou_loss: WIoU v3 requires a focusing state");
  BoxLossResult r = box_loss(pred, target, variant, state ? *state : WiouState{});
  if (variant == IouVariant::WIoU) state->update(r.liou);
  return r;
}

}  // namespace bgf
