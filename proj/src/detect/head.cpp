#include "bgf/head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bgf {

AnchorPoints make_anchor_points(std::int64_t input_size, const std::vector<std::int64_t>& strides) {
  if (strides.empty()) throw ShapeError("anchor points: no strides");
  AnchorPoints a;
  a.input_size = input_size;
  a.strides = strides;
  for (std::size_t i = 0; i < strides.size(); ++i) {
    const std::int64_t s = strides[i];
    if (s <= 0 || input_size % s != 0) {
      throw ShapeError("anchor points: stride " + std::to_string(s) + " does not divide input size " +
                       std::to_string(input_size));
    }
    if (i > 0 && s <= strides[i - 1]) throw ShapeError("anchor points: strides must be strictly increasing");
    const std::int64_t g = input_size / s;
    a.grids.push_back(g);
    for (std::int64_t y = 0; y < g; ++y)
      for (std::int64_t x = 0; x < g; ++x) {
        a.cx.push_back((static_cast<double>(x) + 0.5) * static_cast<double>(s));
        a.cy.push_back((static_cast<double>(y) + 0.5) * static_cast<double>(s));
        a.stride.push_back(static_cast<double>(s));
      }
  }
  return a;
}

template <typename T>
DetectHead<T>::DetectHead(const std::string& name, const std::vector<std::int64_t>& in_channels, const HeadConfig& cfg,
                          std::int64_t input_size, std::mt19937_64& rng)
    : cfg_(cfg) {
  if (in_channels.size() != cfg.strides.size()) {
    throw ShapeError("detect head: " + std::to_string(in_channels.size()) + " feature maps for " +
                     std::to_string(cfg.strides.size()) + " strides");
  }
  if (cfg.reg_max < 1) throw ShapeError("detect head: reg_max must be >= 1");
  if (cfg.num_classes < 1) throw ShapeError("detect head: need at least one class");
  for (std::size_t i = 1; i < cfg.strides.size(); ++i) {
    if (cfg.strides[i] <= cfg.strides[i - 1]) throw ShapeError("detect head: strides must be strictly increasing");
  }
  const std::int64_t c0 = in_channels.front();
  const std::int64_t cw = cfg.cls_width > 0 ? cfg.cls_width : std::max(c0, std::min<std::int64_t>(cfg.num_classes, 100));
  const std::int64_t rw = cfg.reg_width > 0 ? cfg.reg_width : std::max({std::int64_t{16}, c0 / 4, 4 * cfg.reg_max});
  const std::int64_t nreg = 4 * cfg.bins();
  for (std::size_t i = 0; i < in_channels.size(); ++i) {
    const std::string p = name + "." + std::to_string(i);
    const std::int64_t c = in_channels[i];
    const double cells = static_cast<double>(input_size) / static_cast<double>(cfg.strides[i]);
    Branch cb;
    cb.a = std::make_unique<ConvBlock<T>>(p + ".cls.0", c, cw, 3, 1, rng);
    cb.b = std::make_unique<ConvBlock<T>>(p + ".cls.1", cw, cw, 3, 1, rng);
    cb.w = Parameter<T>(p + ".cls.2.weight", fan_in_uniform<T>({cfg.num_classes, cw, 1, 1}, cw, rng));
    cb.bias = Parameter<T>(p + ".cls.2.bias",
                           NdTensor<T>::full({cfg.num_classes},
                                             static_cast<T>(std::log(5.0 / static_cast<double>(cfg.num_classes) /
                                                                     (cells * cells)))));
    cls_.push_back(std::move(cb));
    Branch rb;
    rb.a = std::make_unique<ConvBlock<T>>(p + ".reg.0", c, rw, 3, 1, rng);
    rb.b = std::make_unique<ConvBlock<T>>(p + ".reg.1", rw, rw, 3, 1, rng);
    rb.w = Parameter<T>(p + ".reg.2.weight", fan_in_uniform<T>({nreg, rw, 1, 1}, rw, rng));
    rb.bias = Parameter<T>(p + ".reg.2.bias", NdTensor<T>::full({nreg}, T(1)));
    reg_.push_back(std::move(rb));
  }
}

template <typename T>
Var<T> DetectHead<T>::run(Branch& br, Var<T> x) {
  Graph<T>& g = x.graph();
  Var<T> y = br.b->forward(br.a->forward(x));
  y = ops::conv2d<T>(y, g.parameter(br.w), g.parameter(br.bias), 1, 0);
  const std::int64_t n = y.dim(0), c = y.dim(1), hw = y.dim(2) * y.dim(3);
  return ops::reshape(ops::permute(y, {0, 2, 3, 1}), {n, hw, c});
}

template <typename T>
HeadOutput<T> DetectHead<T>::forward(const std::vector<Var<T>>& features) {
  if (features.size() != cls_.size()) {
    throw ShapeError("detect head: expected " + std::to_string(cls_.size()) + " feature maps, got " +
                     std::to_string(features.size()));
  }
  std::vector<Var<T>> cs, rs;
  for (std::size_t i = 0; i < features.size(); ++i) {
    cs.push_back(run(cls_[i], features[i]));
    rs.push_back(run(reg_[i], features[i]));
  }
  if (cs.size() == 1) return {cs[0], rs[0]};
  return {ops::concat(cs, 1), ops::concat(rs, 1)};
}

template <typename T>
void DetectHead<T>::visit(const TensorVisitor<T>& v) {
  for (std::size_t i = 0; i < cls_.size(); ++i) {
    for (Branch* br : {&cls_[i], &reg_[i]}) {
      br->a->visit(v);
      br->b->visit(v);
      if (v.on_parameter) {
        v.on_parameter(br->w);
        v.on_parameter(br->bias);
      }
    }
  }
}

template <typename T>
NdTensor<T> dfl_decode(const NdTensor<T>& logits, std::int64_t reg_max) {
  const std::int64_t bins = reg_max + 1;
  if (logits.numel() % (4 * bins) != 0 || logits.rank() < 2) {
    throw ShapeError("dfl_decode: logits " + shape_str(logits.shape()) + " are not [A, 4 * " + std::to_string(bins) +
                     "]");
  }
  const std::int64_t a = logits.numel() / (4 * bins);
  NdTensor<T> out({a, 4});
  const T* src = logits.ptr();
  for (std::int64_t i = 0; i < 4 * a; ++i) {
    const T* l = src + i * bins;
    const T m = *std::max_element(l, l + bins);
    double z = 0, e = 0;
    for (std::int64_t b = 0; b < bins; ++b) {
      const double p = std::exp(static_cast<double>(l[b] - m));
      z += p;
      e += p * static_cast<double>(b);
    }
    out[i] = static_cast<T>(std::clamp(e / z, 0.0, static_cast<double>(reg_max)));
  }
  return out;
}

std::vector<Box> distances_to_boxes(const NdTensor<double>& dist, const AnchorPoints& anchors) {
  const auto a = static_cast<std::int64_t>(anchors.size());
  if (dist.numel() != 4 * a) throw ShapeError("distances_to_boxes: expected [" + std::to_string(a) + ", 4]");
  std::vector<Box> boxes(anchors.size());
  for (std::int64_t i = 0; i < a; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double s = anchors.stride[k];
    boxes[k] = {anchors.cx[k] - dist[4 * i] * s, anchors.cy[k] - dist[4 * i + 1] * s, anchors.cx[k] + dist[4 * i + 2] * s,
                anchors.cy[k] + dist[4 * i + 3] * s};
  }
  return boxes;
}

std::vector<Detection> decode_boxes(const NdTensor<double>& cls, const NdTensor<double>& reg,
                                    const AnchorPoints& anchors, std::int64_t reg_max, double conf, int image_id) {
  const auto a = static_cast<std::int64_t>(anchors.size());
  if (cls.rank() != 2 || cls.dim(0) != a) throw ShapeError("decode_boxes: class logits " + shape_str(cls.shape()));
  if (reg.numel() != a * 4 * (reg_max + 1)) throw ShapeError("decode_boxes: regression logits " + shape_str(reg.shape()));
  const std::int64_t nc = cls.dim(1);
  const std::vector<Box> boxes = distances_to_boxes(dfl_decode(reg, reg_max), anchors);
  const double lim = static_cast<double>(anchors.input_size);
  std::vector<Detection> out;
  for (std::int64_t i = 0; i < a; ++i) {
    const double* row = cls.ptr() + i * nc;
    const auto best = static_cast<std::int64_t>(std::max_element(row, row + nc) - row);
    const double logit = row[best];
    const double score = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
    if (score < conf || score <= 0) continue;
    Box b = boxes[static_cast<std::size_t>(i)];
    b.x1 = std::clamp(b.x1, 0.0, lim);
    b.y1 = std::clamp(b.y1, 0.0, lim);
    b.x2 = std::clamp(b.x2, 0.0, lim);
    b.y2 = std::clamp(b.y2, 0.0, lim);
    if (!b.valid()) continue;
    out.push_back({b, score, static_cast<int>(best), image_id});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& x, const Detection& y) { return x.score > y.score; });
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> dead(dets.size(), false);
  std::vector<Detection> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t a = order[i];
    if (dead[a]) continue;
    keep.push_back(dets[a]);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t b = order[j];
      if (!dead[b] && dets[b].class_id == dets[a].class_id && box_iou(dets[a].box, dets[b].box) > iou_thresh) {
        dead[b] = true;
      }
    }
  }
  return keep;
}

Assignment assign_targets(const AnchorPoints& anchors, const std::vector<GroundTruth>& gts,
                          std::span<const double> scores, std::int64_t num_classes, const std::vector<Box>& pred,
                          const TalConfig& cfg) {
  const std::size_t na = anchors.size();
  if (pred.size() != na || scores.size() != na * static_cast<std::size_t>(num_classes)) {
    throw ShapeError("assign_targets: predictions do not match the anchor count");
  }
  Assignment out;
  out.gt.assign(na, -1);
  out.score.assign(na, 0.0);
  out.iou.assign(na, 0.0);
  if (gts.empty()) return out;

  struct Claim {
    int gt;
    double iou, metric;
  };
  std::vector<std::vector<Claim>> claims(na);
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const Box& gb = gts[g].box;
    const int cls = gts[g].class_id;
    if (cls < 0 || cls >= num_classes) throw ShapeError("assign_targets: class id out of range");
    std::vector<std::pair<double, std::size_t>> cand;
    std::vector<double> ious;
    for (std::size_t a = 0; a < na; ++a) {
      if (!(anchors.cx[a] > gb.x1 && anchors.cx[a] < gb.x2 && anchors.cy[a] > gb.y1 && anchors.cy[a] < gb.y2)) continue;
      const double iou = box_iou(pred[a], gb);
      const double s = scores[a * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(cls)];
      cand.push_back({std::pow(s, cfg.alpha) * std::pow(iou, cfg.beta), a});
      ious.push_back(iou);
    }
    std::vector<std::size_t> idx(cand.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return cand[x].first > cand[y].first; });
    const std::size_t k = std::min(idx.size(), static_cast<std::size_t>(std::max<std::int64_t>(cfg.topk, 0)));
    for (std::size_t j = 0; j < k; ++j) {
      const auto& c = cand[idx[j]];
      claims[c.second].push_back({static_cast<int>(g), ious[idx[j]], c.first});
    }
  }
  std::vector<double> metric(na, 0.0);
  for (std::size_t a = 0; a < na; ++a) {
    if (claims[a].empty()) continue;
    const Claim* best = &claims[a][0];
    for (const auto& c : claims[a])
      if (c.iou > best->iou || (c.iou == best->iou && c.gt < best->gt)) best = &c;
    out.gt[a] = best->gt;
    out.iou[a] = best->iou;
    metric[a] = best->metric;
    ++out.num_pos;
  }
  std::vector<double> max_metric(gts.size(), 0.0), max_iou(gts.size(), 0.0);
  for (std::size_t a = 0; a < na; ++a) {
    if (out.gt[a] < 0) continue;
    const auto g = static_cast<std::size_t>(out.gt[a]);
    max_metric[g] = std::max(max_metric[g], metric[a]);
    max_iou[g] = std::max(max_iou[g], out.iou[a]);
  }
  for (std::size_t a = 0; a < na; ++a) {
    if (out.gt[a] < 0) continue;
    const auto g = static_cast<std::size_t>(out.gt[a]);
    out.score[a] = metric[a] / (max_metric[g] + 1e-9) * max_iou[g];
  }
  return out;
}

#define BGF_INSTANTIATE(T)   \
  template class DetectHead<T>; \
  template NdTensor<T> dfl_decode(const NdTensor<T>&, std::int64_t);
BGF_INSTANTIATE(float)
BGF_INSTANTIATE(double)
#undef BGF_INSTANTIATE

}  // namespace bgf
