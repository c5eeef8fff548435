#include "bgf/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <sstream>

#include "bgf/attention.hpp"
#include "bgf/blocks.hpp"
#include "bgf/box.hpp"
#include "bgf/gradcheck.hpp"
#include "bgf/head.hpp"
#include "bgf/losses.hpp"
#include "bgf/neck.hpp"
#include "bgf/ops.hpp"

namespace bgf {

namespace {

using D = double;
using Tensor = NdTensor<D>;
using CaseFn = std::function<GradCheckReport(std::uint64_t seed)>;

struct CaseDef {
  const char* suite;
  const char* name;
  double tol;
  CaseFn run;
};

constexpr double kLossTol = 1e-4;
constexpr double kCompositeTol = 1e-3;

Tensor randn(Shape s, std::mt19937_64& rng, double sd = 1.0) { return Tensor::normal(std::move(s), rng, 0.0, sd); }

// Random linear functional of y, so every output element carries gradient.
Var<D> project(Var<D> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
  Graph<D>& g = y.graph();
  return ops::sum(ops::mul(y, g.constant(randn(y.shape(), rng))));
}

GradCheckReport check_op(std::uint64_t seed, std::vector<Tensor> inputs,
                         const std::function<Var<D>(std::span<const Var<D>>)>& op) {
  return grad_check([&](Graph<D>&, std::span<const Var<D>> xs) { return project(op(xs), seed); }, std::move(inputs));
}

GradCheckReport check_layer(std::uint64_t seed, Layer<D>& layer, Tensor x, bool training = true) {
  std::vector<Parameter<D>*> params;
  layer.visit({[&params](Parameter<D>& p) { params.push_back(&p); }, nullptr});
  return grad_check([&](Graph<D>&, std::span<const Var<D>> xs) { return project(layer.forward(xs[0]), seed); },
                    {std::move(x)}, params, {}, training);
}

// Central differences of a scalar function with an analytic gradient.
GradCheckReport check_scalar(const std::function<ScalarLoss(const std::vector<double>&)>& f, std::vector<double> x,
                             const std::string& label, double eps = 1e-6, double floor = 1e-3) {
  const ScalarLoss base = f(x);
  GradCheckReport r;
  r.worst_tensor = label;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x).loss;
    x[i] = keep - eps;
    const double dn = f(x).loss;
    x[i] = keep;
    const double num = (up - dn) / (2 * eps);
    const double a = base.grad.at(i);
    const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
    ++r.coords_checked;
    if (err >= r.max_rel_err) {
      r.max_rel_err = err;
      r.worst_index = static_cast<std::int64_t>(i);
      r.worst_analytic = a;
      r.worst_numeric = num;
    }
  }
  return r;
}

Box random_box(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> pos(lo, hi), ext(1.0, (hi - lo) / 2);
  const double x = pos(rng), y = pos(rng);
  return {x, y, x + ext(rng), y + ext(rng)};
}

std::vector<CaseDef> op_cases() {
  std::vector<CaseDef> c;
  c.push_back({"ops", "conv2d", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 const std::int64_t stride = 1 + static_cast<std::int64_t>(s % 2);
                 return check_op(s, {randn({2, 4, 6, 6}, r), randn({6, 4, 3, 3}, r), randn({6}, r)},
                                 [stride](auto xs) { return ops::conv2d<D>(xs[0], xs[1], xs[2], stride, 1); });
               }});
  c.push_back({"ops", "conv2d_grouped", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({1, 4, 5, 5}, r), randn({4, 2, 3, 3}, r)},
                                 [](auto xs) { return ops::conv2d<D>(xs[0], xs[1], std::nullopt, 1, 1, 2); });
               }});
  c.push_back({"ops", "conv2d_depthwise", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 3, 5, 5}, r), randn({3, 1, 3, 3}, r), randn({3}, r)},
                                 [](auto xs) { return ops::conv2d<D>(xs[0], xs[1], xs[2], 1, 1, 3); });
               }});
  c.push_back({"ops", "conv2d_1d", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 1, 1, 9}, r), randn({1, 1, 1, 3}, r)}, [](auto xs) {
                   return ops::conv2d<D>(xs[0], xs[1], std::nullopt, ops::Conv2dOptions{1, 1, 0, 1, 1});
                 });
               }});
  c.push_back({"ops", "upsample_nearest2x", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 3, 3, 4}, r)}, [](auto xs) { return ops::upsample_nearest2x(xs[0]); });
               }});
  c.push_back({"ops", "max_pool2d", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 2, 6, 6}, r)}, [](auto xs) { return ops::max_pool2d(xs[0], 5, 1, 2); });
               }});
  c.push_back({"ops", "softmax", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 const auto axis = static_cast<std::int64_t>(s % 3);
                 return check_op(s, {randn({3, 4, 5}, r)}, [axis](auto xs) { return ops::softmax(xs[0], axis); });
               }});
  c.push_back({"ops", "matmul", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({4, 3}, r), randn({3, 5}, r)},
                                 [](auto xs) { return ops::matmul(xs[0], xs[1]); });
               }});
  c.push_back({"ops", "matmul_batched", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({3, 4, 2}, r), randn({3, 2, 5}, r)},
                                 [](auto xs) { return ops::matmul(xs[0], xs[1]); });
               }});
  c.push_back({"ops", "linear", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 3, 4}, r), randn({4, 5}, r), randn({5}, r)},
                                 [](auto xs) { return ops::linear(xs[0], xs[1], xs[2]); });
               }});
  const std::pair<const char*, Var<D> (*)(Var<D>)> unary[] = {
      {"sigmoid", &ops::sigmoid<D>}, {"silu", &ops::silu<D>}, {"relu", &ops::relu<D>}, {"hardswish", &ops::hardswish<D>}};
  for (const auto& [name, fn] : unary) {
    c.push_back({"ops", name, kLossTol, [fn](std::uint64_t s) {
                   std::mt19937_64 r(s);
                   return check_op(s, {randn({2, 3, 4, 4}, r, 2.5)}, [fn](auto xs) { return fn(xs[0]); });
                 }});
  }
  const std::pair<const char*, Var<D> (*)(Var<D>, Var<D>)> binary[] = {
      {"add", &ops::add<D>}, {"sub", &ops::sub<D>}, {"mul", &ops::mul<D>}};
  for (const auto& [name, fn] : binary) {
    c.push_back({"ops", name, kLossTol, [fn](std::uint64_t s) {
                   std::mt19937_64 r(s);
                   // Broadcast over the last two axes on odd seeds.
                   const Shape sb = s % 2 ? Shape{2, 3, 1, 1} : Shape{2, 3, 4, 4};
                   return check_op(s, {randn({2, 3, 4, 4}, r), randn(sb, r)},
                                   [fn](auto xs) { return fn(xs[0], xs[1]); });
                 }});
  }
  c.push_back({"ops", "scale", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({3, 4}, r)}, [](auto xs) { return ops::scale(xs[0], 0.37); });
               }});
  c.push_back({"ops", "concat", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 2, 3, 3}, r), randn({2, 4, 3, 3}, r), randn({2, 1, 3, 3}, r)},
                                 [](auto xs) { return ops::concat<D>({xs[0], xs[1], xs[2]}, 1); });
               }});
  c.push_back({"ops", "split", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 6, 3, 3}, r)}, [](auto xs) {
                   auto parts = ops::split(xs[0], 1, {2, 4});
                   return ops::concat<D>({ops::scale(parts[0], 2.0), ops::mul(parts[1], parts[1])}, 1);
                 });
               }});
  c.push_back({"ops", "mean", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 const auto axis = static_cast<std::int64_t>(s % 4);
                 return check_op(s, {randn({2, 3, 4, 5}, r)}, [axis](auto xs) { return ops::mean(xs[0], axis); });
               }});
  c.push_back({"ops", "max_reduce", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 const auto axis = static_cast<std::int64_t>(s % 4);
                 return check_op(s, {randn({2, 3, 4, 5}, r)}, [axis](auto xs) { return ops::max_reduce(xs[0], axis); });
               }});
  c.push_back({"ops", "sum", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({3, 5}, r)}, [](auto xs) { return ops::mul(ops::sum(xs[0]), ops::sum(xs[0])); });
               }});
  c.push_back({"ops", "reshape_permute", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 3, 4, 2}, r)}, [](auto xs) {
                   Var<D> y = ops::permute(xs[0], {0, 2, 3, 1});
                   y = ops::reshape(y, {2, 8, 3});
                   return ops::mul(y, ops::transpose(ops::reshape(ops::transpose(y, 1, 2), {2, 3, 8}), 1, 2));
                 });
               }});
  c.push_back({"ops", "region_partition_merge", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({2, 3, 4, 6}, r)}, [](auto xs) {
                   Var<D> p = region_partition(xs[0], 2);
                   return region_merge(ops::mul(p, p), 2, 4, 6);
                 });
               }});
  c.push_back({"ops", "batchnorm2d", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 auto buf = std::make_shared<ops::BatchNormBuffers<D>>();
                 buf->running_mean = Tensor::zeros({3});
                 buf->running_var = Tensor::ones({3});
                 return check_op(s, {randn({3, 3, 4, 4}, r), randn({3}, r), randn({3}, r)}, [buf](auto xs) {
                   return ops::batchnorm2d(xs[0], xs[1], xs[2], *buf, ops::BatchNormOptions{});
                 });
               }});
  c.push_back({"ops", "gather_blocks", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 const std::int64_t n = 2, regions = 4, k = 2;
                 auto idx = std::make_shared<std::vector<std::int32_t>>();
                 for (std::int64_t i = 0; i < n * regions * k; ++i) {
                   idx->push_back(static_cast<std::int32_t>(r() % static_cast<std::uint64_t>(regions)));
                 }
                 return check_op(s, {randn({n, regions, 3, 5}, r)},
                                 [idx, k](auto xs) { return ops::gather_blocks<D>(xs[0], *idx, k); });
               }});
  return c;
}

std::vector<CaseDef> block_cases() {
  std::vector<CaseDef> c;
  c.push_back({"blocks", "cbs", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 ConvBlock<D> b("cbs", 3, 4, 3, 1 + static_cast<std::int64_t>(s % 2), r);
                 return check_layer(s, b, randn({2, 3, 6, 6}, r));
               }});
  c.push_back({"blocks", "cbs_eval", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 ConvBlock<D> b("cbs", 3, 4, 1, 1, r);
                 return check_layer(s, b, randn({2, 3, 4, 4}, r), false);
               }});
  c.push_back({"blocks", "bottleneck", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Bottleneck<D> b("bottleneck", 4, s % 2 == 0, r);
                 return check_layer(s, b, randn({2, 4, 4, 4}, r));
               }});
  c.push_back({"blocks", "c2f", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 C2f<D> b("c2f", 4, 4, 1 + static_cast<std::int64_t>(s % 2), s % 2 == 0, r);
                 return check_layer(s, b, randn({2, 4, 4, 4}, r));
               }});
  c.push_back({"blocks", "csp", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 CspBlock<D> b("csp", 6, 4, 1, r);
                 return check_layer(s, b, randn({2, 6, 4, 4}, r));
               }});
  c.push_back({"blocks", "sppf", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Sppf<D> b("sppf", 4, 4, r);
                 return check_layer(s, b, randn({2, 4, 5, 5}, r));
               }});
  c.push_back({"blocks", "fuse_weighted", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Tensor w = Tensor::uniform({3}, r, 0.2, 1.5);
                 return check_op(s, {randn({1, 2, 3, 3}, r), randn({1, 2, 3, 3}, r), randn({1, 2, 3, 3}, r), w},
                                 [](auto xs) { return fuse_weighted<D>({xs[0], xs[1], xs[2]}, xs[3]); });
               }});
  c.push_back({"blocks", "fuse_concat", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 return check_op(s, {randn({1, 2, 3, 3}, r), randn({1, 3, 3, 3}, r)},
                                 [](auto xs) { return fuse_concat<D>({xs[0], xs[1]}); });
               }});
  return c;
}

std::vector<CaseDef> attention_cases() {
  std::vector<CaseDef> c;
  c.push_back({"attention", "bra", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 BraConfig cfg;
                 cfg.channels = 8;
                 cfg.region_grid = 2;
                 cfg.topk = 1 + static_cast<std::int64_t>(s % 4);
                 cfg.heads = s % 2 ? 2 : 1;
                 BiLevelRoutingAttention<D> a("bra", cfg, r);
                 return check_layer(s, a, randn({1, 8, 4, 4}, r));
               }});
  c.push_back({"attention", "se", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 SqueezeExcitation<D> a("se", 8, 4, r);
                 return check_layer(s, a, randn({2, 8, 3, 3}, r));
               }});
  c.push_back({"attention", "eca", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 EfficientChannelAttention<D> a("eca", 8, 3, r);
                 return check_layer(s, a, randn({2, 8, 3, 3}, r));
               }});
  c.push_back({"attention", "cbam", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Cbam<D> a("cbam", 8, 4, 3, r);
                 return check_layer(s, a, randn({2, 8, 4, 4}, r));
               }});
  c.push_back({"attention", "ca", kCompositeTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 CoordinateAttention<D> a("ca", 8, 4, r);
                 return check_layer(s, a, randn({2, 8, 4, 3}, r));
               }});
  return c;
}

std::vector<CaseDef> loss_cases() {
  std::vector<CaseDef> c;
  const IouVariant variants[] = {IouVariant::IoU,  IouVariant::GIoU, IouVariant::DIoU, IouVariant::CIoU,
                                 IouVariant::EIoU, IouVariant::SIoU, IouVariant::WIoU};
  for (IouVariant v : variants) {
    c.push_back({"losses", iou_variant_name(v), kLossTol, [v](std::uint64_t s) {
                   std::mt19937_64 r(s);
                   const Box target = random_box(r, 0, 20);
                   // Mostly overlapping pairs; every fifth seed disjoint.
                   Box pred = random_box(r, 0, 20);
                   if (s % 5 == 4) pred = {pred.x1 + 40, pred.y1 + 3, pred.x2 + 40, pred.y2 + 3};
                   WiouState st;
                   st.mean = std::uniform_real_distribution<double>(0.2, 1.0)(r);
                   const DetachedTerms frozen = box_loss(pred, target, v, st).detached;
                   return check_scalar(
                       [&](const std::vector<double>& x) {
                         const BoxLossResult b = box_loss({x[0], x[1], x[2], x[3]}, target, v, st, &frozen);
                         return ScalarLoss{b.loss, {b.grad.begin(), b.grad.end()}};
                       },
                       {pred.x1, pred.y1, pred.x2, pred.y2}, "pred");
                 }});
  }
  c.push_back({"losses", "dfl", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 const std::int64_t reg_max = 8;
                 const Tensor logits = randn({4 * (reg_max + 1)}, r, 2.0);
                 std::array<double, 4> t{};
                 std::uniform_real_distribution<double> u(0.0, static_cast<double>(reg_max) - 0.01);
                 for (auto& v : t) v = u(r);
                 return check_scalar([&](const std::vector<double>& x) { return dfl_loss(x, t, reg_max); },
                                     {logits.data().begin(), logits.data().end()}, "logits");
               }});
  for (ClsLossKind k : {ClsLossKind::BCE, ClsLossKind::Varifocal}) {
    c.push_back({"losses", cls_loss_name(k), kLossTol, [k](std::uint64_t s) {
                   std::mt19937_64 r(s);
                   const Tensor logits = randn({24}, r, 2.0);
                   std::vector<double> targets(24, 0.0);
                   std::uniform_real_distribution<double> u(0.05, 1.0);
                   for (std::size_t i = 0; i < targets.size(); i += 3) targets[i] = u(r);
                   return check_scalar([&](const std::vector<double>& x) { return cls_loss(x, targets, k); },
                                       {logits.data().begin(), logits.data().end()}, "logits");
                 }});
  }
  c.push_back({"losses", "detection_loss", kLossTol, [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 LossConfig cfg;
                 const IouVariant regs[] = {IouVariant::GIoU, IouVariant::DIoU, IouVariant::CIoU,
                                            IouVariant::EIoU, IouVariant::SIoU, IouVariant::WIoU};
                 cfg.reg = regs[s % 6];
                 cfg.cls = s % 2 ? ClsLossKind::Varifocal : ClsLossKind::BCE;
                 cfg.reg_max = 4;
                 const AnchorPoints anchors = make_anchor_points(32, {8, 16});
                 const auto a = static_cast<std::int64_t>(anchors.size());
                 const std::int64_t nc = 2, nb = 4 * (cfg.reg_max + 1);
                 const Tensor cls = randn({2, a, nc}, r);
                 const Tensor reg = randn({2, a, nb}, r);
                 std::vector<std::vector<GroundTruth>> gts(2);
                 for (int img = 0; img < 2; ++img) {
                   for (int k = 0; k < 2; ++k) {
                     GroundTruth g;
                     g.box = random_box(r, 2, 16);
                     g.box.x2 += 6;
                     g.box.y2 += 6;
                     g.class_id = k;
                     g.image_id = img;
                     gts[static_cast<std::size_t>(img)].push_back(g);
                   }
                 }
                 const auto asg = assign_batch(cls, reg, anchors, gts, cfg);
                 WiouState st;
                 const DetectionLossResult base = detection_loss(cls, reg, anchors, gts, asg, cfg, st);
                 std::vector<double> x(cls.data().begin(), cls.data().end());
                 x.insert(x.end(), reg.data().begin(), reg.data().end());
                 return check_scalar(
                     [&](const std::vector<double>& v) {
                       Tensor c2({2, a, nc}, std::vector<double>(v.begin(), v.begin() + cls.numel()));
                       Tensor r2({2, a, nb}, std::vector<double>(v.begin() + cls.numel(), v.end()));
                       const DetectionLossResult d = detection_loss(c2, r2, anchors, gts, asg, cfg, st, &base.detached);
                       std::vector<double> g(d.grad_cls.data().begin(), d.grad_cls.data().end());
                       g.insert(g.end(), d.grad_reg.data().begin(), d.grad_reg.data().end());
                       return ScalarLoss{d.parts.total, g};
                     },
                     x, "cls|reg");
               }});
  return c;
}

std::vector<CaseDef> all_cases() {
  std::vector<CaseDef> c = op_cases();
  for (auto* f : {&block_cases, &attention_cases, &loss_cases}) {
    auto more = (*f)();
    c.insert(c.end(), more.begin(), more.end());
  }
  return c;
}

template <typename V>
bool selected(const V& list, const std::string& s) {
  return list.empty() || std::find(list.begin(), list.end(), s) != list.end();
}

}  // namespace

std::vector<std::string> grad_suite_names() { return {"ops", "blocks", "attention", "losses"}; }

std::vector<GradSuiteEntry> run_grad_suites(const GradSuiteOptions& opt) {
  for (const auto& s : opt.suites) {
    if (!selected(grad_suite_names(), s)) throw Error("unknown gradient suite '" + s + "'");
  }
  std::vector<GradSuiteEntry> out;
  for (const CaseDef& cd : all_cases()) {
    if (!selected(opt.suites, cd.suite) || !selected(opt.only, cd.name)) continue;
    GradSuiteEntry e;
    e.suite = cd.suite;
    e.name = cd.name;
    e.tolerance = cd.tol;
    for (std::size_t k = 0; k < opt.seeds; ++k) {
      const std::uint64_t seed = 1000 + k;
      const GradCheckReport r = cd.run(seed);
      ++e.seeds;
      if (r.max_rel_err >= e.worst_rel_err || e.worst_detail.empty()) {
        e.worst_rel_err = std::max(e.worst_rel_err, r.max_rel_err);
        char buf[200];
        std::snprintf(buf, sizeof buf, "seed %llu %s[%lld] analytic %.6e numeric %.6e",
                      static_cast<unsigned long long>(seed), r.worst_tensor.c_str(),
                      static_cast<long long>(r.worst_index), r.worst_analytic, r.worst_numeric);
        e.worst_detail = buf;
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string grad_suite_table(std::vector<GradSuiteEntry> entries) {
  std::stable_sort(entries.begin(), entries.end(), [](const GradSuiteEntry& a, const GradSuiteEntry& b) {
    return a.worst_rel_err / a.tolerance > b.worst_rel_err / b.tolerance;
  });
  std::ostringstream os;
  char line[320];
  std::snprintf(line, sizeof line, "%-10s %-20s %6s %12s %10s %-5s %s\n", "suite", "case", "seeds", "max_rel_err",
                "tolerance", "ok", "worst");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof line, "%-10s %-20s %6zu %12.3e %10.1e %-5s %s\n", e.suite.c_str(), e.name.c_str(),
                  e.seeds, e.worst_rel_err, e.tolerance, e.passed() ? "yes" : "NO", e.worst_detail.c_str());
    os << line;
  }
  return os.str();
}

nlohmann::json grad_suite_to_json(const std::vector<GradSuiteEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    arr.push_back({{"suite", e.suite},
                   {"case", e.name},
                   {"seeds", e.seeds},
                   {"max_rel_err", e.worst_rel_err},
                   {"tolerance", e.tolerance},
                   {"passed", e.passed()},
                   {"worst", e.worst_detail}});
  }
  return arr;
}

}  // namespace bgf
