#include <doctest.h>

#include <cmath>

#include "bgf/blocks.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::rand_tensor;

namespace {

double grad_norm(const Parameter<double>& p) {
  double s = 0;
  for (auto v : p.grad.data()) s += v * v;
  return std::sqrt(s);
}

void zero(Parameter<double>& p) { p.value.fill(0.0); }

}  // namespace

TEST_CASE("CBS: zero input with zero shift gives zero output") {
  std::mt19937_64 rng(1);
  ConvBlock<double> cbs("cbs", 3, 8, 3, 1, rng);
  for (bool training : {true, false}) {
    Graph<double> g(training);
    auto y = cbs.forward(g.constant(NdTensor<double>::zeros({2, 3, 5, 5})));
    for (auto v : y.value().data()) CHECK(v == 0.0);
  }
}

TEST_CASE("CBS: identity 1x1 conv and identity BN give SiLU") {
  std::mt19937_64 rng(2);
  const std::int64_t c = 4;
  ConvBlock<double> cbs("cbs", c, c, 1, 1, rng);
  cbs.weight.value.fill(0.0);
  for (std::int64_t i = 0; i < c; ++i) cbs.weight.value.at({i, i, 0, 0}) = 1.0;
  cbs.bn_stats.running_var.fill(1.0 - 1e-3);
  Graph<double> g(false);
  auto xv = rand_tensor({2, c, 3, 3}, 5, -3, 3);
  auto y = cbs.forward(g.constant(xv)).value();
  for (std::int64_t i = 0; i < xv.numel(); ++i) CHECK(std::abs(y[i] - xv[i] * test::sigmoid(xv[i])) <= 1e-12);
}

TEST_CASE("CBS: equals naive conv, BN and SiLU composed") {
  std::mt19937_64 rng(3);
  ConvBlock<double> cbs("cbs", 3, 5, 3, 2, rng);
  cbs.bn_stats.running_mean = rand_tensor({5}, 7);
  cbs.bn_stats.running_var = rand_tensor({5}, 8, 0.5, 2.0);
  cbs.bn_gamma.value = rand_tensor({5}, 9);
  cbs.bn_beta.value = rand_tensor({5}, 10);
  auto xv = rand_tensor({2, 3, 9, 9}, 11);
  Graph<double> g(false);
  auto y = cbs.forward(g.constant(xv)).value();
  auto conv = test::naive_conv(xv, cbs.weight.value, nullptr, 2, 1);
  REQUIRE(conv.shape() == y.shape());
  const std::int64_t plane = conv.dim(2) * conv.dim(3);
  for (std::int64_t i = 0; i < conv.numel(); ++i) {
    const std::int64_t c = (i / plane) % 5;
    const double bn = (conv[i] - cbs.bn_stats.running_mean[c]) / std::sqrt(cbs.bn_stats.running_var[c] + 1e-3) *
                          cbs.bn_gamma.value[c] +
                      cbs.bn_beta.value[c];
    CHECK(std::abs(y[i] - bn * test::sigmoid(bn)) <= 1e-12);
  }
}

TEST_CASE("Bottleneck: zero map with shortcut is a pure residual") {
  std::mt19937_64 rng(4);
  Bottleneck<double> b("m", 6, true, rng);
  zero(b.cv2.weight);
  Graph<double> g(true);
  auto xv = rand_tensor({2, 6, 4, 4}, 12);
  auto y = b.forward(g.constant(xv));
  CHECK(max_abs_diff(y.value(), xv) == 0.0);
}

TEST_CASE("C2f: shortcut flag differs exactly by the residual add") {
  std::mt19937_64 rng(5);
  C2f<double> c2f("c2f", 6, 8, 1, true, rng);
  auto xv = rand_tensor({2, 6, 5, 5}, 13);
  for (bool shortcut : {true, false}) {
    c2f.blocks[0]->shortcut = shortcut;
    Graph<double> g(true);
    auto x = g.constant(xv);
    auto y = c2f.forward(x).value();
    Graph<double> h(true);
    auto parts = ops::split(c2f.cv1.forward(h.constant(xv)), 1, {4, 4});
    auto inner = c2f.blocks[0]->cv2.forward(c2f.blocks[0]->cv1.forward(parts[1]));
    auto third = shortcut ? ops::add(parts[1], inner) : inner;
    auto ref = c2f.cv2.forward(ops::concat<double>({parts[0], parts[1], third}, 1)).value();
    CHECK(max_abs_diff(y, ref) <= 1e-14);
  }
}

TEST_CASE("C2f: [1,64,8,8] with n=2 keeps its shape") {
  std::mt19937_64 rng(6);
  C2f<float> c2f("c2f", 64, 64, 2, true, rng);
  Graph<float> g(false);
  auto y = c2f.forward(g.constant(NdTensor<float>::ones({1, 64, 8, 8})));
  CHECK(y.shape() == Shape{1, 64, 8, 8});
}

TEST_CASE("C2f: odd split width is rejected") {
  std::mt19937_64 rng(7);
  CHECK_THROWS_AS(C2f<double>("c2f", 4, 7, 1, false, rng), ShapeError);
  BlockSpec s{BlockKind::C2f, 4, 8, 1, true};
  CHECK_THROWS_AS(make_block<double>("c2f", s, rng), ShapeError);
}

TEST_CASE("CSP: zero bottlenecks leave the two projections and concat") {
  std::mt19937_64 rng(8);
  CspBlock<double> csp("csp", 6, 8, 2, rng);
  for (auto& b : csp.blocks) zero(b->cv2.weight);
  auto xv = rand_tensor({2, 6, 4, 4}, 14);
  Graph<double> g(true);
  auto y = csp.forward(g.constant(xv)).value();
  Graph<double> h(true);
  auto x = h.constant(xv);
  auto ref = csp.cv3.forward(ops::concat<double>({csp.cv1.forward(x), csp.cv2.forward(x)}, 1)).value();
  CHECK(max_abs_diff(y, ref) <= 1e-14);
}

TEST_CASE("CSP: gradient reaches both branches") {
  std::mt19937_64 rng(9);
  CspBlock<double> csp("csp", 6, 8, 1, rng);
  csp.visit({[](Parameter<double>& p) { p.zero_grad(); }, nullptr});
  Graph<double> g(true);
  auto y = csp.forward(g.constant(rand_tensor({2, 6, 4, 4}, 15)));
  g.backward(ops::sum(ops::mul(y, g.constant(rand_tensor(y.shape(), 16)))));
  CHECK(grad_norm(csp.cv1.weight) > 0);
  CHECK(grad_norm(csp.cv2.weight) > 0);
  CHECK(grad_norm(csp.blocks[0]->cv1.weight) > 0);
  CHECK(grad_norm(csp.cv3.weight) > 0);
}

TEST_CASE("SPPF: constant input maps to per-channel constants") {
  std::mt19937_64 rng(10);
  Sppf<double> sppf("sppf", 8, 6, rng);
  Graph<double> g(false);
  auto y = sppf.forward(g.constant(NdTensor<double>::full({1, 8, 7, 7}, 0.3))).value();
  REQUIRE(y.shape() == Shape{1, 6, 7, 7});
  for (std::int64_t c = 0; c < 6; ++c)
    for (std::int64_t i = 0; i < 49; ++i) CHECK(y[c * 49 + i] == y[c * 49]);
}

TEST_CASE("SPPF: chained k=5 pools equal single pools of 5, 9 and 13") {
  Graph<double> g;
  auto x = g.constant(rand_tensor({2, 3, 11, 9}, 17));
  auto p1 = ops::max_pool2d(x, 5, 1, 2);
  auto p2 = ops::max_pool2d(p1, 5, 1, 2);
  auto p3 = ops::max_pool2d(p2, 5, 1, 2);
  CHECK(max_abs_diff(p2.value(), ops::max_pool2d(x, 9, 1, 4).value()) == 0.0);
  CHECK(max_abs_diff(p3.value(), ops::max_pool2d(x, 13, 1, 6).value()) == 0.0);
}

TEST_CASE("blocks preserve batch and spatial extents over random shapes") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 24; ++trial) {
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng() % 3);
    const std::int64_t cin = 2 + 2 * static_cast<std::int64_t>(rng() % 4);
    const std::int64_t cout = 2 + 2 * static_cast<std::int64_t>(rng() % 4);
    const std::int64_t h = 3 + static_cast<std::int64_t>(rng() % 6), w = 3 + static_cast<std::int64_t>(rng() % 6);
    BlockSpec s;
    s.kind = static_cast<BlockKind>(trial % 4);
    s.channels_in = cin;
    s.channels_out = s.kind == BlockKind::C2f ? cin : cout;
    s.shortcut = s.kind == BlockKind::C2f;
    s.repeats = 1 + trial % 2;
    s.kernel = 3;
    auto blk = make_block<double>("b", s, rng);
    Graph<double> g(true);
    auto y = blk->forward(g.constant(rand_tensor({n, cin, h, w}, rng())));
    CHECK(y.shape() == Shape{n, s.channels_out, h, w});
    CHECK(blk->parameter_count() == block_parameter_count(s));
  }
}

TEST_CASE("block parameter counts: goldens") {
  CHECK(block_parameter_count({BlockKind::CBS, 3, 16, 1, false, 3, 2}) == 464);
  CHECK(block_parameter_count({BlockKind::CBS, 16, 32, 1, false, 1, 1}) == 576);
  CHECK(block_parameter_count({BlockKind::C2f, 32, 64, 1, true}) == 27008);
  CHECK(block_parameter_count({BlockKind::C2f, 64, 64, 2, false}) == 4224 + 2 * 18560 + 8320);
  CHECK(block_parameter_count({BlockKind::CSP, 64, 64, 1}) == 27008);
  CHECK(block_parameter_count({BlockKind::CSP, 96, 32, 1}) == 2 * 1568 + 4672 + 1088);
  CHECK(block_parameter_count({BlockKind::SPPF, 64, 64}) == 10432);
}
