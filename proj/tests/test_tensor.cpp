#include <doctest.h>

#include <cmath>
#include <numeric>

#include "bgf/gradcheck.hpp"
#include "bgf/kernels.hpp"
#include "bgf/ops.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::rand_tensor;

TEST_CASE("conv2d: ones kernel sums a 3x3 window") {
  Graph<double> g;
  auto x = g.constant(NdTensor<double>::ones({1, 1, 3, 3}));
  auto w = g.constant(NdTensor<double>::ones({1, 1, 3, 3}));
  auto y = ops::conv2d<double>(x, w, std::nullopt, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.value()[0] == 9.0);
}

TEST_CASE("conv2d: unit 1x1 kernel is the identity") {
  Graph<double> g;
  auto xv = rand_tensor({2, 1, 5, 4}, 3);
  auto y = ops::conv2d<double>(g.constant(xv), g.constant(NdTensor<double>::ones({1, 1, 1, 1})), std::nullopt, 1, 0);
  CHECK(max_abs_diff(y.value(), xv) == 0.0);
}

TEST_CASE("conv2d: matches the naive loop nest") {
  Graph<double> g;
  auto xv = rand_tensor({2, 3, 8, 8}, 11);
  auto wv = rand_tensor({4, 3, 3, 3}, 12);
  auto bv = rand_tensor({4}, 13);
  auto y = ops::conv2d<double>(g.constant(xv), g.constant(wv), g.constant(bv), 2, 1);
  REQUIRE(y.shape() == Shape{2, 4, 4, 4});
  CHECK(max_abs_diff(y.value(), test::naive_conv(xv, wv, bv.ptr(), 2, 1)) <= 1e-12);
}

TEST_CASE("conv2d: grouped conv equals independent per-channel convs") {
  Graph<double> g;
  const std::int64_t c = 4;
  auto xv = rand_tensor({2, c, 6, 6}, 21);
  auto wv = rand_tensor({c, 1, 3, 3}, 22);
  auto y = ops::conv2d<double>(g.constant(xv), g.constant(wv), std::nullopt, 1, 1, c);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    NdTensor<double> xc({2, 1, 6, 6}), wc({1, 1, 3, 3});
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t i = 0; i < 36; ++i) xc[b * 36 + i] = xv[(b * c + ch) * 36 + i];
    for (std::int64_t i = 0; i < 9; ++i) wc[i] = wv[ch * 9 + i];
    auto ref = test::naive_conv(xc, wc, nullptr, 1, 1);
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t i = 0; i < 36; ++i) CHECK(std::abs(y.value()[(b * c + ch) * 36 + i] - ref[b * 36 + i]) <= 1e-12);
  }
}

TEST_CASE("conv2d: shape errors") {
  Graph<double> g;
  auto x = g.constant(NdTensor<double>::ones({1, 3, 4, 4}));
  CHECK_THROWS_AS(ops::conv2d<double>(x, g.constant(NdTensor<double>::ones({2, 2, 3, 3})), std::nullopt, 1, 1),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv2d<double>(x, g.constant(NdTensor<double>::ones({2, 1, 3, 3})), std::nullopt, 1, 1, 3),
                  ShapeError);
  CHECK_THROWS_AS(ops::conv2d<double>(x, g.constant(NdTensor<double>::ones({2, 3, 7, 7})), std::nullopt, 1, 0),
                  ShapeError);
}

TEST_CASE("kernels: parallel path agrees with the reference at 64-bit") {
  struct Case {
    std::int64_t cin, cout, side, k, stride, groups;
  };
  const Case cases[] = {{3, 8, 9, 3, 2, 1}, {8, 8, 7, 1, 1, 1}, {6, 6, 8, 3, 1, 6}, {8, 12, 6, 3, 1, 2},
                        {5, 7, 5, 5, 1, 1}, {16, 4, 4, 1, 1, 1}, {4, 16, 10, 3, 2, 1}, {2, 2, 3, 3, 1, 1}};
  std::uint64_t seed = 100;
  for (const auto& cs : cases) {
    kernels::ConvGeometry geom;
    geom.batch = 3;
    geom.in_channels = cs.cin;
    geom.out_channels = cs.cout;
    geom.in_h = geom.in_w = cs.side;
    geom.kernel_h = geom.kernel_w = cs.k;
    geom.pad_h = geom.pad_w = cs.k / 2;
    geom.stride_h = geom.stride_w = cs.stride;
    geom.groups = cs.groups;
    const auto x = rand_tensor({3, cs.cin, cs.side, cs.side}, ++seed);
    const auto w = rand_tensor({cs.cout, cs.cin / cs.groups, cs.k, cs.k}, ++seed);
    const auto b = rand_tensor({cs.cout}, ++seed);
    const auto gy = rand_tensor({3, cs.cout, geom.out_h(), geom.out_w()}, ++seed);
    NdTensor<double> y1(gy.shape()), y2(gy.shape());
    kernels::reference::conv2d_forward(geom, x.ptr(), w.ptr(), b.ptr(), y1.ptr());
    kernels::conv2d_forward(geom, x.ptr(), w.ptr(), b.ptr(), y2.ptr());
    CHECK(max_abs_diff(y1, y2) <= 1e-12);
    NdTensor<double> gx1(x.shape()), gx2(x.shape());
    kernels::reference::conv2d_backward_input(geom, w.ptr(), gy.ptr(), gx1.ptr());
    kernels::conv2d_backward_input(geom, w.ptr(), gy.ptr(), gx2.ptr());
    CHECK(max_abs_diff(gx1, gx2) <= 1e-12);
    NdTensor<double> gw1(w.shape()), gw2(w.shape());
    kernels::reference::conv2d_backward_weight(geom, x.ptr(), gy.ptr(), gw1.ptr());
    kernels::conv2d_backward_weight(geom, x.ptr(), gy.ptr(), gw2.ptr());
    CHECK(max_abs_diff(gw1, gw2) <= 1e-12);
  }
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      kernels::GemmShape s{7, 19, 5, ta, tb};
      const auto a = rand_tensor({7 * 5}, ++seed);
      const auto bm = rand_tensor({5 * 19}, ++seed);
      const auto c0 = rand_tensor({7 * 19}, ++seed);
      for (bool acc : {false, true}) {
        NdTensor<double> c1 = c0, c2 = c0;
        kernels::reference::gemm(s, a.ptr(), bm.ptr(), c1.ptr(), acc);
        kernels::gemm(s, a.ptr(), bm.ptr(), c2.ptr(), acc);
        CHECK(max_abs_diff(c1, c2) <= 1e-12);
      }
    }
}

TEST_CASE("upsample_nearest2x: block replication and gradient sums") {
  Graph<double> g(true);
  auto x = g.variable(NdTensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto y = ops::upsample_nearest2x(x);
  const std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (int i = 0; i < 16; ++i) CHECK(y.value()[i] == want[static_cast<std::size_t>(i)]);
  auto wv = rand_tensor({1, 1, 4, 4}, 5);
  g.backward(ops::sum(ops::mul(y, g.constant(wv))));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      double s = 0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) s += wv.at({0, 0, 2 * r + a, 2 * c + b});
      CHECK(g.grad(x).at({0, 0, r, c}) == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("upsample_nearest2x: 2x2 average of the output recovers the input") {
  Graph<double> g;
  auto xv = rand_tensor({1, 2, 3, 3}, 9);
  auto y = ops::upsample_nearest2x(g.constant(xv)).value();
  REQUIRE(y.shape() == Shape{1, 2, 6, 6});
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < 3; ++i)
      for (std::int64_t j = 0; j < 3; ++j) {
        const double avg = (y.at({0, c, 2 * i, 2 * j}) + y.at({0, c, 2 * i + 1, 2 * j}) +
                            y.at({0, c, 2 * i, 2 * j + 1}) + y.at({0, c, 2 * i + 1, 2 * j + 1})) / 4;
        CHECK(std::abs(avg - xv.at({0, c, i, j})) <= 1e-15);
      }
}

TEST_CASE("max_pool2d: window max, tie rule, SPPF geometry") {
  {
    Graph<double> g;
    auto y = ops::max_pool2d(g.constant(NdTensor<double>({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == 4.0);
  }
  {
    Graph<double> g(true);
    auto x = g.variable(NdTensor<double>::full({1, 1, 4, 4}, 2.5));
    auto y = ops::max_pool2d(x, 2, 2, 0);
    for (int i = 0; i < 4; ++i) CHECK(y.value()[i] == 2.5);
    g.backward(ops::sum(y));
    const auto& gx = g.grad(x);
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 4; ++j) CHECK(gx.at({0, 0, i, j}) == ((i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0));
  }
  {
    Graph<double> g;
    auto y = ops::max_pool2d(g.constant(rand_tensor({2, 3, 7, 5}, 4)), 5, 1, 2);
    CHECK(y.shape() == Shape{2, 3, 7, 5});
  }
}

TEST_CASE("softmax: symmetry, stability, direct formula, row sums") {
  Graph<double> g;
  auto a = ops::softmax(g.constant(NdTensor<double>({2}, {0, 0})), 0).value();
  CHECK(a[0] == 0.5);
  CHECK(a[1] == 0.5);
  auto b = ops::softmax(g.constant(NdTensor<double>({2}, {1000, 0})), 0).value();
  CHECK(std::abs(b[0] - 1.0) <= 1e-12);
  CHECK(std::abs(b[1]) <= 1e-12);
  CHECK(b.all_finite());

  auto xv = rand_tensor({3, 7, 4}, 17, -5, 5);
  for (std::int64_t axis : {0, 1, 2}) {
    auto y = ops::softmax(g.constant(xv), axis).value();
    const Shape& s = xv.shape();
    for (std::int64_t i = 0; i < s[0]; ++i)
      for (std::int64_t j = 0; j < s[1]; ++j)
        for (std::int64_t k = 0; k < s[2]; ++k) {
          double z = 0;
          for (std::int64_t l = 0; l < s[static_cast<std::size_t>(axis)]; ++l) {
            std::int64_t idx[3] = {i, j, k};
            idx[axis] = l;
            z += std::exp(xv.at({idx[0], idx[1], idx[2]}));
          }
          CHECK(std::abs(y.at({i, j, k}) - std::exp(xv.at({i, j, k})) / z) <= 1e-14);
        }
    for (std::int64_t i = 0; i < xv.numel(); ++i) CHECK(y[i] > 0.0);
  }
  auto y = ops::softmax(g.constant(xv), -1).value();
  for (std::int64_t r = 0; r < 21; ++r) {
    double s = 0;
    for (std::int64_t l = 0; l < 4; ++l) s += y[r * 4 + l];
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("concat then split with the same sizes is the identity") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Graph<double> g;
    const std::int64_t axis = trial % 4;
    std::vector<std::int64_t> sizes;
    std::vector<Var<double>> parts;
    Shape base = {2, 3, 4, 5};
    for (int p = 0; p < 1 + trial % 3; ++p) {
      sizes.push_back(1 + static_cast<std::int64_t>(rng() % 3));
      Shape s = base;
      s[static_cast<std::size_t>(axis)] = sizes.back();
      parts.push_back(g.constant(rand_tensor(s, rng())));
    }
    auto back = ops::split(ops::concat(parts, axis), axis, sizes);
    REQUIRE(back.size() == parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) CHECK(max_abs_diff(back[i].value(), parts[i].value()) == 0.0);
  }
}

TEST_CASE("backward: sum and square") {
  {
    Graph<double> g(true);
    auto x = g.variable(rand_tensor({3, 4}, 2));
    g.backward(ops::sum(x));
    for (auto v : g.grad(x).data()) CHECK(v == 1.0);
  }
  {
    Graph<double> g(true);
    auto xv = rand_tensor({3, 4}, 3);
    auto x = g.variable(xv);
    g.backward(ops::sum(ops::mul(x, x)));
    for (std::int64_t i = 0; i < xv.numel(); ++i) CHECK(g.grad(x)[i] == doctest::Approx(2 * xv[i]).epsilon(1e-14));
  }
  {
    // Fan-out accumulates additively.
    Graph<double> g(true);
    auto x = g.variable(rand_tensor({5}, 4));
    g.backward(ops::sum(ops::add(ops::scale(x, 2.0), ops::scale(x, 3.0))));
    for (auto v : g.grad(x).data()) CHECK(v == doctest::Approx(5.0));
  }
}

TEST_CASE("backward: twice without reset and non-scalar loss are errors") {
  Graph<double> g(true);
  auto x = g.variable(rand_tensor({2, 2}, 1));
  CHECK_THROWS_AS(g.backward(x), GraphError);
  auto l = ops::sum(x);
  g.backward(l);
  CHECK_THROWS_AS(g.backward(l), GraphError);
  g.reset();
  auto x2 = g.variable(rand_tensor({2, 2}, 1));
  CHECK_NOTHROW(g.backward(ops::sum(x2)));
}

TEST_CASE("non-finite values surface as errors") {
  Graph<double> g;
  auto x = g.constant(NdTensor<double>({1}, {1e308}));
  CHECK_THROWS_AS(ops::scale(x, 10.0), NonFiniteError);
}

TEST_CASE("grad_check: sum has zero error") {
  auto r = grad_check([](Graph<double>&, std::span<const Var<double>> in) { return ops::sum(in[0]); },
                      {rand_tensor({3, 3}, 8)});
  CHECK(r.max_rel_err <= 1e-9);
  CHECK(r.coords_checked == 9);
}

TEST_CASE("grad_check: detects a wrong gradient") {
  auto wrong = [](Graph<double>&, std::span<const Var<double>> in) {
    Var<double> x = in[0];
    NdTensor<double> out({1}, {0.0});
    for (auto v : x.value().data()) out[0] += v * v;
    const std::size_t xid = x.id();
    return x.graph().record("bad_square", std::move(out), {xid}, [xid](Graph<double>& g, std::size_t self) {
      const double gy = g.grad(self)[0];
      auto& gx = g.grad(xid);
      for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += gy * g.value(xid)[i];  // missing factor 2
    });
  };
  auto r = grad_check(wrong, {rand_tensor({4}, 9, 0.5, 1.0)});
  CHECK(r.max_rel_err > 0.3);
}

TEST_CASE("batchnorm2d: batch statistics in training, running statistics in eval") {
  auto xv = rand_tensor({4, 3, 5, 5}, 31, -2, 3);
  ops::BatchNormBuffers<double> buf{NdTensor<double>::zeros({3}), NdTensor<double>::ones({3})};
  Graph<double> g(true);
  auto y = ops::batchnorm2d(g.constant(xv), g.constant(NdTensor<double>::ones({3})),
                            g.constant(NdTensor<double>::zeros({3})), buf, {});
  for (std::int64_t c = 0; c < 3; ++c) {
    double m = 0, v = 0, ym = 0;
    const double cnt = 4 * 25;
    for (std::int64_t b = 0; b < 4; ++b)
      for (std::int64_t i = 0; i < 25; ++i) m += xv[(b * 3 + c) * 25 + i] / cnt;
    for (std::int64_t b = 0; b < 4; ++b)
      for (std::int64_t i = 0; i < 25; ++i) {
        const double d = xv[(b * 3 + c) * 25 + i] - m;
        v += d * d / cnt;
        ym += y.value()[(b * 3 + c) * 25 + i] / cnt;
      }
    CHECK(std::abs(ym) <= 1e-12);
    CHECK(std::abs(buf.running_mean[c] - 0.03 * m) <= 1e-12);
    const double y0 = (xv[c * 25] - m) / std::sqrt(v + 1e-3);
    CHECK(std::abs(y.value()[c * 25] - y0) <= 1e-12);
  }
  Graph<double> ge(false);
  ops::BatchNormBuffers<double> fixed{NdTensor<double>({3}, {1, 2, 3}), NdTensor<double>({3}, {4, 5, 6})};
  auto ye = ops::batchnorm2d(ge.constant(xv), ge.constant(NdTensor<double>::ones({3})),
                             ge.constant(NdTensor<double>::zeros({3})), fixed, {});
  CHECK(std::abs(ye.value()[25] - (xv[25] - 2) / std::sqrt(5 + 1e-3)) <= 1e-12);
  CHECK(fixed.running_mean[0] == 1.0);
}

TEST_CASE("reshape, permute and transpose move data as specified") {
  Graph<double> g;
  NdTensor<double> xv({2, 3, 4});
  std::iota(xv.ptr(), xv.ptr() + xv.numel(), 0.0);
  auto p = ops::permute(g.constant(xv), {2, 0, 1}).value();
  REQUIRE(p.shape() == Shape{4, 2, 3});
  for (std::int64_t a = 0; a < 2; ++a)
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t c = 0; c < 4; ++c) CHECK(p.at({c, a, b}) == xv.at({a, b, c}));
  auto t = ops::transpose(g.constant(xv), 0, 2).value();
  CHECK(t.at({3, 1, 0}) == xv.at({0, 1, 3}));
  CHECK_THROWS_AS(ops::reshape(g.constant(xv), {5, 5}), ShapeError);
}

TEST_CASE("matmul: batched and plain against loops") {
  Graph<double> g;
  auto a = rand_tensor({3, 4, 5}, 1), b = rand_tensor({3, 5, 2}, 2);
  auto c = ops::matmul(g.constant(a), g.constant(b)).value();
  for (std::int64_t bi = 0; bi < 3; ++bi)
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 2; ++j) {
        double s = 0;
        for (std::int64_t k = 0; k < 5; ++k) s += a.at({bi, i, k}) * b.at({bi, k, j});
        CHECK(std::abs(c.at({bi, i, j}) - s) <= 1e-14);
      }
  CHECK_THROWS_AS(ops::matmul(g.constant(a), g.constant(a)), ShapeError);
}

TEST_CASE("activations at known points") {
  Graph<double> g;
  auto x = g.constant(NdTensor<double>({4}, {-4, -1, 0, 2}));
  auto s = ops::silu(x).value();
  CHECK(s[2] == 0.0);
  CHECK(s[3] == doctest::Approx(2 * test::sigmoid(2)));
  auto r = ops::relu(x).value();
  CHECK(r[0] == 0.0);
  CHECK(r[3] == 2.0);
  auto h = ops::hardswish(x).value();
  CHECK(h[0] == 0.0);
  CHECK(h[1] == doctest::Approx(-1.0 * 2.0 / 6.0));
  auto sg = ops::sigmoid(x).value();
  CHECK(sg[2] == 0.5);
}

TEST_CASE("broadcasting elementwise ops") {
  Graph<double> g;
  auto a = rand_tensor({2, 3, 4, 4}, 1), b = rand_tensor({2, 3, 1, 1}, 2);
  auto y = ops::mul(g.constant(a), g.constant(b)).value();
  CHECK(y.at({1, 2, 3, 1}) == a.at({1, 2, 3, 1}) * b.at({1, 2, 0, 0}));
  CHECK_THROWS_AS(ops::add(g.constant(a), g.constant(rand_tensor({2, 2, 1, 1}, 3))), ShapeError);
}
