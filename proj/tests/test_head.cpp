#include <doctest.h>

#include <algorithm>
#include <random>

#include "bgf/head.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::rand_box;
using bgf::test::rand_tensor;

namespace {

// One-hot-like logits: every side of every anchor concentrates on `bin`.
NdTensor<double> peaked_reg(std::int64_t anchors, std::int64_t reg_max, const std::vector<std::int64_t>& bins_per_side) {
  NdTensor<double> r({anchors, 4 * (reg_max + 1)});
  r.fill(-60.0);
  for (std::int64_t a = 0; a < anchors; ++a)
    for (std::int64_t s = 0; s < 4; ++s) r[a * 4 * (reg_max + 1) + s * (reg_max + 1) + bins_per_side[static_cast<std::size_t>(s)]] = 60.0;
  return r;
}


bool same(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].score != b[i].score || a[i].class_id != b[i].class_id || a[i].box.x1 != b[i].box.x1 ||
        a[i].box.y2 != b[i].box.y2)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("anchors: counts and centers") {
  const auto a = make_anchor_points(640, {4, 8, 16, 32});
  CHECK(a.size() == 25600 + 6400 + 1600 + 400);
  CHECK(a.grids == std::vector<std::int64_t>{160, 80, 40, 20});
  const auto b = make_anchor_points(32, {32});
  REQUIRE(b.size() == 1);
  CHECK(b.cx[0] == 16.0);
  CHECK(b.cy[0] == 16.0);
  const auto c = make_anchor_points(16, {8, 16});
  REQUIRE(c.size() == 5);
  // Row-major within a scale: (4,4) (12,4) (4,12) (12,12), then (8,8).
  const double cx[5] = {4, 12, 4, 12, 8}, cy[5] = {4, 4, 12, 12, 8}, st[5] = {8, 8, 8, 8, 16};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(c.cx[i] == cx[i]);
    CHECK(c.cy[i] == cy[i]);
    CHECK(c.stride[i] == st[i]);
  }
  CHECK_THROWS_AS(make_anchor_points(100, {32}), ShapeError);
}

TEST_CASE("dfl_decode: peaked, uniform and bounded") {
  auto d = dfl_decode(peaked_reg(3, 8, {0, 3, 5, 8}), 8);
  for (std::int64_t a = 0; a < 3; ++a) {
    CHECK(d.at({a, 0}) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(d.at({a, 1}) == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(d.at({a, 2}) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(d.at({a, 3}) == doctest::Approx(8.0).epsilon(1e-12));
  }
  auto u = dfl_decode(NdTensor<double>::zeros({2, 4 * 17}), 16);
  for (auto v : u.data()) CHECK(std::abs(v - 8.0) <= 1e-12);
  auto r = dfl_decode(rand_tensor({50, 4 * 17}, 3, -20, 20), 16);
  for (auto v : r.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 16.0);
  }
  CHECK_THROWS_AS(dfl_decode(NdTensor<double>::zeros({2, 30}), 16), ShapeError);
}

TEST_CASE("decode_boxes: hand case, clipping and empty output") {
  const auto anchors = make_anchor_points(64, {16});  // centers 8, 24, 40, 56
  const std::int64_t na = static_cast<std::int64_t>(anchors.size());
  REQUIRE(na == 16);
  NdTensor<double> cls({na, 2});
  cls.fill(-10.0);
  cls.at({5, 1}) = 2.0;   // anchor (24, 24)
  cls.at({0, 0}) = 1.0;   // anchor (8, 8)
  auto reg = peaked_reg(na, 4, {1, 1, 2, 2});
  auto dets = decode_boxes(cls, reg, anchors, 4, 0.25, 7);
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].class_id == 1);
  CHECK(dets[0].image_id == 7);
  CHECK(dets[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
  CHECK(dets[0].box.x1 == doctest::Approx(8.0));
  CHECK(dets[0].box.y1 == doctest::Approx(8.0));
  CHECK(dets[0].box.x2 == doctest::Approx(56.0));
  CHECK(dets[0].box.y2 == doctest::Approx(56.0));
  // (8-16, 8-16, 8+32, 8+32) clipped to the image.
  CHECK(dets[1].box.x1 == 0.0);
  CHECK(dets[1].box.y1 == 0.0);
  CHECK(dets[1].box.x2 == doctest::Approx(40.0));
  CHECK(dets[1].box.y2 == doctest::Approx(40.0));

  NdTensor<double> neg({na, 2});
  neg.fill(-30.0);
  CHECK(decode_boxes(neg, reg, anchors, 4, 0.001).empty());
  CHECK_THROWS_AS(decode_boxes(NdTensor<double>::zeros({3, 2}), reg, anchors, 4, 0.1), ShapeError);
}

TEST_CASE("decode_boxes: every box lies in the image and scores are sorted") {
  const auto anchors = make_anchor_points(64, {8, 16, 32});
  const auto na = static_cast<std::int64_t>(anchors.size());
  auto dets = decode_boxes(rand_tensor({na, 3}, 1, -4, 4), rand_tensor({na, 4 * 9}, 2, -5, 5), anchors, 8, 0.2);
  CHECK(!dets.empty());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& d = dets[i];
    CHECK(d.box.x1 >= 0.0);
    CHECK(d.box.y1 >= 0.0);
    CHECK(d.box.x2 <= 64.0);
    CHECK(d.box.y2 <= 64.0);
    CHECK(d.box.valid());
    CHECK(d.score >= 0.2);
    if (i > 0) CHECK(dets[i - 1].score >= d.score);
  }
}

TEST_CASE("nms: matches a literal greedy oracle") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Detection> dets;
    const int n = 1 + static_cast<int>(u(rng) * 30);
    for (int i = 0; i < n; ++i) {
      // Coarse scores produce ties.
      dets.push_back({rand_box(rng, 0, 50, 2), std::round(u(rng) * 10) / 10, static_cast<int>(u(rng) * 2), 0});
    }
    const double thr = 0.3 + 0.4 * u(rng);
    const auto got = nms(dets, thr);
    CHECK(same(got, bgf::test::greedy_nms_oracle(dets, thr)));
    CHECK(same(nms(got, thr), got));
    for (std::size_t i = 0; i < got.size(); ++i)
      for (std::size_t j = i + 1; j < got.size(); ++j)
        if (got[i].class_id == got[j].class_id) CHECK(box_iou(got[i].box, got[j].box) <= thr);
  }
}

TEST_CASE("nms: class-wise and threshold extremes") {
  const Box b{0, 0, 10, 10};
  std::vector<Detection> d{{b, 0.9, 0, 0}, {b, 0.8, 1, 0}, {b, 0.7, 0, 0}};
  const auto k = nms(d, 0.5);
  REQUIRE(k.size() == 2);
  CHECK(k[0].score == 0.9);
  CHECK(k[1].score == 0.8);
  CHECK(nms(d, 1.0).size() == 3);
  CHECK(nms({}, 0.5).empty());
}

TEST_CASE("assign_targets: no ground truth gives no positives") {
  const auto anchors = make_anchor_points(32, {8});
  std::vector<double> scores(anchors.size(), 0.5);
  std::vector<Box> pred(anchors.size(), Box{0, 0, 8, 8});
  const auto a = assign_targets(anchors, {}, scores, 1, pred);
  CHECK(a.num_pos == 0);
  for (auto g : a.gt) CHECK(g == -1);
}

TEST_CASE("assign_targets: a full-image box takes exactly top-k anchors") {
  const auto anchors = make_anchor_points(64, {8});
  std::vector<double> scores(anchors.size(), 0.5);
  std::vector<Box> pred(anchors.size(), Box{0, 0, 64, 64});
  const auto a = assign_targets(anchors, {{Box{0, 0, 64, 64}, 0, 0}}, scores, 1, pred);
  CHECK(a.num_pos == 10);
  // Equal metrics resolve to the lowest anchor indices.
  for (std::size_t i = 0; i < anchors.size(); ++i) CHECK(a.gt[i] == (i < 10 ? 0 : -1));
  for (std::size_t i = 0; i < 10; ++i) CHECK(a.score[i] == doctest::Approx(1.0));
}

TEST_CASE("assign_targets: enumeration oracle on a small grid") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 1);
  const auto anchors = make_anchor_points(32, {4, 8});
  const std::size_t na = anchors.size();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruth> gts;
    const int ng = 1 + trial % 3;
    for (int g = 0; g < ng; ++g) gts.push_back({rand_box(rng, 0, 32, 6), static_cast<int>(u(rng) * 2), 0});
    std::vector<double> scores(na * 2);
    for (auto& s : scores) s = 0.05 + 0.9 * u(rng);
    std::vector<Box> pred(na);
    for (auto& p : pred) p = rand_box(rng, 0, 32, 2);
    TalConfig cfg;
    cfg.topk = 4;
    const auto a = assign_targets(anchors, gts, scores, 2, pred, cfg);

    // Oracle: per gt, metric of every in-box anchor; top-k set; resolve by IoU.
    std::vector<std::vector<int>> cand(na);
    for (std::size_t g = 0; g < gts.size(); ++g) {
      std::vector<std::pair<double, std::size_t>> m;
      for (std::size_t i = 0; i < na; ++i) {
        const Box& b = gts[g].box;
        if (!(anchors.cx[i] > b.x1 && anchors.cx[i] < b.x2 && anchors.cy[i] > b.y1 && anchors.cy[i] < b.y2)) continue;
        const double s = scores[i * 2 + static_cast<std::size_t>(gts[g].class_id)];
        m.push_back({-std::sqrt(s) * std::pow(box_iou(pred[i], b), 6.0), i});
      }
      std::stable_sort(m.begin(), m.end(), [](auto& x, auto& y) { return x.first < y.first; });
      for (std::size_t j = 0; j < std::min<std::size_t>(4, m.size()); ++j) cand[m[j].second].push_back(static_cast<int>(g));
    }
    std::int64_t npos = 0;
    for (std::size_t i = 0; i < na; ++i) {
      int want = -1;
      double best = -1;
      for (int g : cand[i]) {
        const double iou = box_iou(pred[i], gts[static_cast<std::size_t>(g)].box);
        if (iou > best) {
          best = iou;
          want = g;
        }
      }
      npos += want >= 0;
      CHECK(a.gt[i] == want);
      if (want >= 0) {
        const Box& b = gts[static_cast<std::size_t>(want)].box;
        CHECK(anchors.cx[i] > b.x1);
        CHECK(anchors.cx[i] < b.x2);
        CHECK(anchors.cy[i] > b.y1);
        CHECK(anchors.cy[i] < b.y2);
        CHECK(a.score[i] >= 0.0);
        CHECK(a.score[i] <= 1.0 + 1e-9);
      } else {
        CHECK(a.score[i] == 0.0);
      }
    }
    CHECK(a.num_pos == npos);
  }
}

TEST_CASE("DetectHead: output shapes") {
  std::mt19937_64 rng(3);
  HeadConfig cfg;
  cfg.strides = {8, 16};
  cfg.num_classes = 3;
  cfg.reg_max = 4;
  DetectHead<double> head("head", {16, 32}, cfg, 64, rng);
  Graph<double> g(true);
  auto out = head.forward({g.constant(rand_tensor({2, 16, 8, 8}, 1)), g.constant(rand_tensor({2, 32, 4, 4}, 2))});
  CHECK(out.cls.shape() == Shape{2, 80, 3});
  CHECK(out.reg.shape() == Shape{2, 80, 20});
  CHECK_THROWS_AS(head.forward({g.constant(rand_tensor({2, 16, 8, 8}, 1))}), ShapeError);
}
