#include <doctest.h>

#include <set>

#include "bgf/neck.hpp"
#include "test_util.hpp"

using namespace bgf;
using bgf::test::rand_tensor;

namespace {

const std::map<int, std::int64_t> kTaps{{2, 16}, {3, 32}, {4, 64}, {5, 128}};

NeckGraph two_node_graph() {
  NeckGraph g;
  g.name = "tiny";
  g.taps = {"P3", "P4"};
  g.nodes = {{"a", NeckOp::CBS, 3, 16, 1, 1, false}, {"b", NeckOp::CBS, 3, 16, 1, 1, false}};
  g.edges = {{"P3", "a"}, {"a", "b"}};
  g.outputs = {"b"};
  return g;
}

std::map<std::string, Var<double>> random_taps(Graph<double>& g, const NeckGraph& neck, std::int64_t input,
                                               std::uint64_t seed, bool variables) {
  std::map<std::string, Var<double>> taps;
  for (const auto& t : neck.taps) {
    const int lv = tap_level(t);
    const std::int64_t side = input >> lv;
    auto v = rand_tensor({1, kTaps.at(lv), side, side}, seed + static_cast<std::uint64_t>(lv));
    taps.emplace(t, variables ? g.variable(std::move(v)) : g.constant(std::move(v)));
  }
  return taps;
}

}  // namespace

TEST_CASE("plan_neck: a two-node chain") {
  auto p = plan_neck(two_node_graph(), kTaps, 64);
  CHECK(p.order == std::vector<std::string>{"a", "b"});
  REQUIRE(p.output_shapes.size() == 1);
  CHECK(p.output_shapes[0] == FeatureShape{16, 8, 8});
}

TEST_CASE("plan_neck: structural errors") {
  SUBCASE("cycle") {
    auto g = two_node_graph();
    g.edges = {{"b", "a"}, {"a", "b"}};
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), GraphError);
  }
  SUBCASE("dangling source") {
    auto g = two_node_graph();
    g.edges[0].src = "P5";
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), GraphError);
  }
  SUBCASE("duplicate id") {
    auto g = two_node_graph();
    g.nodes[1].id = "a";
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), GraphError);
  }
  SUBCASE("reserved id") {
    auto g = two_node_graph();
    g.nodes[0].id = "P2";
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), GraphError);
  }
  SUBCASE("no outputs") {
    auto g = two_node_graph();
    g.outputs.clear();
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), GraphError);
  }
}

TEST_CASE("plan_neck: shape errors") {
  SUBCASE("concat spatial mismatch") {
    NeckGraph g{"bad", {"P3", "P4"}, {{"c", NeckOp::Concat, 3}}, {{"P3", "c"}, {"P4", "c"}}, {"c"}, {}};
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), ShapeError);
  }
  SUBCASE("weighted-sum channel mismatch") {
    NeckGraph g{"bad",
                {"P3", "P4"},
                {{"u", NeckOp::Upsample, 3}, {"s", NeckOp::WeightedSum, 3}},
                {{"P4", "u"}, {"P3", "s"}, {"u", "s"}},
                {"s"},
                {}};
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), ShapeError);
  }
  SUBCASE("region grid does not divide the map") {
    NeckGraph g{"bad", {"P5"}, {{"a", NeckOp::BRA, 5}}, {{"P5", "a"}}, {"a"}, {}};
    g.attention.bra.region_grid = 2;
    g.attention.bra.topk = 2;
    g.attention.bra.heads = 4;
    CHECK_NOTHROW(plan_neck(g, kTaps, 64));
    CHECK_THROWS_AS(plan_neck(g, kTaps, 96), ShapeError);
  }
  SUBCASE("declared level disagrees") {
    auto g = two_node_graph();
    g.nodes[1].level = 4;
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), ShapeError);
  }
  SUBCASE("input not divisible by the coarsest stride") {
    CHECK_THROWS_AS(plan_neck(preset_bgf(), kTaps, 100), ShapeError);
  }
  SUBCASE("wrong arity") {
    NeckGraph g{"bad", {"P3"}, {{"c", NeckOp::Concat, 3}}, {{"P3", "c"}}, {"c"}, {}};
    CHECK_THROWS_AS(plan_neck(g, kTaps, 64), ShapeError);
  }
}

TEST_CASE("presets: fpn-panet is three-scale without BRA") {
  const auto g = preset_fpn_panet();
  const auto p = plan_neck(g, kTaps, 640);
  REQUIRE(p.output_shapes.size() == 3);
  CHECK(p.output_shapes[0].height == 80);
  CHECK(p.output_shapes[1].height == 40);
  CHECK(p.output_shapes[2].height == 20);
  for (const auto& n : g.nodes) CHECK(n.op != NeckOp::BRA);
  for (const auto& t : g.taps) CHECK(t != "P2");
}

TEST_CASE("presets: bgf is four-scale with BRA after every resampler") {
  const auto g = preset_bgf();
  const auto p = plan_neck(g, kTaps, 640);
  REQUIRE(p.output_shapes.size() == 4);
  const std::int64_t sides[4] = {160, 80, 40, 20};
  for (int i = 0; i < 4; ++i) {
    CHECK(p.output_shapes[static_cast<std::size_t>(i)].height == sides[i]);
    CHECK(p.output_shapes[static_cast<std::size_t>(i)].width == sides[i]);
  }
  int bra = 0;
  for (const auto& n : g.nodes) {
    if (n.op != NeckOp::BRA) continue;
    ++bra;
    const auto in = g.inputs_of(n.id);
    REQUIRE(in.size() == 1);
    const NeckNode* pred = g.find(in[0]);
    REQUIRE(pred != nullptr);
    CHECK((pred->op == NeckOp::CBS || pred->op == NeckOp::Downsample || pred->op == NeckOp::Upsample));
  }
  CHECK(bra == 6);
  CHECK(g.edges.size() > preset_fpn_panet().edges.size());
  CHECK(g.attention.bra.region_grid == 2);
  CHECK(g.attention.bra.topk == 2);
  CHECK(g.attention.bra.heads == 4);
  // Every tap feeds more than one node in the generalized topology.
  for (const auto& t : g.taps) {
    int uses = 0;
    for (const auto& e : g.edges) uses += e.src == t;
    CHECK(uses >= 2);
  }
}

TEST_CASE("presets: names and attention substitution") {
  for (auto name : {"fpn-panet", "bifpn", "bgf"}) CHECK(preset_by_name(name).name == name);
  CHECK_THROWS(preset_by_name("nas-fpn"));
  auto g = with_attention(preset_bgf(), AttentionKind::CBAM);
  int cbam = 0;
  for (const auto& n : g.nodes) {
    CHECK(n.op != NeckOp::BRA);
    cbam += n.op == NeckOp::CBAM;
  }
  CHECK(cbam == 6);
}

TEST_CASE("neck json round trip") {
  for (auto name : {"fpn-panet", "bifpn", "bgf"}) {
    const auto g = preset_by_name(name);
    const auto back = neck_from_json(neck_to_json(g));
    CHECK(neck_to_json(back) == neck_to_json(g));
    CHECK(back.nodes.size() == g.nodes.size());
    CHECK(back.edges.size() == g.edges.size());
  }
}

TEST_CASE("fuse_concat: channel order follows the input order") {
  Graph<double> g;
  auto a = rand_tensor({2, 2, 3, 3}, 1), b = rand_tensor({2, 3, 3, 3}, 2);
  auto y = fuse_concat<double>({g.constant(a), g.constant(b)}).value();
  REQUIRE(y.shape() == Shape{2, 5, 3, 3});
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 5; ++c)
      for (std::int64_t i = 0; i < 9; ++i) {
        const double want = c < 2 ? a[(n * 2 + c) * 9 + i] : b[(n * 3 + c - 2) * 9 + i];
        CHECK(y[(n * 5 + c) * 9 + i] == want);
      }
  CHECK_THROWS_AS(fuse_concat<double>({g.constant(a), g.constant(rand_tensor({2, 2, 4, 4}, 3))}), ShapeError);
}

TEST_CASE("fuse_weighted: normalized non-negative weights") {
  Graph<double> g;
  auto a = rand_tensor({1, 2, 2, 2}, 1), b = rand_tensor({1, 2, 2, 2}, 2), c = rand_tensor({1, 2, 2, 2}, 3);
  NdTensor<double> w({3});
  w[0] = 0.7;
  w[1] = -0.4;
  w[2] = 1.9;
  auto y = fuse_weighted<double>({g.constant(a), g.constant(b), g.constant(c)}, g.constant(w), 1e-4).value();
  const double z = 0.7 + 1.9 + 1e-4;
  for (std::int64_t i = 0; i < 8; ++i) CHECK(std::abs(y[i] - (0.7 * a[i] + 1.9 * c[i]) / z) <= 1e-14);
  CHECK_THROWS_AS(fuse_weighted<double>({g.constant(a), g.constant(b)}, g.constant(w)), ShapeError);
}

TEST_CASE("Neck: symbolic shapes equal the numeric forward") {
  for (auto name : {"fpn-panet", "bifpn", "bgf"}) {
    CAPTURE(name);
    for (std::int64_t input : {64, 128}) {
      std::mt19937_64 rng(5);
      Neck<double> neck(preset_by_name(name, {{8, 16, 24, 32}, 1}), kTaps, input, rng);
      Graph<double> g(true);
      auto outs = neck.forward(random_taps(g, neck.graph(), input, 9, false));
      REQUIRE(outs.size() == neck.plan().output_shapes.size());
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const auto& fs = neck.plan().output_shapes[i];
        CHECK(outs[i].shape() == Shape{1, fs.channels, fs.height, fs.width});
      }
      CHECK(neck.parameter_count() > 0);
    }
  }
}

TEST_CASE("Neck: gradient reaches every tap") {
  for (auto name : {"fpn-panet", "bifpn", "bgf"}) {
    CAPTURE(name);
    std::mt19937_64 rng(6);
    Neck<double> neck(preset_by_name(name, {{8, 16, 24, 32}, 1}), kTaps, 64, rng);
    Graph<double> g(true);
    auto taps = random_taps(g, neck.graph(), 64, 11, true);
    auto outs = neck.forward(taps);
    Var<double> loss = ops::sum(outs[0]);
    for (std::size_t i = 1; i < outs.size(); ++i) loss = ops::add(loss, ops::sum(outs[i]));
    g.backward(loss);
    for (const auto& [id, v] : taps) {
      CAPTURE(id);
      CHECK(bgf::test::max_abs(g.grad(v), NdTensor<double>::zeros(v.shape())) > 0.0);
    }
  }
}

TEST_CASE("Neck: BRA nodes expose their routing") {
  std::mt19937_64 rng(7);
  Neck<double> neck(preset_bgf({{8, 16, 24, 32}, 1}), kTaps, 64, rng);
  Graph<double> g(true);
  neck.forward(random_taps(g, neck.graph(), 64, 13, false));
  auto* l = dynamic_cast<BiLevelRoutingAttention<double>*>(neck.layer("att_up5"));
  REQUIRE(l != nullptr);
  CHECK(l->last_routing().k == 2);
  CHECK(neck.output_levels() == std::vector<int>{2, 3, 4, 5});
}
