// Acceptance run: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <algorithm>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bgf/ablate.hpp"
#include "bgf/attention.hpp"
#include "bgf/gradcheck_suite.hpp"
#include "bgf/head.hpp"
#include "bgf/io.hpp"
#include "bgf/metrics.hpp"
#include "bgf/model.hpp"
#include "bgf/synthetic.hpp"
#include "bgf/train.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace bgf;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Criterion 1: BRA with k = S^2 against dense multi-head attention.
Outcome bra_oracle() {
  double worst = 0;
  std::uint64_t seed = 100;
  for (std::int64_t s : {1, 2, 4})
    for (std::int64_t heads : {1, 4}) {
      std::mt19937_64 rng(++seed);
      BiLevelRoutingAttention<double> m("bra", {32, s, s * s, heads, true}, rng);
      m.b_o.value = test::rand_tensor(m.b_o.value.shape(), ++seed);
      m.lce_bias.value = test::rand_tensor(m.lce_bias.value.shape(), ++seed);
      const auto x = test::rand_tensor({1, 32, 16, 16}, ++seed);
      Graph<double> g;
      const auto y = m.forward(g.constant(x)).value();
      worst = std::max(worst, max_abs_diff(y, test::dense_mhsa(x, m)));
    }
  return {worst <= 1e-5, "max abs diff " + fmt("%.3e", worst) + " over S in {1,2,4} x heads in {1,4} at 1x32x16x16"};
}

// Criterion 2: finite-difference suites.
Outcome gradient_suite() {
  const auto entries = run_grad_suites({20, {}, {}});
  bool ok = !entries.empty();
  const GradSuiteEntry* worst = nullptr;
  for (const auto& e : entries) {
    const double limit = e.suite == "attention" || e.suite == "blocks" ? 1e-3 : 1e-4;
    ok = ok && e.seeds >= 20 && e.worst_rel_err <= std::min(e.tolerance, limit);
    if (!worst || e.worst_rel_err / e.tolerance > worst->worst_rel_err / worst->tolerance) worst = &e;
  }
  std::string d = std::to_string(entries.size()) + " cases x 20 seeds";
  if (worst) d += ", worst " + worst->suite + "/" + worst->name + " " + fmt("%.2e", worst->worst_rel_err);
  return {ok, d};
}

// Criterion 3: IoU algebra over random pairs with special configurations.
Outcome iou_algebra() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-40, 40);
  std::size_t failures = 0;
  double worst_t = 0, worst_s = 0, worst_ar = 0;
  std::string first;
  auto fail = [&](const std::string& what) {
    if (failures++ == 0) first = what;
  };
  for (int i = 0; i < 10000; ++i) {
    Box a = test::rand_box(rng, -30, 30, 0.25), b = test::rand_box(rng, -30, 30, 0.25);
    switch (i % 5) {
      case 1: b = {a.x2, b.y1, a.x2 + b.width(), b.y2}; break;
      case 2: b = {a.x1 + 0.25 * a.width(), a.y1 + 0.125 * a.height(), a.x2 - 0.25 * a.width(), a.y2}; break;
      case 3: b = {a.x2 + 2, a.y2 + 1, a.x2 + 2 + b.width(), a.y2 + 1 + b.height()}; break;
      case 4: b = a; break;
      default: break;
    }
    const auto m = iou_metrics(a, b);
    const bool equal = a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2;
    for (double v : {m.iou, m.giou, m.diou, m.ciou})
      if ((v == 1.0) != equal) fail("identity");
    if (m.giou > m.iou) fail("giou <= iou");
    if (m.diou > m.iou) fail("diou <= iou");
    const double dx = u(rng), dy = u(rng);
    const auto t = iou_metrics({a.x1 + dx, a.y1 + dy, a.x2 + dx, a.y2 + dy}, {b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy});
    for (double d : {t.iou - m.iou, t.giou - m.giou, t.diou - m.diou, t.ciou - m.ciou})
      worst_t = std::max(worst_t, std::abs(d));
    for (double s : {0.5, 3.0}) {
      const auto q = iou_metrics({a.x1 * s, a.y1 * s, a.x2 * s, a.y2 * s}, {b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s});
      for (double d : {q.iou - m.iou, q.giou - m.giou, q.diou - m.diou, q.ciou - m.ciou})
        worst_s = std::max(worst_s, std::abs(d));
    }
    const double k = 0.2 + std::abs(u(rng)) / 20;
    const Box c{b.x1, b.y1, b.x1 + a.width() * k, b.y1 + a.height() * k};
    const auto e = iou_metrics(a, c);
    worst_ar = std::max(worst_ar, std::abs(e.ciou - e.diou));
  }
  if (worst_t > 1e-12) fail("translation");
  if (worst_s > 1e-12) fail("scale");
  if (worst_ar > 1e-12) fail("equal aspect");
  std::string d = "10^4 pairs; translation " + fmt("%.1e", worst_t) + ", scale " + fmt("%.1e", worst_s) +
                  ", ciou-diou at equal aspect " + fmt("%.1e", worst_ar);
  if (failures) d += "; first failure: " + first;
  return {failures == 0, d};
}

// Criterion 4: head grids of the presets at 640.
Outcome head_grids() {
  auto grids = [](const std::string& preset) {
    ModelConfig c;
    c.neck_preset = preset;
    c.input_size = 640;
    std::vector<std::int64_t> g;
    for (const auto& row : summarize(c).rows)
      if (row.section == "head") g.push_back(row.shape.height * 1000 + row.shape.width);
    return g;
  };
  const auto bgf = grids("bgf"), base = grids("fpn-panet");
  const bool ok = bgf == std::vector<std::int64_t>{160160, 80080, 40040, 20020} && base.size() == 3 &&
                  base == std::vector<std::int64_t>{80080, 40040, 20020};
  return {ok, "bgf " + std::to_string(bgf.size()) + " grids (160/80/40/20), fpn-panet " + std::to_string(base.size())};
}

// Criterion 5: NMS and matcher against references; AP hand cases.
Outcome nms_matcher() {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  int nms_bad = 0, match_bad = 0, enum_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(u(rng) * 50);
    std::vector<Detection> dets;
    std::vector<GroundTruth> gts;
    for (int i = 0; i < n; ++i) {
      dets.push_back({test::rand_box(rng, 0, 80, 3), std::round(u(rng) * 20) / 20, static_cast<int>(u(rng) * 2), 0});
      gts.push_back({test::rand_box(rng, 0, 80, 3), 0, 0});
    }
    const double thr = 0.3 + 0.4 * u(rng);
    const auto got = nms(dets, thr), want = test::greedy_nms_oracle(dets, thr);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].score == want[i].score && got[i].box.x1 == want[i].box.x1 && got[i].box.y1 == want[i].box.y1;
    nms_bad += !same;
    // Sequential reference for up to 50 boxes, taken in score order.
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dets[a].score > dets[b].score; });
    std::vector<bool> ref(dets.size(), false), used(gts.size(), false);
    for (auto i : order) {
      int arg = -1;
      double best = -1;
      for (std::size_t g = 0; g < gts.size(); ++g)
        if (!used[g] && box_iou(dets[i].box, gts[g].box) > best) best = box_iou(dets[i].box, gts[g].box), arg = static_cast<int>(g);
      if (arg >= 0 && best >= 0.5) used[static_cast<std::size_t>(arg)] = true, ref[i] = true;
    }
    match_bad += match_detections(dets, gts, 0.5) != ref;
    // Exhaustive enumeration on small slices.
    std::vector<Detection> sd(dets.begin(), dets.begin() + std::min(n, 5));
    std::vector<GroundTruth> sg(gts.begin(), gts.begin() + std::min(n, 5));
    for (auto& d : sd) d.score = u(rng);
    enum_bad += match_detections(sd, sg, 0.3) != test::brute_force_match(sd, sg, 0.3);
  }
  const bool hand = *average_precision({true, false}, {0.9, 0.8}, 1) == 1.0 &&
                    *average_precision({false, true}, {0.9, 0.8}, 1) == 0.5;
  const bool ok = nms_bad == 0 && match_bad == 0 && enum_bad == 0 && hand;
  return {ok, "200 instances <= 50 boxes: nms mismatches " + std::to_string(nms_bad) + ", matcher " +
                  std::to_string(match_bad) + ", enumeration " + std::to_string(enum_bad) +
                  "; AP [TP,FP]=1.0 [FP,TP]=0.5 " + (hand ? "exact" : "wrong")};
}

// Criterion 6: DFL decode.
Outcome dfl_decode_check() {
  const std::int64_t reg_max = 16, bins = 17;
  NdTensor<double> delta({bins, 4 * bins}, -1000.0);
  for (std::int64_t a = 0; a < bins; ++a)
    for (std::int64_t s = 0; s < 4; ++s) delta[a * 4 * bins + s * bins + a] = 0.0;
  const auto d = dfl_decode(delta, reg_max);
  bool exact = true;
  for (std::int64_t a = 0; a < bins; ++a)
    for (std::int64_t s = 0; s < 4; ++s) exact = exact && d.at({a, s}) == static_cast<double>(a);
  const auto r = dfl_decode(test::rand_tensor({5000, 4 * bins}, 3, -30, 30), reg_max);
  bool bounded = true;
  for (double v : r.data()) bounded = bounded && v >= 0.0 && v <= static_cast<double>(reg_max);
  return {exact && bounded, std::string("delta decode ") + (exact ? "exact" : "inexact") + " for all 17 bins; 20000 random sides " +
                                (bounded ? "within" : "outside") + " [0, 16]"};
}

std::uint64_t tree_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.string() + '\n' + read_text_file(root / f);
  return test::fnv1a(all);
}

const DatasetDescriptor& blob_dataset(const fs::path& work) {
  static std::optional<DatasetDescriptor> ds;
  if (!ds) {
    SyntheticSpec spec;  // 128x128
    ds = gen_synthetic(spec, {200, 50, 0}, work / "blobs");
  }
  return *ds;
}

// Criterion 7: 200-step toy training reaches the frozen mAP50 threshold.
Outcome toy_training(const fs::path& work) {
  constexpr double kThreshold = 0.8;
  const auto t0 = std::chrono::steady_clock::now();
  const auto& ds = blob_dataset(work);
  TrainConfig tc;
  tc.steps = 200;
  const auto r = train_toy(toy_model_config(), tc, ds);
  const auto e = evaluate_checkpoint(r.checkpoint, ds, "val");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double l0 = r.log.front().loss.total, l1 = r.log.back().loss.total;
  const bool ok = e.report.map50 >= kThreshold && l1 < l0 / 2 && secs < 300;
  return {ok, "val mAP50 " + fmt("%.4f", e.report.map50) + " (threshold 0.8), loss " + fmt("%.3f", l0) + " -> " +
                  fmt("%.3f", l1) + ", " + fmt("%.1f", secs) + " s incl. data generation (limit 300)"};
}

// Criterion 8: Br35H numbers are out of reach; the evaluator reproduces them from an engineered curve.
Outcome table_fixture_check() {
  const auto fx = test::table_fixture();
  const auto r = map_summary(fx.dets, fx.gts);
  const bool ok = std::abs(r.precision - 0.919) <= 0.001 && std::abs(r.recall - 0.926) <= 0.001 &&
                  std::abs(r.map50 - 0.974) <= 0.001 && std::abs(r.map50_95 - 0.653) <= 0.001;
  return {ok, "Br35H mAP50 0.974 needs full-scale training on the external dataset and is not reproduced here; "
              "engineered fixture gives P " + fmt("%.4f", r.precision) + " R " + fmt("%.4f", r.recall) + " mAP50 " +
                  fmt("%.4f", r.map50) + " mAP50:95 " + fmt("%.4f", r.map50_95) + " (target 0.919/0.926/0.974/0.653 +-0.001)"};
}

bool well_formed_table(const std::string& table, std::size_t rows) {
  std::istringstream is(table);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  if (lines.size() != rows + 2) return false;
  const auto bars = std::count(lines[0].begin(), lines[0].end(), '|');
  for (const auto& l : lines)
    if (l.empty() || l.front() != '|' || l.back() != '|' || std::count(l.begin(), l.end(), '|') != bars) return false;
  return lines[1].find_first_not_of("|-") == std::string::npos;
}

// Criterion 9: ablation sweeps over all three axes.
Outcome ablation_smoke(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& ds = blob_dataset(work);
  bool ok = true;
  std::string d;
  const std::pair<AblationAxis, std::size_t> axes[] = {
      {AblationAxis::Attention, 5}, {AblationAxis::Neck, 3}, {AblationAxis::Loss, 6}};
  for (const auto& [axis, n] : axes) {
    AblationOptions opt;
    opt.axis = axis;
    opt.train.steps = 20;
    const auto r = run_ablation(opt, ds);
    bool finite = r.rows.size() == n;
    for (const auto& row : r.rows)
      finite = finite && row.finite && std::isfinite(row.initial_loss) && std::isfinite(row.final_loss);
    const bool table = well_formed_table(ablation_table(r), n) && ablation_to_json(r)["rows"].size() == n;
    ok = ok && finite && table;
    d += std::string(ablation_axis_name(axis)) + " " + std::to_string(r.rows.size()) + " rows" +
         (finite ? "" : " (non-finite)") + (table ? "" : " (bad table)") + ", ";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ok = ok && secs < 600;
  return {ok, d + fmt("%.1f", secs) + " s (limit 600)"};
}

int run_cli(const std::string& args) {
  const std::string cmd = "\"" BGF_CLI_PATH "\" " + args + " > /dev/null";
  return std::system(cmd.c_str());
}

// Criterion 10: gen-data -> train -> eval twice at 64-bit.
Outcome determinism(const fs::path& work) {
  std::vector<std::uint64_t> hashes;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = work / "pipeline";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = (dir / "data").string();
    if (run_cli("gen-data --out " + d + " --seed 13 --train 20 --val 10") != 0 ||
        run_cli("train --dataset " + d + " --seed 13 --steps 10 --precision f64 --out " + (dir / "model.bgf").string()) != 0 ||
        run_cli("eval --dataset " + d + " --checkpoint " + (dir / "model.bgf").string() + " --out " +
                (dir / "report.json").string()) != 0) {
      return {false, "pipeline command failed in run " + std::to_string(run)};
    }
    hashes.push_back(tree_hash(dir));
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hashes[0]));
  return {hashes[0] == hashes[1], std::string("dataset, checkpoint, loss log and report hash ") + buf +
                                      (hashes[0] == hashes[1] ? " in both runs" : " differs between runs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::vector<int> only;
  std::string work_arg;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--work", work_arg, "Scratch directory (default: a fresh temp directory)");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = work_arg.empty() ? fs::temp_directory_path() / ("bgf_acceptance_" + std::to_string(::getpid()))
                                         : fs::path(work_arg);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"BRA equals dense attention", bra_oracle},
      {"gradient suites", gradient_suite},
      {"IoU algebra", iou_algebra},
      {"head grids at 640", head_grids},
      {"NMS and matcher oracles", nms_matcher},
      {"DFL decode", dfl_decode_check},
      {"toy training", [&] { return toy_training(work); }},
      {"Br35H target profile", table_fixture_check},
      {"ablation harness", [&] { return ablation_smoke(work); }},
      {"pipeline determinism", [&] { return determinism(work); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  if (work_arg.empty()) fs::remove_all(work);
  return failed == 0 ? 0 : 1;
}
