#include "bgf/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

namespace bgf {

std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                   double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> tp(dets.size(), false), used(gts.size(), false);
  for (std::size_t i : order) {
    double best = -1;
    std::size_t arg = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = box_iou(dets[i].box, gts[g].box);
      if (iou > best) {
        best = iou;
        arg = g;
      }
    }
    if (arg < gts.size() && best >= iou_thresh) {
      used[arg] = true;
      tp[i] = true;
    }
  }
  return tp;
}

std::optional<double> average_precision(const std::vector<bool>& tp, const std::vector<double>& scores,
                                        std::size_t num_gt) {
  if (tp.size() != scores.size()) throw ShapeError("average_precision: flags and scores differ in length");
  if (num_gt == 0) return tp.empty() ? std::nullopt : std::optional<double>(0.0);
  if (tp.empty()) return 0.0;
  std::vector<std::size_t> order(tp.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> prec(order.size()), rec(order.size());
  std::size_t ntp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    ntp += tp[order[i]] ? 1 : 0;
    prec[i] = static_cast<double>(ntp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(ntp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = prec.size() - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = static_cast<double>(k) / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), r);
    if (it != rec.end()) sum += prec[static_cast<std::size_t>(it - rec.begin())];
  }
  return sum / 101.0;
}

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(static_cast<double>(50 + 5 * i) / 100.0);
  return t;
}

namespace {

auto box_key(const Box& b) { return std::make_tuple(b.x1, b.y1, b.x2, b.y2); }

}  // namespace

MetricsReport map_summary(const std::vector<Detection>& dets_in, const std::vector<GroundTruth>& gts_in) {
  // Canonical orders make the result independent of insertion order.
  std::vector<Detection> dets = dets_in;
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::make_tuple(a.image_id, a.class_id, box_key(a.box)) <
           std::make_tuple(b.image_id, b.class_id, box_key(b.box));
  });
  std::vector<GroundTruth> gts = gts_in;
  std::stable_sort(gts.begin(), gts.end(), [](const GroundTruth& a, const GroundTruth& b) {
    return std::make_tuple(a.image_id, a.class_id, box_key(a.box)) <
           std::make_tuple(b.image_id, b.class_id, box_key(b.box));
  });

  const std::vector<double> thr = coco_iou_thresholds();
  using Key = std::pair<int, int>;  // (image, class)
  std::map<Key, std::vector<std::size_t>> det_groups, gt_groups;
  for (std::size_t i = 0; i < dets.size(); ++i) det_groups[{dets[i].image_id, dets[i].class_id}].push_back(i);
  for (std::size_t i = 0; i < gts.size(); ++i) gt_groups[{gts[i].image_id, gts[i].class_id}].push_back(i);

  std::vector<std::vector<bool>> flags(thr.size(), std::vector<bool>(dets.size(), false));
  std::vector<std::pair<Key, const std::vector<std::size_t>*>> groups;
  for (const auto& [k, v] : det_groups) groups.emplace_back(k, &v);
  std::vector<std::vector<std::vector<bool>>> group_flags(groups.size());
#pragma omp parallel for schedule(dynamic) if (groups.size() > 64)
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& idx = *groups[gi].second;
    std::vector<Detection> d;
    for (std::size_t i : idx) d.push_back(dets[i]);
    std::vector<GroundTruth> g;
    if (auto it = gt_groups.find(groups[gi].first); it != gt_groups.end())
      for (std::size_t i : it->second) g.push_back(gts[i]);
    for (std::size_t t = 0; t < thr.size(); ++t) group_flags[gi].push_back(match_detections(d, g, thr[t]));
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& idx = *groups[gi].second;
    for (std::size_t t = 0; t < thr.size(); ++t)
      for (std::size_t j = 0; j < idx.size(); ++j) flags[t][idx[j]] = group_flags[gi][t][j];
  }

  std::set<int> class_ids;
  for (const auto& d : dets) class_ids.insert(d.class_id);
  for (const auto& g : gts) class_ids.insert(g.class_id);

  MetricsReport rep;
  rep.map_per_threshold.assign(thr.size(), 0.0);
  std::vector<std::size_t> defined_per_thr(thr.size(), 0);
  std::set<double, std::greater<>> confs;
  struct Cum {
    std::vector<double> score;
    std::vector<std::size_t> tp;  // cumulative at 0.50
  };
  std::vector<Cum> cums;
  for (int c : class_ids) {
    ClassMetrics cm;
    cm.class_id = c;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (dets[i].class_id == c) idx.push_back(i);
    for (const auto& g : gts) cm.num_gt += g.class_id == c ? 1 : 0;
    cm.num_det = idx.size();
    std::vector<double> scores;
    for (std::size_t i : idx) scores.push_back(dets[i].score);
    double ap_sum = 0;
    bool defined = true;
    for (std::size_t t = 0; t < thr.size(); ++t) {
      std::vector<bool> f;
      for (std::size_t i : idx) f.push_back(flags[t][i]);
      const auto ap = average_precision(f, scores, cm.num_gt);
      if (!ap) {
        defined = false;
        continue;
      }
      if (t == 0) cm.ap50 = ap;
      ap_sum += *ap;
      rep.map_per_threshold[t] += *ap;
      ++defined_per_thr[t];
    }
    if (defined) cm.ap50_95 = ap_sum / static_cast<double>(thr.size());
    Cum cu;
    std::size_t ntp = 0;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      ntp += flags[0][idx[j]] ? 1 : 0;
      cu.score.push_back(scores[j]);
      cu.tp.push_back(ntp);
      confs.insert(scores[j]);
      if (j + 1 == idx.size() || scores[j + 1] != scores[j]) {
        const double p = static_cast<double>(ntp) / static_cast<double>(j + 1);
        const double r = cm.num_gt ? static_cast<double>(ntp) / static_cast<double>(cm.num_gt) : 0.0;
        cm.pr_curve.push_back({scores[j], p, r});
      }
    }
    cums.push_back(std::move(cu));
    rep.classes.push_back(std::move(cm));
  }
  for (std::size_t t = 0; t < thr.size(); ++t) {
    if (defined_per_thr[t]) rep.map_per_threshold[t] /= static_cast<double>(defined_per_thr[t]);
  }
  double s50 = 0, s5095 = 0;
  std::size_t n50 = 0, n5095 = 0;
  for (const auto& cm : rep.classes) {
    if (cm.ap50) s50 += *cm.ap50, ++n50;
    if (cm.ap50_95) s5095 += *cm.ap50_95, ++n5095;
  }
  rep.map50 = n50 ? s50 / static_cast<double>(n50) : 0.0;
  rep.map50_95 = n5095 ? s5095 / static_cast<double>(n5095) : 0.0;

  // Shared confidence maximizing the mean F1 over classes with ground truth.
  auto pr_at = [&](std::size_t ci, double conf) {
    const Cum& cu = cums[ci];
    const auto k = static_cast<std::size_t>(
        std::upper_bound(cu.score.begin(), cu.score.end(), conf, std::greater<>()) - cu.score.begin());
    const std::size_t ngt = rep.classes[ci].num_gt;
    const double tp = k ? static_cast<double>(cu.tp[k - 1]) : 0.0;
    const double p = k ? tp / static_cast<double>(k) : 0.0;
    const double r = ngt ? tp / static_cast<double>(ngt) : 0.0;
    return std::make_pair(p, r);
  };
  double best_f1 = -1;
  for (double conf : confs) {
    double f1 = 0;
    std::size_t n = 0;
    for (std::size_t ci = 0; ci < rep.classes.size(); ++ci) {
      if (!rep.classes[ci].num_gt) continue;
      const auto [p, r] = pr_at(ci, conf);
      f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
      ++n;
    }
    f1 = n ? f1 / static_cast<double>(n) : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      rep.best_f1_confidence = conf;
    }
  }
  double ps = 0, rs = 0;
  std::size_t n = 0;
  for (std::size_t ci = 0; ci < rep.classes.size(); ++ci) {
    auto& cm = rep.classes[ci];
    if (!confs.empty()) std::tie(cm.precision, cm.recall) = pr_at(ci, rep.best_f1_confidence);
    if (cm.num_gt) ps += cm.precision, rs += cm.recall, ++n;
  }
  rep.precision = n ? ps / static_cast<double>(n) : 0.0;
  rep.recall = n ? rs / static_cast<double>(n) : 0.0;
  return rep;
}

nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"class_id", c.class_id},
                       {"num_gt", c.num_gt},
                       {"num_det", c.num_det},
                       {"precision", c.precision},
                       {"recall", c.recall},
                       {"ap50", c.ap50 ? nlohmann::json(*c.ap50) : nlohmann::json(nullptr)},
                       {"ap50_95", c.ap50_95 ? nlohmann::json(*c.ap50_95) : nlohmann::json(nullptr)}});
  }
  return {{"precision", r.precision},
          {"recall", r.recall},
          {"map50", r.map50},
          {"map50_95", r.map50_95},
          {"best_f1_confidence", r.best_f1_confidence},
          {"map_per_threshold", r.map_per_threshold},
          {"classes", classes}};
}

std::string metrics_table(const MetricsReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %8s %8s %10s %10s %10s %10s\n", "class", "gts", "dets", "precision", "recall",
                "mAP50", "mAP50-95");
  os << line;
  for (const auto& c : r.classes) {
    std::snprintf(line, sizeof line, "%-8d %8zu %8zu %10.4f %10.4f %10.4f %10.4f\n", c.class_id, c.num_gt, c.num_det,
                  c.precision, c.recall, c.ap50.value_or(0.0), c.ap50_95.value_or(0.0));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-8s %8s %8s %10.4f %10.4f %10.4f %10.4f\n", "all", "", "", r.precision, r.recall,
                r.map50, r.map50_95);
  os << line;
  return os.str();
}

}  // namespace bgf
