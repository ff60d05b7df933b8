// Copyright (c) 2026 the tan authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "tan/boxes.hpp"

namespace tan {

/// A decoded detection.
struct Detection {
  BoundingBox box;
  double confidence = 0;
  int class_id = 0;
};

struct MatchResult {
  int tp = 0, fp = 0, fn = 0;
  // (confidence, is_tp), in the greedy processing order (confidence desc).
  std::vector<std::pair<double, bool>> flags;
};

/// Greedy matching: detections in confidence-descending order each claim the
/// highest-IoU unmatched ground truth with IoU >= iou_thresh.
inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<BoundingBox>& gts,
                                    double iou_thresh) {
  TAN_CHECK(iou_thresh > 0.0 && iou_thresh <= 1.0, "match: bad iou threshold");
  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<bool> gt_used(gts.size(), false);
  MatchResult r;
  r.flags.reserve(dets.size());
  for (size_t oi : order) {
    const Detection& d = dets[oi];
    double best = 0.0;
    int best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      double v = iou(d.box, gts[g]);
      if (v > best) {
        best = v;
        best_g = int(g);
      }
    }
    bool is_tp = best_g >= 0 && best >= iou_thresh;
    if (is_tp) {
      gt_used[size_t(best_g)] = true;
      r.tp++;
    } else {
      r.fp++;
    }
    r.flags.emplace_back(d.confidence, is_tp);
  }
  r.fn = int(gts.size()) - r.tp;
  return r;
}

/// Recall = TP/(TP+FN), Precision = TP/(TP+FP); 0/0 maps to 0.
inline std::pair<double, double> precision_recall(const MatchResult& m) {
  double prec = (m.tp + m.fp) > 0 ? double(m.tp) / double(m.tp + m.fp) : 0.0;
  double rec = (m.tp + m.fn) > 0 ? double(m.tp) / double(m.tp + m.fn) : 0.0;
  return {prec, rec};
}

/// Average precision from confidence-ordered TP flags: all-points
/// interpolation with the monotone precision envelope.
inline double average_precision(std::vector<std::pair<double, bool>> flags,
                                int total_gt) {
  TAN_CHECK(total_gt >= 0, "average_precision: negative gt count");
  if (total_gt == 0) return flags.empty() ? 1.0 : 0.0;
  if (flags.empty()) return 0.0;
  std::stable_sort(flags.begin(), flags.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  size_t n = flags.size();
  std::vector<double> prec(n), rec(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    if (flags[i].second) tp++;
    prec[i] = double(tp) / double(i + 1);
    rec[i] = double(tp) / double(total_gt);
  }
  // monotone envelope from the right
  for (size_t i = n - 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
  double ap = 0.0, prev_r = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (rec[i] > prev_r) {
      ap += (rec[i] - prev_r) * prec[i];
      prev_r = rec[i];
    }
  }
  return ap;
}

struct MetricsReport {
  double precision = 0;
  double recall = 0;
  std::map<double, double> ap_per_threshold;
  double map50 = 0;
  double map5095 = 0;
  std::vector<std::pair<double, double>> pr_curve;  // (recall, precision)
};

/// The ten COCO-style IoU thresholds 0.50, 0.55, ..., 0.95 built from
/// integer arithmetic so threshold comparisons behave predictably.
inline std::vector<double> map_iou_thresholds() {
  std::vector<double> ts;
  for (int k = 0; k < 10; ++k) ts.push_back(double(50 + 5 * k) / 100.0);
  return ts;
}

/// Dataset-level evaluation. Detections and ground truths are aligned by
/// image id; AP pools flags over all images. The reported single
/// precision/recall row uses IoU 0.5 and conf_cutoff.
inline MetricsReport evaluate(
    const std::map<std::string, std::vector<Detection>>& dets_per_image,
    const std::map<std::string, std::vector<BoundingBox>>& gts_per_image,
    double conf_cutoff = 0.25) {
  for (const auto& [id, d] : dets_per_image)
    TAN_CHECK(gts_per_image.count(id), "evaluate: detection image id '" << id
                                           << "' missing from ground truth");
  MetricsReport rep;
  int total_gt = 0;
  for (const auto& [id, g] : gts_per_image) total_gt += int(g.size());

  static const std::vector<Detection> kNoDets;
  for (double t : map_iou_thresholds()) {
    std::vector<std::pair<double, bool>> flags;
    for (const auto& [id, gts] : gts_per_image) {
      auto it = dets_per_image.find(id);
      const auto& dets = it == dets_per_image.end() ? kNoDets : it->second;
      MatchResult m = match_detections(dets, gts, t);
      flags.insert(flags.end(), m.flags.begin(), m.flags.end());
    }
    double ap = average_precision(flags, total_gt);
    rep.ap_per_threshold[t] = ap;
  }
  rep.map50 = rep.ap_per_threshold.at(0.5);
  double s = 0;
  for (const auto& [t, ap] : rep.ap_per_threshold) s += ap;
  rep.map5095 = s / double(rep.ap_per_threshold.size());

  // operating-point precision/recall at IoU 0.5 with the confidence cutoff
  int tp = 0, fp = 0, fn = 0;
  for (const auto& [id, gts] : gts_per_image) {
    auto it = dets_per_image.find(id);
    std::vector<Detection> kept;
    if (it != dets_per_image.end())
      for (const auto& d : it->second)
        if (d.confidence >= conf_cutoff) kept.push_back(d);
    MatchResult m = match_detections(kept, gts, 0.5);
    tp += m.tp;
    fp += m.fp;
    fn += m.fn;
  }
  MatchResult agg;
  agg.tp = tp;
  agg.fp = fp;
  agg.fn = fn;
  auto [prec, rec] = precision_recall(agg);
  rep.precision = prec;
  rep.recall = rec;

  // PR curve at IoU 0.5 over all pooled detections
  {
    std::vector<std::pair<double, bool>> flags;
    for (const auto& [id, gts] : gts_per_image) {
      auto it = dets_per_image.find(id);
      const auto& dets = it == dets_per_image.end() ? kNoDets : it->second;
      MatchResult m = match_detections(dets, gts, 0.5);
      flags.insert(flags.end(), m.flags.begin(), m.flags.end());
    }
    std::stable_sort(flags.begin(), flags.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    int ctp = 0;
    for (size_t i = 0; i < flags.size(); ++i) {
      if (flags[i].second) ctp++;
      if (total_gt > 0)
        rep.pr_curve.emplace_back(double(ctp) / double(total_gt),
                                  double(ctp) / double(i + 1));
    }
  }
  return rep;
}

}  // namespace tan
