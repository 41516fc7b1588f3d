#pragma once

// COCO-style detection metrics: greedy IoU matching, 101-point interpolated
// average precision, and the size-stratified AP suite (AP, AP50, AP75, AP_S).

#include <algorithm>
#include <cstdint>
#include <vector>

#include "swindet/boxes.hpp"

namespace swindet {

// Area threshold (32^2 px) below which a ground-truth object counts as small.
inline constexpr double kSmallAreaMax = 1024.0;

// One detection's outcome after matching, in score-sorted order.
struct MatchEntry {
  int det_index = -1;  // index into the input detection list
  double score = 0;
  bool tp = false;
  int gt_index = -1;  // matched ground-truth index, -1 if none
};

struct MatchResult {
  std::vector<MatchEntry> entries;  // score descending, stable by input index
  int unmatched_gt = 0;
};

// Greedy matching: detections in score order each claim the unmatched GT with
// the highest IoU >= thresh; IoU ties resolve to the lowest GT index.
inline MatchResult match_greedy(const std::vector<Detection>& dets,
                                const std::vector<BBox>& gts, double thresh) {
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[static_cast<size_t>(a)].score > dets[static_cast<size_t>(b)].score;
  });

  MatchResult res;
  std::vector<char> taken(gts.size(), 0);
  for (int di : order) {
    const Detection& d = dets[static_cast<size_t>(di)];
    int best_gt = -1;
    double best_iou = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(d.bbox, gts[g]);
      if (v >= thresh && v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    MatchEntry e;
    e.det_index = di;
    e.score = d.score;
    if (best_gt >= 0) {
      taken[static_cast<size_t>(best_gt)] = 1;
      e.tp = true;
      e.gt_index = best_gt;
    }
    res.entries.push_back(e);
  }
  res.unmatched_gt = 0;
  for (char t : taken) res.unmatched_gt += t ? 0 : 1;
  return res;
}

struct PRPoint {
  double recall = 0, precision = 0;
};

// flags must already be in global score-descending order across images.
// 101-point interpolation: AP = mean over recalls {0, 0.01, ..., 1.00} of the
// max precision at any recall >= that grid point. Zero ground truth -> 0.
inline double average_precision(const std::vector<char>& flags, int64_t n_gt,
                                std::vector<PRPoint>* curve = nullptr) {
  if (curve) curve->clear();
  if (n_gt <= 0 || flags.empty()) return 0.0;
  std::vector<double> prec(flags.size()), rec(flags.size());
  int64_t tp = 0;
  for (size_t i = 0; i < flags.size(); ++i) {
    tp += flags[i] ? 1 : 0;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    if (curve) curve->push_back({rec[i], prec[i]});
  }
  // Running max of precision from the right: max precision at recall >= rec[i].
  std::vector<double> pmax(prec);
  for (size_t i = pmax.size() - 1; i > 0; --i)
    pmax[i - 1] = std::max(pmax[i - 1], pmax[i]);

  double acc = 0;
  for (int r = 0; r <= 100; ++r) {
    const double want = static_cast<double>(r) / 100.0;
    // First index whose recall reaches the grid point.
    size_t lo = 0, hi = rec.size();
    while (lo < hi) {
      const size_t mid = (lo + hi) / 2;
      if (rec[mid] >= want)
        hi = mid;
      else
        lo = mid + 1;
    }
    if (lo < rec.size()) acc += pmax[lo];
  }
  return acc / 101.0;
}

struct ThresholdPR {
  double thresh = 0;
  double ap = 0;
  std::vector<PRPoint> points;
};

struct APReport {
  double ap = 0, ap50 = 0, ap75 = 0, ap_s = 0;
  std::vector<ThresholdPR> per_threshold;  // all-size evaluation, 10 thresholds
  int64_t n_images = 0, n_gt = 0;
};

namespace detail {

struct GlobalFlag {
  double score;
  int image_id, det_index;
  char tp;
};

// Deterministic global ordering: score descending, then image id, then the
// detection's input index. Independent of image processing order.
inline void sort_flags(std::vector<GlobalFlag>& v) {
  std::sort(v.begin(), v.end(), [](const GlobalFlag& a, const GlobalFlag& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.det_index < b.det_index;
  });
}

// AP at one threshold over all images. When small_only is set, only GTs with
// area < kSmallAreaMax count; detections whose best remaining overlap is with
// an excluded (large) GT are dropped rather than counted as false positives.
inline double ap_at_threshold(const std::vector<std::vector<Detection>>& dets,
                              const std::vector<std::vector<BBox>>& gts,
                              double thresh, bool small_only,
                              std::vector<PRPoint>* curve = nullptr) {
  std::vector<GlobalFlag> all;
  int64_t n_gt = 0;
  for (size_t img = 0; img < dets.size(); ++img) {
    std::vector<BBox> counted, ignored;
    if (small_only) {
      for (const BBox& g : gts[img])
        (g.area() < kSmallAreaMax ? counted : ignored).push_back(g);
    } else {
      counted = gts[img];
    }
    n_gt += static_cast<int64_t>(counted.size());
    MatchResult m = match_greedy(dets[img], counted, thresh);
    for (const MatchEntry& e : m.entries) {
      if (!e.tp && small_only) {
        bool hits_ignored = false;
        for (const BBox& g : ignored)
          if (iou(dets[img][static_cast<size_t>(e.det_index)].bbox, g) >= thresh) {
            hits_ignored = true;
            break;
          }
        if (hits_ignored) continue;  // ignore, neither TP nor FP
      }
      all.push_back({e.score, static_cast<int>(img), e.det_index,
                     static_cast<char>(e.tp ? 1 : 0)});
    }
  }
  sort_flags(all);
  std::vector<char> flags;
  flags.reserve(all.size());
  for (const GlobalFlag& f : all) flags.push_back(f.tp);
  return average_precision(flags, n_gt, curve);
}

}  // namespace detail

inline APReport coco_suite(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<BBox>>& gts) {
  APReport rep;
  rep.n_images = static_cast<int64_t>(dets.size());
  for (const auto& g : gts) rep.n_gt += static_cast<int64_t>(g.size());

  double sum_ap = 0, sum_ap_s = 0;
  for (int i = 0; i < 10; ++i) {
    const double t = 0.5 + 0.05 * i;
    ThresholdPR pr;
    pr.thresh = t;
    pr.ap = detail::ap_at_threshold(dets, gts, t, false, &pr.points);
    sum_ap += pr.ap;
    sum_ap_s += detail::ap_at_threshold(dets, gts, t, true);
    if (i == 0) rep.ap50 = pr.ap;
    if (i == 5) rep.ap75 = pr.ap;
    rep.per_threshold.push_back(std::move(pr));
  }
  rep.ap = sum_ap / 10;
  rep.ap_s = sum_ap_s / 10;
  return rep;
}

}  // namespace swindet
