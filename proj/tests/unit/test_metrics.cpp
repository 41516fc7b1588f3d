// Detection metrics: IoU, greedy matching against an exhaustive-search
// oracle, 101-point AP with hand-derived pins, and the size-stratified suite.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "swindet/metrics.hpp"
#include "swindet/tensor.hpp"

using namespace swindet;
using Catch::Approx;

namespace {

// Search-based restatement of the matching rule: among every valid
// assignment of detections (score order) to distinct GTs-or-none, pick the
// lexicographically best outcome sequence, where a detection's outcome ranks
// matched above unmatched, higher IoU above lower, then lower GT index.
struct Outcome {
  bool matched = false;
  double iou_v = 0;
  int gt = -1;
};

bool outcome_better(const std::vector<Outcome>& a, const std::vector<Outcome>& b) {
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].matched != b[i].matched) return a[i].matched;
    if (a[i].matched) {
      if (a[i].iou_v != b[i].iou_v) return a[i].iou_v > b[i].iou_v;
      if (a[i].gt != b[i].gt) return a[i].gt < b[i].gt;
    }
  }
  return false;
}

void oracle_search(const std::vector<int>& order, const std::vector<Detection>& dets,
                   const std::vector<BBox>& gts, double thresh, size_t pos,
                   std::vector<char>& taken, std::vector<Outcome>& cur,
                   std::vector<Outcome>& best) {
  if (pos == order.size()) {
    if (best.empty() || outcome_better(cur, best)) best = cur;
    return;
  }
  const Detection& d = dets[static_cast<size_t>(order[pos])];
  for (size_t g = 0; g < gts.size(); ++g) {
    if (taken[g]) continue;
    const double v = iou(d.bbox, gts[g]);
    if (v < thresh) continue;
    taken[g] = 1;
    cur.push_back({true, v, static_cast<int>(g)});
    oracle_search(order, dets, gts, thresh, pos + 1, taken, cur, best);
    cur.pop_back();
    taken[g] = 0;
  }
  cur.push_back({});
  oracle_search(order, dets, gts, thresh, pos + 1, taken, cur, best);
  cur.pop_back();
}

std::vector<Outcome> oracle_match(const std::vector<Detection>& dets,
                                  const std::vector<BBox>& gts, double thresh) {
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return dets[size_t(a)].score > dets[size_t(b)].score; });
  std::vector<char> taken(gts.size(), 0);
  std::vector<Outcome> cur, best;
  oracle_search(order, dets, gts, thresh, 0, taken, cur, best);
  return best;
}

Detection det(double x1, double y1, double x2, double y2, double score) {
  Detection d;
  d.bbox = {x1, y1, x2, y2};
  d.score = score;
  return d;
}

}  // namespace

TEST_CASE("iou basics and the 1/7 pin") {
  const BBox a{0, 0, 2, 2};
  REQUIRE(iou(a, a) == 1.0);
  REQUIRE(iou(a, BBox{5, 5, 7, 7}) == 0.0);
  REQUIRE(iou(a, BBox{1, 1, 3, 3}) == Approx(1.0 / 7).margin(1e-15));
}

TEST_CASE("greedy matching basics") {
  const std::vector<BBox> gts = {{0, 0, 10, 10}};
  auto single = match_greedy({det(0, 0, 10, 10, 0.8)}, gts, 0.5);
  REQUIRE(single.entries.size() == 1);
  REQUIRE(single.entries[0].tp);
  REQUIRE(single.unmatched_gt == 0);

  auto duo = match_greedy({det(0, 0, 10, 10, 0.6), det(1, 1, 10, 10, 0.9)}, gts, 0.5);
  REQUIRE(duo.entries[0].score == 0.9);  // higher score matches first
  REQUIRE(duo.entries[0].tp);
  REQUIRE_FALSE(duo.entries[1].tp);
}

TEST_CASE("greedy matching equals the exhaustive oracle on random instances") {
  Rng rng(201);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<BBox> gts;
    const int ng = static_cast<int>(rng.uniform_int(1, 5));
    for (int g = 0; g < ng; ++g) {
      const double x = 30 * rng.uniform(), y = 30 * rng.uniform();
      const double w = 4 + 10 * rng.uniform(), h = 4 + 10 * rng.uniform();
      gts.push_back({x, y, x + w, y + h});
    }
    std::vector<Detection> dets;
    const int nd = static_cast<int>(rng.uniform_int(1, 7));
    for (int d = 0; d < nd; ++d) {
      const BBox& base = gts[static_cast<size_t>(rng.uniform_int(0, ng - 1))];
      const double jx = 6 * (rng.uniform() - 0.5), jy = 6 * (rng.uniform() - 0.5);
      dets.push_back(det(base.x1 + jx, base.y1 + jy, base.x2 + jx, base.y2 + jy,
                         rng.uniform()));
    }
    auto greedy = match_greedy(dets, gts, 0.5);
    auto best = oracle_match(dets, gts, 0.5);
    REQUIRE(greedy.entries.size() == best.size());
    int oracle_matched = 0;
    for (size_t i = 0; i < best.size(); ++i) {
      REQUIRE(greedy.entries[i].tp == best[i].matched);
      if (best[i].matched) {
        REQUIRE(greedy.entries[i].gt_index == best[i].gt);
        ++oracle_matched;
      }
    }
    REQUIRE(greedy.unmatched_gt == ng - oracle_matched);
  }
}

TEST_CASE("average precision pins") {
  REQUIRE(average_precision({1}, 1) == Approx(1.0).margin(1e-12));
  REQUIRE(average_precision({0}, 1) == 0.0);
  REQUIRE(average_precision({}, 3) == 0.0);
  REQUIRE(average_precision({1, 1}, 0) == 0.0);

  // [TP, FP, TP] with 2 GT: precision 1 up to recall .5, then 2/3 -> 253/303.
  REQUIRE(average_precision({1, 0, 1}, 2) == Approx(253.0 / 303).margin(1e-12));

  std::vector<PRPoint> curve;
  average_precision({1, 0, 1}, 2, &curve);
  REQUIRE(curve.size() == 3);
  REQUIRE(curve[0].recall == Approx(0.5));
  REQUIRE(curve[0].precision == Approx(1.0));
  REQUIRE(curve[2].recall == Approx(1.0));
  REQUIRE(curve[2].precision == Approx(2.0 / 3));
}

TEST_CASE("relabeling an FP as TP never lowers AP") {
  Rng rng(202);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<char> flags(12);
    for (auto& f : flags) f = rng.uniform() < 0.5 ? 1 : 0;
    const double base = average_precision(flags, 6);
    for (size_t i = 0; i < flags.size(); ++i) {
      if (flags[i]) continue;
      std::vector<char> up = flags;
      up[i] = 1;
      REQUIRE(average_precision(up, 6) >= base - 1e-12);
    }
  }
}

TEST_CASE("coco_suite: perfect detector scores 1 everywhere") {
  Rng rng(203);
  std::vector<std::vector<BBox>> gts(3);
  std::vector<std::vector<Detection>> dets(3);
  for (int img = 0; img < 3; ++img) {
    for (int b = 0; b < 2 + img; ++b) {
      const double x = 40 * b + 10 * rng.uniform(), y = 30 * b + 10 * rng.uniform();
      BBox box{x, y, x + 12, y + 15};  // area 180 < 1024: small
      gts[size_t(img)].push_back(box);
      Detection d;
      d.bbox = box;
      d.score = 0.5 + 0.4 * rng.uniform();
      dets[size_t(img)].push_back(d);
    }
  }
  auto rep = coco_suite(dets, gts);
  REQUIRE(rep.ap == Approx(1.0).margin(1e-12));
  REQUIRE(rep.ap50 == Approx(1.0).margin(1e-12));
  REQUIRE(rep.ap75 == Approx(1.0).margin(1e-12));
  REQUIRE(rep.ap_s == Approx(1.0).margin(1e-12));
  REQUIRE(rep.n_images == 3);
  REQUIRE(rep.n_gt == 9);
  REQUIRE(rep.per_threshold.size() == 10);
  REQUIRE(rep.per_threshold[0].thresh == Approx(0.5));
}

TEST_CASE("coco_suite: no detections scores 0") {
  std::vector<std::vector<BBox>> gts = {{BBox{0, 0, 10, 10}}};
  std::vector<std::vector<Detection>> dets = {{}};
  auto rep = coco_suite(dets, gts);
  REQUIRE(rep.ap == 0.0);
  REQUIRE(rep.ap50 == 0.0);
  REQUIRE(rep.ap_s == 0.0);
}

TEST_CASE("ap_s ignores detections that only match large objects") {
  // One large GT (detected) + one small GT (missed).
  std::vector<std::vector<BBox>> gts = {{BBox{0, 0, 50, 50}, BBox{60, 60, 70, 70}}};
  std::vector<std::vector<Detection>> dets = {{det(0, 0, 50, 50, 0.9)}};
  auto rep = coco_suite(dets, gts);
  REQUIRE(rep.ap_s == 0.0);
  REQUIRE(rep.ap50 > 0.0);
  // The large-only detection is dropped from small FP counting, so the
  // small AP is 0 because of the miss, not polluted by a spurious FP.
}

TEST_CASE("coco_suite is invariant to image order") {
  Rng rng(204);
  std::vector<std::vector<BBox>> gts(4);
  std::vector<std::vector<Detection>> dets(4);
  for (int img = 0; img < 4; ++img) {
    for (int b = 0; b < 3; ++b) {
      const double x = 25 * b + 8 * rng.uniform(), y = 20 * b + 8 * rng.uniform();
      BBox box{x, y, x + 8 + 6 * rng.uniform(), y + 8 + 6 * rng.uniform()};
      gts[size_t(img)].push_back(box);
      const double jx = 3 * (rng.uniform() - 0.5), jy = 3 * (rng.uniform() - 0.5);
      dets[size_t(img)].push_back(det(box.x1 + jx, box.y1 + jy, box.x2 + jx,
                                      box.y2 + jy, rng.uniform()));
    }
    dets[size_t(img)].push_back(det(100, 100, 110, 110, rng.uniform()));  // stray FP
  }
  auto base = coco_suite(dets, gts);
  // ap is a mean, so it cannot exceed the best single threshold.
  double best_t = 0;
  for (const auto& pr : base.per_threshold) best_t = std::max(best_t, pr.ap);
  REQUIRE(base.ap <= best_t + 1e-12);

  std::vector<size_t> perm = {2, 0, 3, 1};
  std::vector<std::vector<BBox>> g2;
  std::vector<std::vector<Detection>> d2;
  for (size_t p : perm) {
    g2.push_back(gts[p]);
    d2.push_back(dets[p]);
  }
  auto shuffled = coco_suite(d2, g2);
  REQUIRE(shuffled.ap == Approx(base.ap).margin(1e-15));
  REQUIRE(shuffled.ap50 == Approx(base.ap50).margin(1e-15));
  REQUIRE(shuffled.ap75 == Approx(base.ap75).margin(1e-15));
  REQUIRE(shuffled.ap_s == Approx(base.ap_s).margin(1e-15));
}
