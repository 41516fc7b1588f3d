// Detection head: branch shapes and init, Gaussian target encoding, focal
// and L1 losses with hand-computed pins, and peak decoding.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "swindet/gradcheck.hpp"
#include "swindet/head.hpp"

using namespace swindet;
using Catch::Approx;

namespace {
using D64 = Tensor<double>;
}

TEST_CASE("head branches produce the hm/wh/off stack with a low-prior heatmap") {
  Rng rng(101);
  auto params = HeadParams<double>::init(32, rng);
  REQUIRE(params.hm.b2.value()[0] == Approx(-std::log(99.0)).margin(1e-12));

  D64 feat = D64::randn({32, 16, 16}, rng);
  auto out = head_forward(feat, params);
  REQUIRE(out.hm.shape() == Shape{1, 16, 16});
  REQUIRE(out.wh.shape() == Shape{2, 16, 16});
  REQUIRE(out.off.shape() == Shape{2, 16, 16});

  double mean = 0;
  for (double v : out.hm.value()) {
    REQUIRE(v >= 1e-4);
    REQUIRE(v <= 1 - 1e-4);
    mean += v;
  }
  mean /= static_cast<double>(out.hm.size());
  // Final-bias init puts the initial heatmap near the 1% prior.
  REQUIRE(mean == Approx(0.01).margin(0.005));
}

TEST_CASE("head branch passes finite differences") {
  Rng rng(102);
  auto params = HeadParams<double>::init(4, rng);
  D64 feat = D64::randn({4, 4, 4}, rng);
  feat.set_requires_grad();
  std::vector<std::pair<std::string, D64>> ps{{"feat", feat}};
  params.wh.for_each_param("wh", [&](const std::string& n, D64& t) { ps.emplace_back(n, t); });
  auto rep = grad_check<double>([&] { return sum(mul(head_forward(feat, params).wh,
                                                     head_forward(feat, params).wh)); },
                                ps);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("gaussian_radius keeps IoU above min_overlap in all three scenarios") {
  auto scenario_ious = [](double h, double w, double r) {
    const BBox box{0, 0, w, h};
    const BBox moved{r, r, w + r, h + r};
    const BBox grown{-r, -r, w + r, h + r};
    const BBox shrunk{r, r, w - r, h - r};
    return std::vector<double>{iou(box, moved), iou(box, grown), iou(box, shrunk)};
  };

  const double r8 = gaussian_radius(8, 8, 0.7);
  REQUIRE(r8 > 0);
  double worst = 1;
  for (double v : scenario_ious(8, 8, r8)) {
    REQUIRE(v >= 0.7 - 1e-9);
    worst = std::min(worst, v);
  }
  REQUIRE(worst == Approx(0.7).margin(1e-9));  // binding constraint is tight

  Rng rng(111);
  for (int i = 0; i < 200; ++i) {
    const double h = 1 + 29 * rng.uniform();
    const double w = 1 + 29 * rng.uniform();
    const double r = gaussian_radius(h, w, 0.7);
    REQUIRE(r >= 0);
    if (r > 0 && r < std::min(h, w) / 2)
      for (double v : scenario_ious(h, w, r)) REQUIRE(v >= 0.7 - 1e-9);
  }

  REQUIRE(gaussian_radius(16, 16, 0.7) > gaussian_radius(8, 8, 0.7));
  REQUIRE(gaussian_radius(8, 8, 0.999999) < 1e-4);
}

TEST_CASE("encode_targets places peaks, sizes, and offsets") {
  auto empty = encode_targets<double>({}, 8, 8, 4);
  for (double v : empty.heatmap) REQUIRE(v == 0);
  for (double v : empty.pos_mask) REQUIRE(v == 0);
  REQUIRE(empty.num_positives() == 0);

  // 16x16 box centered at (64,64): cell (16,16) on a 32x32 stride-4 grid.
  auto t = encode_targets<double>({BBox{56, 56, 72, 72}}, 32, 32, 4);
  REQUIRE(t.num_positives() == 1);
  const size_t at = 16 * 32 + 16;
  REQUIRE(t.heatmap[at] == 1.0);
  REQUIRE(t.pos_mask[at] == 1.0);
  double peak = 0;
  for (double v : t.heatmap) peak = std::max(peak, v);
  REQUIRE(peak == 1.0);
  REQUIRE(t.wh[at] == Approx(4.0));
  REQUIRE(t.wh[at + 32 * 32] == Approx(4.0));
  REQUIRE(t.offset[at] == Approx(0.0).margin(1e-12));
  REQUIRE(t.offset[at + 32 * 32] == Approx(0.0).margin(1e-12));

  // Fractional center: c = (2.125, 2.625) -> cell (2,2), offset (.125, .625).
  auto f = encode_targets<double>({BBox{5, 5, 12, 16}}, 8, 8, 4);
  const size_t fat = 2 * 8 + 2;
  REQUIRE(f.pos_mask[fat] == 1.0);
  REQUIRE(f.offset[fat] == Approx(0.125).margin(1e-12));
  REQUIRE(f.offset[fat + 64] == Approx(0.625).margin(1e-12));
  REQUIRE(f.wh[fat] == Approx(7.0 / 4).margin(1e-12));
  REQUIRE(f.wh[fat + 64] == Approx(11.0 / 4).margin(1e-12));
}

TEST_CASE("overlapping boxes compose the heatmap by elementwise max") {
  const BBox a{10, 10, 30, 30};
  const BBox b{20, 14, 44, 38};
  auto ab = encode_targets<double>({a, b}, 16, 16, 4);
  auto ea = encode_targets<double>({a}, 16, 16, 4);
  auto eb = encode_targets<double>({b}, 16, 16, 4);
  for (size_t i = 0; i < ab.heatmap.size(); ++i)
    REQUIRE(ab.heatmap[i] == Approx(std::max(ea.heatmap[i], eb.heatmap[i])).margin(1e-12));

  // Permuting the box list leaves every target map unchanged (distinct cells).
  auto ba = encode_targets<double>({b, a}, 16, 16, 4);
  REQUIRE(ab.heatmap == ba.heatmap);
  REQUIRE(ab.wh == ba.wh);
  REQUIRE(ab.offset == ba.offset);
  REQUIRE(ab.pos_mask == ba.pos_mask);
}

TEST_CASE("degenerate boxes are clamped and counted") {
  auto t = encode_targets<double>({BBox{10, 10, 10.5, 20}}, 8, 8, 4);
  REQUIRE(t.degenerate_count == 1);
  const size_t at = 3 * 8 + 2;  // center (10.25, 15) -> cell (2,3)
  REQUIRE(t.pos_mask[at] == 1.0);
  REQUIRE(t.wh[at] == Approx(0.25));  // clamped width 1px / stride 4
}

TEST_CASE("focal loss matches hand-computed values") {
  // Perfect prediction: 1 at the positive, 0 elsewhere.
  std::vector<double> target = {1, 0, 0, 0};
  D64 perfect = D64::from_data({1, 2, 2}, {1, 0, 0, 0});
  REQUIRE(focal_loss(perfect, target).item() == Approx(0.0).margin(1e-9));

  // Single pixel, y=1, p=0.5, alpha=2: (1-p)^2 * -log(p) = 0.25 ln 2.
  D64 half = D64::from_data({1, 1, 1}, {0.5});
  REQUIRE(focal_loss(half, {1.0}).item() == Approx(0.25 * std::log(2.0)).margin(1e-12));

  // Raising gamma softens the penalty at soft-negative locations.
  D64 p = D64::from_data({1, 1, 1}, {0.3});
  const double g4 = focal_loss(p, {0.6}, 2.0, 4.0).item();
  const double g6 = focal_loss(p, {0.6}, 2.0, 6.0).item();
  REQUIRE(g6 < g4);
  REQUIRE(g4 > 0);

  Rng rng(121);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> tv(9, 0.0);
    tv[static_cast<size_t>(rng.uniform_int(0, 8))] = 1.0;
    for (auto& v : tv)
      if (v != 1.0) v = 0.9 * rng.uniform();
    std::vector<double> pv(9);
    for (auto& v : pv) v = 0.05 + 0.9 * rng.uniform();
    REQUIRE(focal_loss(D64::from_data({1, 3, 3}, pv), tv).item() >= 0);
  }
}

TEST_CASE("focal loss gradient matches finite differences") {
  Rng rng(122);
  std::vector<double> tv(16, 0.0);
  tv[5] = 1.0;
  tv[10] = 0.4;
  std::vector<double> pv(16);
  for (auto& v : pv) v = 0.1 + 0.8 * rng.uniform();
  D64 pred = D64::from_data({1, 4, 4}, pv);
  pred.set_requires_grad();
  auto rep = grad_check<double>([&] { return focal_loss(pred, tv); }, {{"pred", pred}});
  REQUIRE(rep.max_rel_err < 1e-5);
}

TEST_CASE("reg_l1_loss averages absolute error over positives") {
  std::vector<double> target(2 * 4, 0.0);
  std::vector<double> mask(4, 0.0);

  D64 same = D64::from_data({2, 2, 2}, std::vector<double>(8, 0.3));
  std::vector<double> tsame(8, 0.3);
  mask[1] = 1;
  REQUIRE(reg_l1_loss(same, tsame, mask).item() == Approx(0.0).margin(1e-15));

  // No positives: zero, not NaN.
  std::vector<double> no_mask(4, 0.0);
  REQUIRE(reg_l1_loss(same, tsame, no_mask).item() == 0.0);

  // Single positive with channel errors (1, 3): (1+3)/2 = 2.
  std::vector<double> pv = {0, 1, 0, 0, 0, 3, 0, 0};
  std::vector<double> tv(8, 0.0);
  REQUIRE(reg_l1_loss(D64::from_data({2, 2, 2}, pv), tv, mask).item() == Approx(2.0).margin(1e-15));
}

TEST_CASE("reg_l1_loss gradient matches finite differences") {
  Rng rng(123);
  std::vector<double> tv(18), mv(9, 0.0);
  for (auto& v : tv) v = rng.normal();
  mv[2] = mv[7] = 1;
  std::vector<double> pv(18);
  for (auto& v : pv) v = rng.normal();
  D64 pred = D64::from_data({2, 3, 3}, pv);
  pred.set_requires_grad();
  auto rep = grad_check<double>([&] { return reg_l1_loss(pred, tv, mv); }, {{"pred", pred}});
  REQUIRE(rep.max_rel_err < 1e-5);
}

TEST_CASE("total_loss composes the weighted terms") {
  Rng rng(131);
  auto t = encode_targets<double>({BBox{8, 8, 20, 24}}, 8, 8, 4);

  // Zero loss needs 1 at positives and 0 at strict negatives (predicting the
  // Gaussian tail values would still be penalized), plus exact wh/off.
  HeadOut<double> perfect;
  perfect.hm = D64::from_data({1, 8, 8}, t.pos_mask);
  perfect.wh = D64::from_data({2, 8, 8}, t.wh);
  perfect.off = D64::from_data({2, 8, 8}, t.offset);
  REQUIRE(total_loss(perfect, t).item() == Approx(0.0).margin(1e-9));

  // Weights (1,0,0) reduce to the focal term alone.
  HeadOut<double> noisy;
  std::vector<double> hv(64), wv(128), ov(128);
  for (auto& v : hv) v = 0.1 + 0.8 * rng.uniform();
  for (auto& v : wv) v = rng.normal();
  for (auto& v : ov) v = rng.normal();
  noisy.hm = D64::from_data({1, 8, 8}, hv);
  noisy.wh = D64::from_data({2, 8, 8}, wv);
  noisy.off = D64::from_data({2, 8, 8}, ov);
  LossWeights only_focal;
  only_focal.wh_weight = 0;
  only_focal.off_weight = 0;
  REQUIRE(total_loss(noisy, t, only_focal).item() ==
          Approx(focal_loss(noisy.hm, t.heatmap).item()).margin(1e-12));

  LossTerms<double> parts;
  const double full = total_loss(noisy, t, LossWeights{}, &parts).item();
  REQUIRE(full == Approx(parts.focal.item() + 0.2 * parts.wh.item() + parts.off.item())
                      .margin(1e-12));
}

TEST_CASE("decode recovers encoded boxes exactly from oracle maps") {
  const std::vector<BBox> boxes = {{8, 8, 24, 28}, {64, 72, 88, 96}};
  auto t = encode_targets<double>(boxes, 32, 32, 4);
  auto dets = decode(D64::from_data({1, 32, 32}, t.heatmap),
                     D64::from_data({2, 32, 32}, t.wh),
                     D64::from_data({2, 32, 32}, t.offset), 10, 0.9, 4);
  REQUIRE(dets.size() == 2);
  for (const BBox& want : boxes) {
    bool found = false;
    for (const Detection& d : dets)
      if (std::abs(d.bbox.x1 - want.x1) < 1e-9 && std::abs(d.bbox.y1 - want.y1) < 1e-9 &&
          std::abs(d.bbox.x2 - want.x2) < 1e-9 && std::abs(d.bbox.y2 - want.y2) < 1e-9)
        found = true;
    REQUIRE(found);
  }
}

TEST_CASE("decode edge rules: empty maps, ties, caps, and thresholds") {
  D64 zeros_hm = D64::zeros({1, 8, 8});
  D64 zeros2 = D64::zeros({2, 8, 8});
  REQUIRE(decode(zeros_hm, zeros2, zeros2, 5, 0.1, 4).empty());

  // Two equal peaks, k=1: lexicographic (row, col) tie-break.
  std::vector<double> hv(64, 0.0);
  hv[2 * 8 + 5] = 0.9;
  hv[2 * 8 + 1] = 0.9;
  std::vector<double> wv(128, 1.0), ov(128, 0.5);
  auto one = decode(D64::from_data({1, 8, 8}, hv), D64::from_data({2, 8, 8}, wv),
                    D64::from_data({2, 8, 8}, ov), 1, 0.5, 4);
  REQUIRE(one.size() == 1);
  // Cell (row 2, col 1), center (1.5, 2.5) in feature units, size 1 cell.
  REQUIRE(one[0].bbox.x1 == Approx(4.0));
  REQUIRE(one[0].bbox.y1 == Approx(8.0));
  REQUIRE(one[0].bbox.x2 == Approx(8.0));
  REQUIRE(one[0].bbox.y2 == Approx(12.0));

  Rng rng(141);
  std::vector<double> rv(64);
  for (auto& v : rv) v = rng.uniform();
  auto many = decode(D64::from_data({1, 8, 8}, rv), D64::from_data({2, 8, 8}, wv),
                     D64::from_data({2, 8, 8}, ov), 3, 0.2, 4);
  REQUIRE(many.size() <= 3);
  for (const auto& d : many) {
    REQUIRE(d.score >= 0.2);
    REQUIRE(d.bbox.x1 >= 0);
    REQUIRE(d.bbox.x2 <= 32);
    REQUIRE(d.bbox.y2 <= 32);
  }
}

TEST_CASE("random non-overlapping boxes round-trip through encode/decode") {
  Rng rng(142);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<BBox> boxes;
    // Grid-separated boxes so centers land in distinct, non-adjacent cells.
    for (int g = 0; g < 3; ++g) {
      const double x = 8 + 40 * g + 4 * rng.uniform();
      const double y = 12 + 30 * g + 4 * rng.uniform();
      const double w = 6 + 10 * rng.uniform();
      const double h = 6 + 10 * rng.uniform();
      boxes.push_back({x, y, x + w, y + h});
    }
    auto t = encode_targets<double>(boxes, 32, 32, 4);
    auto dets = decode(D64::from_data({1, 32, 32}, t.heatmap),
                       D64::from_data({2, 32, 32}, t.wh),
                       D64::from_data({2, 32, 32}, t.offset), 10, 0.99, 4);
    REQUIRE(dets.size() == boxes.size());
    for (const BBox& want : boxes) {
      double best = 1e9;
      for (const Detection& d : dets) {
        const double cx = (d.bbox.x1 + d.bbox.x2) / 2, cy = (d.bbox.y1 + d.bbox.y2) / 2;
        const double wx = (want.x1 + want.x2) / 2, wy = (want.y1 + want.y2) / 2;
        best = std::min(best, std::hypot(cx - wx, cy - wy));
      }
      REQUIRE(best < 0.5);
    }
  }
}
