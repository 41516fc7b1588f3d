#pragma once

// Anchor-free center-point detection head. Three convolutional branches
// (heatmap / size / offset) over the stride-4 neck feature map, Gaussian
// target encoding, penalty-reduced focal loss, and peak-based decoding.

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "swindet/boxes.hpp"
#include "swindet/ops.hpp"
#include "swindet/tensor.hpp"

namespace swindet {

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
struct HeadBranchParams {
  Tensor<T> w1, b1;  // conv3x3, D -> D
  Tensor<T> w2, b2;  // conv1x1, D -> out

  static HeadBranchParams init(int64_t dim, int64_t out, Rng& rng,
                               T final_bias = T(0)) {
    HeadBranchParams p;
    p.w1 = Tensor<T>::trunc_normal({dim, dim, 3, 3}, rng, T(0.02));
    p.b1 = Tensor<T>::zeros({dim});
    p.w2 = Tensor<T>::trunc_normal({out, dim, 1, 1}, rng, T(0.02));
    p.b2 = Tensor<T>::full({out}, final_bias);
    p.w1.set_requires_grad();
    p.b1.set_requires_grad();
    p.w2.set_requires_grad();
    p.b2.set_requires_grad();
    return p;
  }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

// Sigmoid of the heatmap-branch bias starts the heatmap near 1%, the
// standard prior for sparse center maps.
template <typename T>
inline T heatmap_bias_init() {
  return T(-std::log((1.0 - 0.01) / 0.01));
}

template <typename T>
struct HeadParams {
  HeadBranchParams<T> hm, wh, off;

  static HeadParams init(int64_t dim, Rng& rng) {
    HeadParams p;
    p.hm = HeadBranchParams<T>::init(dim, 1, rng, heatmap_bias_init<T>());
    p.wh = HeadBranchParams<T>::init(dim, 2, rng);
    p.off = HeadBranchParams<T>::init(dim, 2, rng);
    return p;
  }

  template <typename F>
  void for_each_param(const std::string& prefix, F&& fn) {
    hm.for_each_param(prefix + ".hm", fn);
    wh.for_each_param(prefix + ".wh", fn);
    off.for_each_param(prefix + ".off", fn);
  }
};

template <typename T>
struct HeadOut {
  Tensor<T> hm;   // [1,Hf,Wf], sigmoid output clamped to [1e-4, 1-1e-4]
  Tensor<T> wh;   // [2,Hf,Wf], (width, height) in feature-map units
  Tensor<T> off;  // [2,Hf,Wf], (dx, dy) sub-cell center offset
};

namespace detail {

template <typename T>
Tensor<T> head_branch(const Tensor<T>& x4, const HeadBranchParams<T>& p) {
  Tensor<T> h = relu(conv2d(x4, p.w1, p.b1, 1, 1));
  return conv2d(h, p.w2, p.b2, 1, 0);
}

}  // namespace detail

// feat: [D,Hf,Wf] channel-first feature map from the neck.
template <typename T>
HeadOut<T> head_forward(const Tensor<T>& feat, const HeadParams<T>& params) {
  if (feat.rank() != 3) throw shape_error("head_forward: feat must be [D,Hf,Wf]");
  const int64_t D = feat.dim(0), Hf = feat.dim(1), Wf = feat.dim(2);
  Tensor<T> x4 = reshape(feat, {1, D, Hf, Wf});
  HeadOut<T> out;
  out.hm = reshape(
      clamp(sigmoid(detail::head_branch(x4, params.hm)), T(1e-4), T(1) - T(1e-4)),
      {1, Hf, Wf});
  out.wh = reshape(detail::head_branch(x4, params.wh), {2, Hf, Wf});
  out.off = reshape(detail::head_branch(x4, params.off), {2, Hf, Wf});
  return out;
}

// ---------------------------------------------------------------------------
// Target encoding

// Largest Gaussian radius such that a box corner perturbed by r in any of the
// three canonical ways (translated, inflated, shrunk) still overlaps the
// original with IoU >= min_overlap. Units follow h and w.
inline double gaussian_radius(double h, double w, double min_overlap = 0.7) {
  const double mo = min_overlap;
  const double s = h + w, a = w * h;

  // Same-size box translated diagonally by r.
  const double c1 = a * (1 - mo) / (1 + mo);
  const double r1 = (s - std::sqrt(std::max(0.0, s * s - 4 * c1))) / 2;

  // Box inflated by r on every side.
  const double r2 = (-s + std::sqrt(s * s + 4 * a * (1 - mo) / mo)) / 4;

  // Box shrunk by r on every side.
  const double r3 = (s - std::sqrt(std::max(0.0, s * s - 4 * a * (1 - mo)))) / 4;

  return std::max(0.0, std::min({r1, r2, r3}));
}

// Dense supervision targets on the stride-reduced grid. Raw buffers rather
// than graph tensors: targets are constants with respect to the model.
template <typename T>
struct TargetMaps {
  int64_t Hf = 0, Wf = 0;
  std::vector<T> heatmap;   // [Hf*Wf]
  std::vector<T> wh;        // [2*Hf*Wf], channel 0 width, channel 1 height
  std::vector<T> offset;    // [2*Hf*Wf], channel 0 dx, channel 1 dy
  std::vector<T> pos_mask;  // [Hf*Wf], 1 at object-center cells
  int degenerate_count = 0;

  int64_t num_positives() const {
    int64_t n = 0;
    for (T v : pos_mask) n += (v > T(0)) ? 1 : 0;
    return n;
  }
};

template <typename T>
TargetMaps<T> encode_targets(const std::vector<BBox>& boxes, int64_t Hf,
                             int64_t Wf, int stride = 4) {
  TargetMaps<T> t;
  t.Hf = Hf;
  t.Wf = Wf;
  t.heatmap.assign(static_cast<size_t>(Hf * Wf), T(0));
  t.wh.assign(static_cast<size_t>(2 * Hf * Wf), T(0));
  t.offset.assign(static_cast<size_t>(2 * Hf * Wf), T(0));
  t.pos_mask.assign(static_cast<size_t>(Hf * Wf), T(0));

  const int64_t plane = Hf * Wf;
  for (const BBox& box : boxes) {
    double w = box.x2 - box.x1, h = box.y2 - box.y1;
    if (w <= 1.0 || h <= 1.0) {
      ++t.degenerate_count;
      w = std::max(w, 1.0);
      h = std::max(h, 1.0);
    }
    const double cx = (box.x1 + box.x2) / 2 / stride;
    const double cy = (box.y1 + box.y2) / 2 / stride;
    const int64_t ix = static_cast<int64_t>(std::floor(cx));
    const int64_t iy = static_cast<int64_t>(std::floor(cy));
    if (ix < 0 || ix >= Wf || iy < 0 || iy >= Hf) continue;

    const double r = gaussian_radius(h / stride, w / stride);
    const double sigma = std::max(r, 1.0) / 3;
    const double denom = 2 * sigma * sigma;
    for (int64_t row = 0; row < Hf; ++row) {
      const double dy = static_cast<double>(row - iy);
      for (int64_t col = 0; col < Wf; ++col) {
        const double dx = static_cast<double>(col - ix);
        const T g = static_cast<T>(std::exp(-(dx * dx + dy * dy) / denom));
        T& cell = t.heatmap[static_cast<size_t>(row * Wf + col)];
        cell = std::max(cell, g);
      }
    }
    const size_t at = static_cast<size_t>(iy * Wf + ix);
    t.heatmap[at] = T(1);
    t.pos_mask[at] = T(1);
    t.wh[at] = static_cast<T>(w / stride);
    t.wh[at + static_cast<size_t>(plane)] = static_cast<T>(h / stride);
    t.offset[at] = static_cast<T>(cx - static_cast<double>(ix));
    t.offset[at + static_cast<size_t>(plane)] =
        static_cast<T>(cy - static_cast<double>(iy));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Losses

struct LossWeights {
  double hm_alpha = 2.0;
  double hm_gamma = 6.0;
  double wh_weight = 0.2;
  double off_weight = 1.0;
};

// Penalty-reduced focal loss over the heatmap. Fused forward/backward; the
// prediction is re-clamped internally so log() stays finite even for raw
// 0/1 inputs fed directly in tests.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& pred_hm, const std::vector<T>& target_hm,
                     double alpha = 2.0, double gamma = 6.0) {
  if (static_cast<size_t>(pred_hm.size()) != target_hm.size())
    throw shape_error("focal_loss: pred/target size mismatch");
  auto target = std::make_shared<std::vector<T>>(target_hm);
  int64_t n_pos = 0;
  for (T y : *target) n_pos += (y >= T(1)) ? 1 : 0;
  const double N = static_cast<double>(std::max<int64_t>(1, n_pos));

  const auto clip = [](double p) {
    return std::min(std::max(p, 1e-12), 1.0 - 1e-12);
  };
  const std::vector<T>& pv = pred_hm.value();
  double acc = 0;
  for (size_t i = 0; i < target->size(); ++i) {
    const double p = clip(static_cast<double>(pv[i]));
    const double y = static_cast<double>((*target)[i]);
    if (y >= 1.0)
      acc += std::pow(1 - p, alpha) * std::log(p);
    else
      acc += std::pow(1 - y, gamma) * std::pow(p, alpha) * std::log(1 - p);
  }
  const T loss = static_cast<T>(-acc / N);

  return detail::make_op<T>(
      Shape{}, std::vector<T>{loss}, {pred_hm},
      [target, alpha, gamma, N, clip](typename Tensor<T>::Node& n) {
        const T g0 = n.grad[0];
        auto& parent = *n.parents[0];
        if (!parent.requires_grad) return;
        auto& pg = parent.ensure_grad();
        const std::vector<T>& p_all = *parent.value;
        for (size_t i = 0; i < target->size(); ++i) {
          const double p = clip(static_cast<double>(p_all[i]));
          const double y = static_cast<double>((*target)[i]);
          double d;
          if (y >= 1.0)
            d = -alpha * std::pow(1 - p, alpha - 1) * std::log(p) +
                std::pow(1 - p, alpha) / p;
          else
            d = std::pow(1 - y, gamma) *
                (alpha * std::pow(p, alpha - 1) * std::log(1 - p) -
                 std::pow(p, alpha) / (1 - p));
          pg[i] += g0 * static_cast<T>(-d / N);
        }
      });
}

// Mean absolute error over positive cells (both channels), normalized by
// 2 * max(1, #positives).
template <typename T>
Tensor<T> reg_l1_loss(const Tensor<T>& pred, const std::vector<T>& target,
                      const std::vector<T>& pos_mask) {
  if (pred.rank() != 3 || pred.dim(0) != 2)
    throw shape_error("reg_l1_loss: pred must be [2,Hf,Wf]");
  const int64_t plane = pred.dim(1) * pred.dim(2);
  if (target.size() != static_cast<size_t>(2 * plane) ||
      pos_mask.size() != static_cast<size_t>(plane))
    throw shape_error("reg_l1_loss: target/mask size mismatch");

  auto tgt = std::make_shared<std::vector<T>>(target);
  auto mask = std::make_shared<std::vector<T>>(pos_mask);
  int64_t n_pos = 0;
  for (T v : *mask) n_pos += (v > T(0)) ? 1 : 0;
  const T scale = T(1) / (T(2) * static_cast<T>(std::max<int64_t>(1, n_pos)));

  const std::vector<T>& pv = pred.value();
  T acc = T(0);
  for (int64_t i = 0; i < plane; ++i) {
    if ((*mask)[static_cast<size_t>(i)] <= T(0)) continue;
    acc += std::abs(pv[static_cast<size_t>(i)] - (*tgt)[static_cast<size_t>(i)]);
    acc += std::abs(pv[static_cast<size_t>(i + plane)] -
                    (*tgt)[static_cast<size_t>(i + plane)]);
  }

  return detail::make_op<T>(
      Shape{}, std::vector<T>{acc * scale}, {pred},
      [tgt, mask, plane, scale](typename Tensor<T>::Node& n) {
        const T g0 = n.grad[0];
        auto& parent = *n.parents[0];
        if (!parent.requires_grad) return;
        auto& pg = parent.ensure_grad();
        const std::vector<T>& p_all = *parent.value;
        for (int64_t i = 0; i < plane; ++i) {
          if ((*mask)[static_cast<size_t>(i)] <= T(0)) continue;
          for (int64_t ch = 0; ch < 2; ++ch) {
            const size_t at = static_cast<size_t>(i + ch * plane);
            const T diff = p_all[at] - (*tgt)[at];
            const T sgn = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
            pg[at] += g0 * sgn * scale;
          }
        }
      });
}

template <typename T>
struct LossTerms {
  Tensor<T> total, focal, wh, off;
};

template <typename T>
Tensor<T> total_loss(const HeadOut<T>& outputs, const TargetMaps<T>& targets,
                     const LossWeights& w = LossWeights{},
                     LossTerms<T>* parts = nullptr) {
  Tensor<T> f = focal_loss(outputs.hm, targets.heatmap, w.hm_alpha, w.hm_gamma);
  Tensor<T> lw = reg_l1_loss(outputs.wh, targets.wh, targets.pos_mask);
  Tensor<T> lo = reg_l1_loss(outputs.off, targets.offset, targets.pos_mask);
  Tensor<T> total = add(f, add(mul_scalar(lw, static_cast<T>(w.wh_weight)),
                               mul_scalar(lo, static_cast<T>(w.off_weight))));
  if (parts) *parts = LossTerms<T>{total, f, lw, lo};
  return total;
}

// ---------------------------------------------------------------------------
// Decoding

// Peak rule: a cell survives iff it equals the max of its 3x3 neighborhood
// (ties keep all cells). Survivors with score >= score_thresh are ranked by
// score, ties broken by (row, col), and the top k become detections.
template <typename T>
std::vector<Detection> decode(const Tensor<T>& hm, const Tensor<T>& wh,
                              const Tensor<T>& off, int k, double score_thresh,
                              int stride = 4) {
  if (hm.rank() != 3 || hm.dim(0) != 1)
    throw shape_error("decode: hm must be [1,Hf,Wf]");
  const int64_t Hf = hm.dim(1), Wf = hm.dim(2), plane = Hf * Wf;
  const std::vector<T>& h = hm.value();
  const std::vector<T>& s = wh.value();
  const std::vector<T>& o = off.value();

  struct Peak {
    double score;
    int64_t row, col;
  };
  std::vector<Peak> peaks;
  for (int64_t r = 0; r < Hf; ++r)
    for (int64_t c = 0; c < Wf; ++c) {
      const T v = h[static_cast<size_t>(r * Wf + c)];
      bool is_peak = true;
      for (int64_t dr = -1; dr <= 1 && is_peak; ++dr)
        for (int64_t dc = -1; dc <= 1 && is_peak; ++dc) {
          const int64_t rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= Hf || cc < 0 || cc >= Wf) continue;
          if (h[static_cast<size_t>(rr * Wf + cc)] > v) is_peak = false;
        }
      if (is_peak && static_cast<double>(v) >= score_thresh)
        peaks.push_back({static_cast<double>(v), r, c});
    }

  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.row != b.row) return a.row < b.row;
    return a.col < b.col;
  });
  if (static_cast<int64_t>(peaks.size()) > k) peaks.resize(static_cast<size_t>(k));

  const double img_w = static_cast<double>(Wf * stride);
  const double img_h = static_cast<double>(Hf * stride);
  std::vector<Detection> dets;
  dets.reserve(peaks.size());
  for (const Peak& p : peaks) {
    const size_t at = static_cast<size_t>(p.row * Wf + p.col);
    const double cx = static_cast<double>(p.col) + static_cast<double>(o[at]);
    const double cy =
        static_cast<double>(p.row) + static_cast<double>(o[at + plane]);
    const double bw = static_cast<double>(s[at]);
    const double bh = static_cast<double>(s[at + plane]);
    Detection d;
    d.bbox.x1 = std::clamp((cx - bw / 2) * stride, 0.0, img_w);
    d.bbox.y1 = std::clamp((cy - bh / 2) * stride, 0.0, img_h);
    d.bbox.x2 = std::clamp((cx + bw / 2) * stride, 0.0, img_w);
    d.bbox.y2 = std::clamp((cy + bh / 2) * stride, 0.0, img_h);
    d.score = p.score;
    dets.push_back(d);
  }
  return dets;
}

}  // namespace swindet
