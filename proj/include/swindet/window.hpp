#pragma once

// Window machinery for shifted-window attention: partitioning a [H,W,C]
// token map into non-overlapping M x M windows, torus rolls, the additive
// attention mask that keeps tokens from different pre-shift regions apart,
// relative position bias, and multi-head self-attention within windows.

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "swindet/ops.hpp"
#include "swindet/rng.hpp"
#include "swindet/tensor.hpp"

namespace swindet {

inline constexpr double kMaskNegInf = -1e9;  // f32-safe stand-in for -inf

// ------------------------------------------------------------ partitioning

// [H,W,C] -> [(H/M)*(W/M), M*M, C]; windows row-major, tokens row-major.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t M) {
  const auto& s = x.shape();
  if (s.size() != 3) throw shape_error("window_partition: expected [H,W,C], got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], C = s[2];
  if (M <= 0 || H % M != 0 || W % M != 0)
    throw shape_error("window_partition: " + shape_str(s) + " not divisible by window " +
                      std::to_string(M));
  const std::int64_t nWx = W / M, nWy = H / M;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  // each (window, in-window row) is one contiguous run of M*C values
  for (std::int64_t wy = 0; wy < nWy; ++wy)
    for (std::int64_t iy = 0; iy < M; ++iy) {
      const T* src = xv.data() + ((wy * M + iy) * W) * C;
      for (std::int64_t wx = 0; wx < nWx; ++wx)
        std::memcpy(out.data() + (((wy * nWx + wx) * M + iy) * M) * C, src + wx * M * C,
                    sizeof(T) * M * C);
    }
  return detail::make_op<T>(Shape{nWy * nWx, M * M, C}, std::move(out), {x},
                            [H, W, C, M, nWx, nWy](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t wy = 0; wy < nWy; ++wy)
                                for (std::int64_t iy = 0; iy < M; ++iy) {
                                  T* dst = gx.data() + ((wy * M + iy) * W) * C;
                                  for (std::int64_t wx = 0; wx < nWx; ++wx) {
                                    const T* src = g.data() + (((wy * nWx + wx) * M + iy) * M) * C;
                                    T* d = dst + wx * M * C;
                                    for (std::int64_t j = 0; j < M * C; ++j) d[j] += src[j];
                                  }
                                }
                            });
}

// Exact inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::int64_t M, std::int64_t H, std::int64_t W) {
  const auto& s = windows.shape();
  if (s.size() != 3 || M <= 0 || H % M != 0 || W % M != 0 || s[0] != (H / M) * (W / M) ||
      s[1] != M * M)
    throw shape_error("window_reverse: windows " + shape_str(s) + " do not tile " +
                      std::to_string(H) + "x" + std::to_string(W) + " with window " +
                      std::to_string(M));
  const std::int64_t C = s[2], nWx = W / M, nWy = H / M;
  const auto& wv = windows.value();
  std::vector<T> out(wv.size());
  for (std::int64_t wy = 0; wy < nWy; ++wy)
    for (std::int64_t iy = 0; iy < M; ++iy) {
      T* dst = out.data() + ((wy * M + iy) * W) * C;
      for (std::int64_t wx = 0; wx < nWx; ++wx)
        std::memcpy(dst + wx * M * C, wv.data() + (((wy * nWx + wx) * M + iy) * M) * C,
                    sizeof(T) * M * C);
    }
  return detail::make_op<T>(Shape{H, W, C}, std::move(out), {windows},
                            [H, W, C, M, nWx, nWy](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gw = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t wy = 0; wy < nWy; ++wy)
                                for (std::int64_t iy = 0; iy < M; ++iy) {
                                  const T* src = g.data() + ((wy * M + iy) * W) * C;
                                  for (std::int64_t wx = 0; wx < nWx; ++wx) {
                                    T* d = gw.data() + (((wy * nWx + wx) * M + iy) * M) * C;
                                    const T* srow = src + wx * M * C;
                                    for (std::int64_t j = 0; j < M * C; ++j) d[j] += srow[j];
                                  }
                                }
                            });
}

// ------------------------------------------------------------- torus roll

// out[i,j] = x[(i - dy) mod H, (j - dx) mod W]
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::int64_t dy, std::int64_t dx) {
  const auto& s = x.shape();
  if (s.size() != 3) throw shape_error("cyclic_shift: expected [H,W,C], got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], C = s[2];
  const std::int64_t sy = ((dy % H) + H) % H, sx = ((dx % W) + W) % W;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t i = 0; i < H; ++i) {
    const std::int64_t si = (i - sy + H) % H;
    const T* src = xv.data() + si * W * C;
    T* dst = out.data() + i * W * C;
    // columns roll as two contiguous segments
    std::memcpy(dst + sx * C, src, sizeof(T) * (W - sx) * C);
    std::memcpy(dst, src + (W - sx) * C, sizeof(T) * sx * C);
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x},
                            [H, W, C, sy, sx](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t i = 0; i < H; ++i) {
                                const std::int64_t si = (i - sy + H) % H;
                                T* dst = gx.data() + si * W * C;
                                const T* src = g.data() + i * W * C;
                                for (std::int64_t j = 0; j < (W - sx) * C; ++j)
                                  dst[j] += src[sx * C + j];
                                for (std::int64_t j = 0; j < sx * C; ++j)
                                  dst[(W - sx) * C + j] += src[j];
                              }
                            });
}

// --------------------------------------------------------------- pad/crop

// Zero-pad on the bottom/right to [Hp, Wp].
template <typename T>
Tensor<T> pad_hwc(const Tensor<T>& x, std::int64_t Hp, std::int64_t Wp) {
  const auto& s = x.shape();
  if (s.size() != 3) throw shape_error("pad_hwc: expected [H,W,C], got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], C = s[2];
  if (Hp < H || Wp < W)
    throw shape_error("pad_hwc: target " + std::to_string(Hp) + "x" + std::to_string(Wp) +
                      " smaller than input " + shape_str(s));
  if (Hp == H && Wp == W) return x;
  const auto& xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(Hp * Wp * C), T(0));
  for (std::int64_t i = 0; i < H; ++i)
    std::memcpy(out.data() + i * Wp * C, xv.data() + i * W * C, sizeof(T) * W * C);
  return detail::make_op<T>(Shape{Hp, Wp, C}, std::move(out), {x},
                            [H, W, C, Wp](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t i = 0; i < H; ++i) {
                                T* dst = gx.data() + i * W * C;
                                const T* src = g.data() + i * Wp * C;
                                for (std::int64_t j = 0; j < W * C; ++j) dst[j] += src[j];
                              }
                            });
}

// Keep the top-left [H, W] corner.
template <typename T>
Tensor<T> crop_hwc(const Tensor<T>& x, std::int64_t H, std::int64_t W) {
  const auto& s = x.shape();
  if (s.size() != 3) throw shape_error("crop_hwc: expected [H,W,C], got " + shape_str(s));
  const std::int64_t Hp = s[0], Wp = s[1], C = s[2];
  if (H > Hp || W > Wp)
    throw shape_error("crop_hwc: target " + std::to_string(H) + "x" + std::to_string(W) +
                      " larger than input " + shape_str(s));
  if (Hp == H && Wp == W) return x;
  const auto& xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(H * W * C));
  for (std::int64_t i = 0; i < H; ++i)
    std::memcpy(out.data() + i * W * C, xv.data() + i * Wp * C, sizeof(T) * W * C);
  return detail::make_op<T>(Shape{H, W, C}, std::move(out), {x},
                            [H, W, C, Wp](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t i = 0; i < H; ++i) {
                                T* dst = gx.data() + i * Wp * C;
                                const T* src = g.data() + i * W * C;
                                for (std::int64_t j = 0; j < W * C; ++j) dst[j] += src[j];
                              }
                            });
}

// ------------------------------------------------------------ shift masks

namespace detail {

// Pre-shift region id of a padded-canvas position, expressed in post-shift
// coordinates: the shift lines cut each axis into three bands
// [0, E-M), [E-M, E-s), [E-s, E), which correspond one-to-one to the three
// source regions [s, E-M+s), [E-M+s, E), [0, s) of the pre-shift canvas.
inline int shift_band(std::int64_t r, std::int64_t extent, std::int64_t M, std::int64_t s) {
  if (r < extent - M) return 0;
  if (r < extent - s) return 1;
  return 2;
}

// Per-token group labels on the (padded) canvas, post-shift coordinates.
// Padded tokens get label -1: isolated from every real token but still able
// to attend among themselves, which keeps their softmax rows finite.
inline std::vector<int> shift_labels(std::int64_t H, std::int64_t W, std::int64_t Hp,
                                     std::int64_t Wp, std::int64_t M, std::int64_t shift) {
  std::vector<int> lab(static_cast<std::size_t>(Hp * Wp));
  for (std::int64_t r = 0; r < Hp; ++r)
    for (std::int64_t c = 0; c < Wp; ++c) {
      const std::int64_t sr = (r + shift) % Hp, sc = (c + shift) % Wp;
      if (sr >= H || sc >= W)
        lab[r * Wp + c] = -1;
      else if (shift == 0)
        lab[r * Wp + c] = 0;
      else
        lab[r * Wp + c] = shift_band(r, Hp, M, shift) * 3 + shift_band(c, Wp, M, shift);
    }
  return lab;
}

// Labels -> additive [nW, M^2, M^2] mask values.
template <typename T>
std::vector<T> labels_to_mask(const std::vector<int>& lab, std::int64_t Hp, std::int64_t Wp,
                              std::int64_t M) {
  const std::int64_t nWx = Wp / M, nWy = Hp / M, nW = nWy * nWx, MM = M * M;
  std::vector<T> mask(static_cast<std::size_t>(nW * MM * MM), T(0));
  std::vector<int> wl(static_cast<std::size_t>(MM));
  for (std::int64_t wy = 0; wy < nWy; ++wy)
    for (std::int64_t wx = 0; wx < nWx; ++wx) {
      for (std::int64_t iy = 0; iy < M; ++iy)
        for (std::int64_t ix = 0; ix < M; ++ix)
          wl[iy * M + ix] = lab[(wy * M + iy) * Wp + wx * M + ix];
      T* mw = mask.data() + (wy * nWx + wx) * MM * MM;
      for (std::int64_t i = 0; i < MM; ++i)
        for (std::int64_t j = 0; j < MM; ++j)
          if (wl[i] != wl[j]) mw[i * MM + j] = static_cast<T>(kMaskNegInf);
    }
  return mask;
}

}  // namespace detail

// Mask for a shifted partition of a divisible H x W map; shift = floor(M/2).
template <typename T>
Tensor<T> build_shift_mask(std::int64_t H, std::int64_t W, std::int64_t M) {
  if (M < 2) throw usage_error("build_shift_mask: window " + std::to_string(M) +
                               " has no shift (M must be >= 2)");
  if (H % M != 0 || W % M != 0)
    throw shape_error("build_shift_mask: " + std::to_string(H) + "x" + std::to_string(W) +
                      " not divisible by window " + std::to_string(M));
  const std::int64_t s = M / 2;
  auto lab = detail::shift_labels(H, W, H, W, M, s);
  auto mask = detail::labels_to_mask<T>(lab, H, W, M);
  return Tensor<T>::from_data(Shape{(H / M) * (W / M), M * M, M * M}, std::move(mask));
}

// General mask for a (possibly padded) partition at the given shift.
// Returns an undefined tensor when no masking is needed.
template <typename T>
Tensor<T> build_block_mask(std::int64_t H, std::int64_t W, std::int64_t M, std::int64_t shift) {
  const std::int64_t Hp = (H + M - 1) / M * M, Wp = (W + M - 1) / M * M;
  if (shift == 0 && Hp == H && Wp == W) return Tensor<T>();
  auto lab = detail::shift_labels(H, W, Hp, Wp, M, shift);
  auto mask = detail::labels_to_mask<T>(lab, Hp, Wp, M);
  return Tensor<T>::from_data(Shape{(Hp / M) * (Wp / M), M * M, M * M}, std::move(mask));
}

// Memoized build_block_mask: masks are constants reused across every block
// forward, so each (H, W, M, shift) is built once per thread.
template <typename T>
Tensor<T> cached_block_mask(std::int64_t H, std::int64_t W, std::int64_t M, std::int64_t shift) {
  thread_local std::unordered_map<std::string, Tensor<T>> cache;
  const std::string key = std::to_string(H) + ":" + std::to_string(W) + ":" + std::to_string(M) +
                          ":" + std::to_string(shift);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Tensor<T> m = build_block_mask<T>(H, W, M, shift);
  cache.emplace(key, m);
  return m;
}

// -------------------------------------------------- relative position bias

namespace detail {

// Bijection {-M+1..M-1}^2 -> 0..(2M-1)^2-1 for token pair (i, j):
// index = (drow + M - 1) * (2M - 1) + (dcol + M - 1), drow/dcol = pos_i - pos_j.
inline std::shared_ptr<const std::vector<std::int64_t>> rel_bias_map(std::int64_t M,
                                                                     std::int64_t heads) {
  thread_local std::unordered_map<std::string, std::shared_ptr<const std::vector<std::int64_t>>>
      cache;
  const std::string key = std::to_string(M) + ":" + std::to_string(heads);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const std::int64_t MM = M * M, S = 2 * M - 1;
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(heads * MM * MM));
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t i = 0; i < MM; ++i)
      for (std::int64_t j = 0; j < MM; ++j) {
        const std::int64_t dr = i / M - j / M, dc = i % M - j % M;
        const std::int64_t idx = (dr + M - 1) * S + (dc + M - 1);
        (*map)[(h * MM + i) * MM + j] = idx * heads + h;
      }
  cache[key] = map;
  return map;
}

}  // namespace detail

// table[(2M-1)^2, heads] -> bias[heads, M^2, M^2]
template <typename T>
Tensor<T> relative_position_bias(std::int64_t M, std::int64_t num_heads, const Tensor<T>& table) {
  const std::int64_t S = 2 * M - 1;
  if (table.rank() != 2 || table.dim(0) != S * S || table.dim(1) != num_heads)
    throw shape_error("relative_position_bias: table " + shape_str(table.shape()) +
                      " does not match window " + std::to_string(M) + ", heads " +
                      std::to_string(num_heads));
  return gather_map(table, Shape{num_heads, M * M, M * M}, detail::rel_bias_map(M, num_heads));
}

// ------------------------------------------------------------- head split

// [nW, T, C] -> [nW, h, T, C/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::int64_t h) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[2] % h != 0)
    throw config_error("split_heads: " + shape_str(s) + " not divisible into " +
                       std::to_string(h) + " heads");
  const std::int64_t nW = s[0], Tk = s[1], C = s[2], d = C / h;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t w = 0; w < nW; ++w)
    for (std::int64_t t = 0; t < Tk; ++t)
      for (std::int64_t a = 0; a < h; ++a)
        std::memcpy(out.data() + (((w * h + a) * Tk + t) * d), xv.data() + ((w * Tk + t) * C + a * d),
                    sizeof(T) * d);
  return detail::make_op<T>(Shape{nW, h, Tk, d}, std::move(out), {x},
                            [nW, Tk, C, h, d](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t w = 0; w < nW; ++w)
                                for (std::int64_t t = 0; t < Tk; ++t)
                                  for (std::int64_t a = 0; a < h; ++a) {
                                    T* dst = gx.data() + ((w * Tk + t) * C + a * d);
                                    const T* src = g.data() + (((w * h + a) * Tk + t) * d);
                                    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                            });
}

// [nW, h, T, d] -> [nW, T, h*d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw shape_error("merge_heads: expected [nW,h,T,d], got " + shape_str(s));
  const std::int64_t nW = s[0], h = s[1], Tk = s[2], d = s[3], C = h * d;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t w = 0; w < nW; ++w)
    for (std::int64_t a = 0; a < h; ++a)
      for (std::int64_t t = 0; t < Tk; ++t)
        std::memcpy(out.data() + ((w * Tk + t) * C + a * d),
                    xv.data() + (((w * h + a) * Tk + t) * d), sizeof(T) * d);
  return detail::make_op<T>(Shape{nW, Tk, C}, std::move(out), {x},
                            [nW, Tk, C, h, d](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t w = 0; w < nW; ++w)
                                for (std::int64_t a = 0; a < h; ++a)
                                  for (std::int64_t t = 0; t < Tk; ++t) {
                                    T* dst = gx.data() + (((w * h + a) * Tk + t) * d);
                                    const T* src = g.data() + ((w * Tk + t) * C + a * d);
                                    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                            });
}

// [..., A, B] -> [..., B, A]
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw shape_error("transpose_last2: rank < 2, got " + shape_str(s));
  const std::int64_t A = s[s.size() - 2], B = s.back();
  const std::int64_t nb = x.size() / (A * B);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t n = 0; n < nb; ++n)
    detail::transpose_2d(xv.data() + n * A * B, out.data() + n * A * B, A, B);
  return detail::make_op<T>(std::move(os), std::move(out), {x},
                            [A, B, nb](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              std::vector<T> tmp(static_cast<std::size_t>(A * B));
                              for (std::int64_t n = 0; n < nb; ++n) {
                                detail::transpose_2d(g.data() + n * A * B, tmp.data(), B, A);
                                T* dst = gx.data() + n * A * B;
                                for (std::int64_t j = 0; j < A * B; ++j) dst[j] += tmp[j];
                              }
                            });
}

// ------------------------------------------------------------------- mhsa

template <typename T>
struct MhsaParams {
  Tensor<T> wqkv;        // [C, 3C]
  Tensor<T> bqkv;        // [3C]
  Tensor<T> wproj;       // [C, C]
  Tensor<T> bproj;       // [C]
  Tensor<T> bias_table;  // [(2M-1)^2, heads]; undefined when bias disabled
  std::int64_t num_heads = 1;
  std::int64_t window = 0;

  static MhsaParams init(std::int64_t C, std::int64_t num_heads, std::int64_t window,
                         bool rel_bias, Rng& rng) {
    if (C % num_heads != 0)
      throw config_error("mhsa: dim " + std::to_string(C) + " not divisible by heads " +
                         std::to_string(num_heads));
    MhsaParams p;
    p.num_heads = num_heads;
    p.window = window;
    p.wqkv = Tensor<T>::trunc_normal({C, 3 * C}, rng, T(0.02));
    p.bqkv = Tensor<T>::zeros({3 * C});
    p.wproj = Tensor<T>::trunc_normal({C, C}, rng, T(0.02));
    p.bproj = Tensor<T>::zeros({C});
    const std::int64_t S = 2 * window - 1;
    if (rel_bias) p.bias_table = Tensor<T>::trunc_normal({S * S, num_heads}, rng, T(0.02));
    p.wqkv.set_requires_grad();
    p.bqkv.set_requires_grad();
    p.wproj.set_requires_grad();
    p.bproj.set_requires_grad();
    if (p.bias_table.defined()) p.bias_table.set_requires_grad();
    return p;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".wqkv", wqkv);
    fn(prefix + ".bqkv", bqkv);
    fn(prefix + ".wproj", wproj);
    fn(prefix + ".bproj", bproj);
    if (bias_table.defined()) fn(prefix + ".bias_table", bias_table);
  }
};

// Per-window multi-head attention: softmax(QK^T/sqrt(d) + bias + mask) V.
// `mask` may be undefined (no masking).
template <typename T>
Tensor<T> window_mhsa(const Tensor<T>& x_windows, const MhsaParams<T>& params,
                      const Tensor<T>& mask = Tensor<T>()) {
  const auto& s = x_windows.shape();
  if (s.size() != 3) throw shape_error("window_mhsa: expected [nW,T,C], got " + shape_str(s));
  const std::int64_t nW = s[0], Tk = s[1], C = s[2], h = params.num_heads;
  if (C % h != 0)
    throw config_error("window_mhsa: dim " + std::to_string(C) + " not divisible by heads " +
                       std::to_string(h));
  const std::int64_t d = C / h;
  Tensor<T> qkv = linear(x_windows, params.wqkv, params.bqkv);  // [nW, T, 3C]
  Tensor<T> q = split_heads(slice_lastdim(qkv, 0, C), h);       // [nW, h, T, d]
  Tensor<T> k = split_heads(slice_lastdim(qkv, C, C), h);
  Tensor<T> v = split_heads(slice_lastdim(qkv, 2 * C, C), h);
  q = mul_scalar(q, T(1) / std::sqrt(static_cast<T>(d)));
  Tensor<T> attn = matmul(q, transpose_last2(k));  // [nW, h, T, T]
  if (params.bias_table.defined())
    attn = attn + relative_position_bias(params.window, h, params.bias_table);
  if (mask.defined()) attn = attn + reshape(mask, {nW, 1, Tk, Tk});
  attn = softmax_lastdim(attn);
  Tensor<T> out = merge_heads(matmul(attn, v));  // [nW, T, C]
  return linear(out, params.wproj, params.bproj);
}

}  // namespace swindet
