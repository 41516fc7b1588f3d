#pragma once

// Parameterized building blocks shared by the backbone, neck, and head:
// affine layer norm, linear layers, the transformer MLP, and the Swin block
// (windowed attention + MLP with residuals, shifted or not).

#include <string>
#include <vector>

#include "swindet/ops.hpp"
#include "swindet/window.hpp"

namespace swindet {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;

  static LayerNormParams init(std::int64_t C) {
    LayerNormParams p;
    p.gamma = Tensor<T>::full({C}, T(1));
    p.beta = Tensor<T>::zeros({C});
    p.gamma.set_requires_grad();
    p.beta.set_requires_grad();
    return p;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return layer_norm(x, gamma, beta, T(kLayerNormEps));
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

template <typename T>
struct LinearParams {
  Tensor<T> w, b;

  static LinearParams init(std::int64_t in, std::int64_t out, Rng& rng, T std = T(0.02),
                           bool zero_weight = false) {
    LinearParams p;
    p.w = zero_weight ? Tensor<T>::zeros({in, out}) : Tensor<T>::trunc_normal({in, out}, rng, std);
    p.b = Tensor<T>::zeros({out});
    p.w.set_requires_grad();
    p.b.set_requires_grad();
    return p;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

// Two-layer MLP with GELU; hidden width = ratio * C.
template <typename T>
struct MlpParams {
  LinearParams<T> fc1, fc2;

  static MlpParams init(std::int64_t C, std::int64_t ratio, Rng& rng, bool zero_out = false) {
    MlpParams p;
    p.fc1 = LinearParams<T>::init(C, ratio * C, rng);
    p.fc2 = LinearParams<T>::init(ratio * C, C, rng, T(0.02), zero_out);
    return p;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fc1.for_each_param(prefix + ".fc1", fn);
    fc2.for_each_param(prefix + ".fc2", fn);
  }
};

template <typename T>
struct SwinBlockParams {
  LayerNormParams<T> ln1, ln2;
  MhsaParams<T> attn;
  MlpParams<T> mlp;

  static SwinBlockParams init(std::int64_t C, std::int64_t num_heads, std::int64_t window,
                              bool rel_bias, Rng& rng, bool zero_residual = false) {
    SwinBlockParams p;
    p.ln1 = LayerNormParams<T>::init(C);
    p.ln2 = LayerNormParams<T>::init(C);
    p.attn = MhsaParams<T>::init(C, num_heads, window, rel_bias, rng);
    if (zero_residual) {
      p.attn.wproj = Tensor<T>::zeros({C, C});
      p.attn.wproj.set_requires_grad();
    }
    p.mlp = MlpParams<T>::init(C, 4, rng, zero_residual);
    return p;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    ln1.for_each_param(prefix + ".ln1", fn);
    attn.for_each_param(prefix + ".attn", fn);
    ln2.for_each_param(prefix + ".ln2", fn);
    mlp.for_each_param(prefix + ".mlp", fn);
  }
};

// Pre-norm Swin block: x + Attn(LN(x)), then + MLP(LN(.)).
// Shifted variant rolls by -floor(M/2) before partitioning, applies the
// shift mask, and rolls back after. Non-divisible extents are zero-padded
// for attention and cropped on the way out.
template <typename T>
Tensor<T> swin_block(const Tensor<T>& x, const SwinBlockParams<T>& p, bool shifted) {
  const auto& s = x.shape();
  if (s.size() != 3) throw shape_error("swin_block: expected [H,W,C], got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], C = s[2];
  const std::int64_t M = p.attn.window;
  const std::int64_t shift = shifted ? M / 2 : 0;
  if (shifted && shift == 0)
    throw config_error("swin_block: window " + std::to_string(M) + " cannot shift");
  const std::int64_t Hp = (H + M - 1) / M * M, Wp = (W + M - 1) / M * M;

  Tensor<T> h = p.ln1(x);
  h = pad_hwc(h, Hp, Wp);
  if (shift > 0) h = cyclic_shift(h, -shift, -shift);
  Tensor<T> mask = cached_block_mask<T>(H, W, M, shift);
  h = window_mhsa(window_partition(h, M), p.attn, mask);
  h = window_reverse(h, M, Hp, Wp);
  if (shift > 0) h = cyclic_shift(h, shift, shift);
  h = crop_hwc(h, H, W);
  Tensor<T> x1 = add(x, h);

  return add(x1, p.mlp(p.ln2(x1)));
}

// ----------------------------------------------- 2x2 space/channel moves

// Concatenate each 2x2 neighborhood into channels:
// out(i,j) = [x(2i,2j), x(2i,2j+1), x(2i+1,2j), x(2i+1,2j+1)].
template <typename T>
Tensor<T> space_to_depth2(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0)
    throw shape_error("space_to_depth2: expected even [H,W,C], got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], C = s[2], Ho = H / 2, Wo = W / 2;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t i = 0; i < Ho; ++i)
    for (std::int64_t j = 0; j < Wo; ++j)
      for (std::int64_t k = 0; k < 4; ++k)
        std::memcpy(out.data() + ((i * Wo + j) * 4 + k) * C,
                    xv.data() + ((2 * i + k / 2) * W + 2 * j + k % 2) * C, sizeof(T) * C);
  return detail::make_op<T>(Shape{Ho, Wo, 4 * C}, std::move(out), {x},
                            [W, C, Ho, Wo](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t i = 0; i < Ho; ++i)
                                for (std::int64_t j = 0; j < Wo; ++j)
                                  for (std::int64_t k = 0; k < 4; ++k) {
                                    T* dst = gx.data() + ((2 * i + k / 2) * W + 2 * j + k % 2) * C;
                                    const T* src = g.data() + ((i * Wo + j) * 4 + k) * C;
                                    for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                                  }
                            });
}

// Sub-pixel shuffle, the exact inverse of space_to_depth2: channel block k
// of 4 at (i,j) lands at spatial (2i + k/2, 2j + k%2).
template <typename T>
Tensor<T> depth_to_space2(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[2] % 4 != 0)
    throw config_error("depth_to_space2: channels must divide by 4, got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], C4 = s[2], C = C4 / 4;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j)
      for (std::int64_t k = 0; k < 4; ++k)
        std::memcpy(out.data() + ((2 * i + k / 2) * 2 * W + 2 * j + k % 2) * C,
                    xv.data() + ((i * W + j) * 4 + k) * C, sizeof(T) * C);
  return detail::make_op<T>(Shape{2 * H, 2 * W, C}, std::move(out), {x},
                            [H, W, C](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t i = 0; i < H; ++i)
                                for (std::int64_t j = 0; j < W; ++j)
                                  for (std::int64_t k = 0; k < 4; ++k) {
                                    T* dst = gx.data() + ((i * W + j) * 4 + k) * C;
                                    const T* src =
                                        g.data() + ((2 * i + k / 2) * 2 * W + 2 * j + k % 2) * C;
                                    for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
                                  }
                            });
}

}  // namespace swindet
