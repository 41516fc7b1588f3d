#pragma once

// Hierarchical windowed-attention backbone: a 4x4 patch embedding followed
// by four stages of Swin blocks with patch merging between stages, producing
// the C2 (stride 4) .. C5 (stride 32) feature pyramid.

#include <string>
#include <vector>

#include "swindet/layers.hpp"

namespace swindet {

struct BackboneConfig {
  std::int64_t embed_dim = 32;
  std::vector<std::int64_t> depths = {2, 2, 2, 2};
  std::vector<std::int64_t> num_heads = {2, 4, 8, 16};
  std::int64_t window = 4;
  bool use_rel_bias = true;
  bool zero_residual = false;

  void validate() const {
    if (depths.size() != 4 || num_heads.size() != 4)
      throw config_error("backbone: need 4 stage depths and head counts");
    for (int i = 0; i < 4; ++i) {
      if (depths[i] <= 0 || depths[i] % 2 != 0)
        throw config_error("backbone: stage " + std::to_string(i) + " depth " +
                           std::to_string(depths[i]) + " must be positive and even");
      const std::int64_t dim = embed_dim << i;
      if (num_heads[i] <= 0 || dim % num_heads[i] != 0)
        throw config_error("backbone: stage " + std::to_string(i) + " dim " + std::to_string(dim) +
                           " not divisible by " + std::to_string(num_heads[i]) + " heads");
    }
    if (window < 2) throw config_error("backbone: window must be >= 2 for shifted blocks");
    if (embed_dim <= 0) throw config_error("backbone: embed_dim must be positive");
  }
};

template <typename T>
struct PatchEmbedParams {
  Tensor<T> w;  // [D, 3, 4, 4]
  Tensor<T> b;  // [D]
  LayerNormParams<T> ln;

  static PatchEmbedParams init(std::int64_t D, Rng& rng) {
    PatchEmbedParams p;
    p.w = Tensor<T>::trunc_normal({D, 3, 4, 4}, rng, T(0.02));
    p.b = Tensor<T>::zeros({D});
    p.w.set_requires_grad();
    p.b.set_requires_grad();
    p.ln = LayerNormParams<T>::init(D);
    return p;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
    ln.for_each_param(prefix + ".ln", fn);
  }
};

template <typename T>
struct PatchMergingParams {
  LayerNormParams<T> ln;    // over 4C
  LinearParams<T> proj;     // 4C -> 2C

  static PatchMergingParams init(std::int64_t C, Rng& rng) {
    PatchMergingParams p;
    p.ln = LayerNormParams<T>::init(4 * C);
    p.proj = LinearParams<T>::init(4 * C, 2 * C, rng);
    return p;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    ln.for_each_param(prefix + ".ln", fn);
    proj.for_each_param(prefix + ".proj", fn);
  }
};

// 4x4 non-overlapping patches -> D channels -> layer norm. [3,H,W] -> [H/4,W/4,D]
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& img, const PatchEmbedParams<T>& p) {
  const auto& s = img.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0)
    throw shape_error("patch_embed: expected [3,H,W] with H,W divisible by 4, got " +
                      shape_str(s));
  const std::int64_t H = s[1], W = s[2], D = p.w.dim(0);
  Tensor<T> y = conv2d(reshape(img, {1, 3, H, W}), p.w, p.b, 4, 0);  // [1,D,H/4,W/4]
  y = permute(reshape(y, {D, H / 4, W / 4}), {1, 2, 0});             // [H/4,W/4,D]
  return p.ln(y);
}

// Concat 2x2 neighborhoods -> norm -> linear 4C->2C. Odd extents are padded.
template <typename T>
Tensor<T> patch_merging(const Tensor<T>& x, const PatchMergingParams<T>& p) {
  const auto& s = x.shape();
  if (s.size() != 3) throw shape_error("patch_merging: expected [H,W,C], got " + shape_str(s));
  Tensor<T> t = pad_hwc(x, (s[0] + 1) / 2 * 2, (s[1] + 1) / 2 * 2);
  return p.proj(p.ln(space_to_depth2(t)));
}

template <typename T>
struct BackboneStageParams {
  std::vector<SwinBlockParams<T>> blocks;
  PatchMergingParams<T> merge;  // unused (empty tensors) for the last stage
  bool has_merge = false;

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each_param(prefix + ".block" + std::to_string(i), fn);
    if (has_merge) merge.for_each_param(prefix + ".merge", fn);
  }
};

template <typename T>
struct BackboneParams {
  PatchEmbedParams<T> embed;
  std::vector<BackboneStageParams<T>> stages;

  static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    BackboneParams p;
    p.embed = PatchEmbedParams<T>::init(cfg.embed_dim, rng);
    for (int s = 0; s < 4; ++s) {
      const std::int64_t dim = cfg.embed_dim << s;
      BackboneStageParams<T> st;
      for (std::int64_t b = 0; b < cfg.depths[s]; ++b)
        st.blocks.push_back(SwinBlockParams<T>::init(dim, cfg.num_heads[s], cfg.window,
                                                     cfg.use_rel_bias, rng, cfg.zero_residual));
      if (s < 3) {
        st.merge = PatchMergingParams<T>::init(dim, rng);
        st.has_merge = true;
      }
      p.stages.push_back(std::move(st));
    }
    return p;
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    embed.for_each_param("backbone.embed", fn);
    for (std::size_t s = 0; s < stages.size(); ++s)
      stages[s].for_each_param("backbone.stage" + std::to_string(s), fn);
  }
};

// Multi-scale features in token layout [h, w, C].
template <typename T>
struct PyramidFeatures {
  Tensor<T> C2, C3, C4, C5;
};

// img [3,H,W], H and W divisible by 32 -> C2..C5 at strides 4..32.
// Stage outputs are recorded before the following patch merging.
template <typename T>
PyramidFeatures<T> backbone_forward(const Tensor<T>& img, const BackboneParams<T>& params) {
  const auto& s = img.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] % 32 != 0 || s[2] % 32 != 0)
    throw shape_error("backbone: expected [3,H,W] with H,W divisible by 32, got " + shape_str(s));
  Tensor<T> x = patch_embed(img, params.embed);
  PyramidFeatures<T> out;
  for (int st = 0; st < 4; ++st) {
    const auto& stage = params.stages[st];
    for (std::size_t b = 0; b < stage.blocks.size(); ++b)
      x = swin_block(x, stage.blocks[b], /*shifted=*/b % 2 == 1);
    (st == 0 ? out.C2 : st == 1 ? out.C3 : st == 2 ? out.C4 : out.C5) = x;
    if (stage.has_merge) x = patch_merging(x, stage.merge);
  }
  return out;
}

}  // namespace swindet
