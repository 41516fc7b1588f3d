#pragma once

// The detector neck: three stages of Swin blocks at a small window size,
// each followed by Up Merging (sub-pixel upsample + linear C->2C) and a
// skip concatenation with the matching backbone feature, walking the
// channel ladder 8D -> 4D -> 2D -> D back up to stride 4.

#include <string>
#include <vector>

#include "swindet/backbone.hpp"
#include "swindet/layers.hpp"

namespace swindet {

struct NeckConfig {
  std::int64_t window = 2;
  std::int64_t blocks_per_stage = 2;
  bool use_rel_bias = true;

  void validate() const {
    if (window < 2)
      throw config_error("neck: window must be >= 2 so shifted blocks have a nonzero shift");
    if (blocks_per_stage <= 0 || blocks_per_stage % 2 != 0)
      throw config_error("neck: blocks_per_stage must be positive and even, got " +
                         std::to_string(blocks_per_stage));
  }
};

template <typename T>
struct UpMergingParams {
  LayerNormParams<T> ln;  // over C_u (post-shuffle channels)
  LinearParams<T> proj;   // C_u -> 2*C_u

  static UpMergingParams init(std::int64_t C_in, Rng& rng) {
    if (C_in % 4 != 0)
      throw config_error("up_merging: channels " + std::to_string(C_in) + " not divisible by 4");
    UpMergingParams p;
    p.ln = LayerNormParams<T>::init(C_in / 4);
    p.proj = LinearParams<T>::init(C_in / 4, C_in / 2, rng);
    return p;
  }

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    ln.for_each_param(prefix + ".ln", fn);
    proj.for_each_param(prefix + ".proj", fn);
  }
};

// [H,W,4C_u] -> shuffle -> [2H,2W,C_u] -> norm -> linear -> [2H,2W,2C_u]
template <typename T>
Tensor<T> up_merging(const Tensor<T>& x, const UpMergingParams<T>& p) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[2] % 4 != 0)
    throw config_error("up_merging: channels must divide by 4, got " + shape_str(s));
  return p.proj(p.ln(depth_to_space2(x)));
}

// Concat along channels then project 2K->K.
template <typename T>
Tensor<T> skip_merge(const Tensor<T>& up, const Tensor<T>& skip, const LinearParams<T>& proj) {
  if (up.shape() != skip.shape())
    throw shape_error("skip_merge: shape mismatch " + shape_str(up.shape()) + " vs " +
                      shape_str(skip.shape()));
  return proj(concat_lastdim<T>({up, skip}));
}

template <typename T>
struct NeckStageParams {
  std::vector<SwinBlockParams<T>> blocks;
  UpMergingParams<T> up;
  LinearParams<T> skip_proj;  // 2K -> K

  template <typename Fn>
  void for_each_param(const std::string& prefix, Fn&& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each_param(prefix + ".block" + std::to_string(i), fn);
    up.for_each_param(prefix + ".up", fn);
    skip_proj.for_each_param(prefix + ".skip", fn);
  }
};

template <typename T>
struct NeckParams {
  std::vector<NeckStageParams<T>> stages;  // dims 8D, 4D, 2D

  // Heads reuse the backbone's heads-per-dim ratio: one head per 16 channels.
  static NeckParams init(std::int64_t D, const NeckConfig& cfg, Rng& rng) {
    cfg.validate();
    NeckParams p;
    for (int s = 0; s < 3; ++s) {
      const std::int64_t dim = D << (3 - s);  // 8D, 4D, 2D
      if (dim % 16 != 0)
        throw config_error("neck: stage dim " + std::to_string(dim) +
                           " not divisible into 16-channel heads");
      const std::int64_t heads = dim / 16;
      NeckStageParams<T> st;
      for (std::int64_t b = 0; b < cfg.blocks_per_stage; ++b)
        st.blocks.push_back(
            SwinBlockParams<T>::init(dim, heads, cfg.window, cfg.use_rel_bias, rng));
      st.up = UpMergingParams<T>::init(dim, rng);
      st.skip_proj = LinearParams<T>::init(dim, dim / 2, rng);
      p.stages.push_back(std::move(st));
    }
    return p;
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (std::size_t s = 0; s < stages.size(); ++s)
      stages[s].for_each_param("neck.stage" + std::to_string(s), fn);
  }
};

// C5 in, stride-4 D-channel map out. Stage s: blocks -> up_merging -> skip
// with C4, C3, C2 respectively.
template <typename T>
Tensor<T> neck_forward(const PyramidFeatures<T>& feats, const NeckParams<T>& params) {
  Tensor<T> x = feats.C5;
  const Tensor<T>* skips[3] = {&feats.C4, &feats.C3, &feats.C2};
  for (int s = 0; s < 3; ++s) {
    const auto& stage = params.stages[s];
    for (std::size_t b = 0; b < stage.blocks.size(); ++b)
      x = swin_block(x, stage.blocks[b], /*shifted=*/b % 2 == 1);
    x = up_merging(x, stage.up);
    x = skip_merge(x, *skips[s], stage.skip_proj);
  }
  return x;
}

}  // namespace swindet
