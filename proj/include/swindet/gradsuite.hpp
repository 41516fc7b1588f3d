#pragma once

// Named finite-difference checks covering every differentiable op plus the
// full detector end to end. Shared by the grad-check CLI command and the
// acceptance harness.

#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "swindet/gradcheck.hpp"
#include "swindet/head.hpp"
#include "swindet/model.hpp"
#include "swindet/ops.hpp"
#include "swindet/rng.hpp"
#include "swindet/synth.hpp"
#include "swindet/window.hpp"

namespace swindet {

struct GradSuiteCase {
  std::string name;
  double max_rel_err = 0;
  double threshold = 0;
  bool pass = false;
  std::int64_t checked = 0;
  std::string worst_param;
};

struct GradSuiteResult {
  std::vector<GradSuiteCase> cases;
  bool all_pass = true;
  double seconds = 0;
};

namespace detail {

// Leaf with entries uniform in [lo,hi]; margin keeps values away from zero
// so kinked ops (relu, abs, sign) see no crossing within the FD step.
inline Tensor<double> grad_leaf(Shape shape, Rng& rng, double lo = -1, double hi = 1,
                                double margin = 0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::fabs(x) < margin);
  }
  Tensor<double> t = Tensor<double>::from_data(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

}  // namespace detail

// Runs the whole suite at f64. Ops must agree with central differences to
// 1e-4 relative error; the end-to-end model loss to 1e-3 (its gradient
// passes through ~60 layers, so FD noise compounds).
inline GradSuiteResult run_grad_check_suite(std::ostream* log = nullptr) {
  using T = double;
  using detail::grad_leaf;
  const auto t_start = std::chrono::steady_clock::now();
  GradSuiteResult result;

  std::uint64_t case_id = 0;
  const auto run_case = [&](const std::string& name, auto&& build, double threshold = 1e-4,
                            double eps = 1e-6, std::int64_t max_entries = 0) {
    Rng rng = Rng::stream(7, "grad-suite", case_id++);
    std::vector<std::pair<std::string, Tensor<T>>> params;
    std::function<Tensor<T>()> loss = build(rng, params);
    GradCheckReport<T> rep = grad_check(loss, params, eps, max_entries);
    GradSuiteCase c{name, rep.max_rel_err, threshold, rep.max_rel_err < threshold, rep.checked,
                    rep.worst_param};
    result.all_pass = result.all_pass && c.pass;
    if (log)
      (*log) << (c.pass ? "  ok   " : "  FAIL ") << name << ": max rel err " << c.max_rel_err
             << " (threshold " << threshold << ", " << c.checked << " entries)\n";
    result.cases.push_back(std::move(c));
  };

  using Params = std::vector<std::pair<std::string, Tensor<T>>>;

  run_case("add_sub_neg", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({3, 4}, rng), b = grad_leaf({3, 4}, rng);
    ps = {{"a", a}, {"b", b}};
    return [a, b] { return sum(mul(add(a, b), sub(a, neg(b)))); };
  });

  run_case("mul_scalars", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({2, 5}, rng), b = grad_leaf({2, 5}, rng);
    ps = {{"a", a}, {"b", b}};
    return [a, b] {
      return sum(add(mul_scalar(mul(a, b), T(1.7)), add_scalar(a, T(0.3))));
    };
  });

  run_case("relu", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({4, 4}, rng, -1, 1, 0.1);
    ps = {{"a", a}};
    return [a] { return sum(mul(relu(a), a)); };
  });

  run_case("sigmoid", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({4, 4}, rng, -2, 2);
    ps = {{"a", a}};
    return [a] { return sum(mul(sigmoid(a), a)); };
  });

  run_case("gelu", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({4, 4}, rng, -2, 2);
    ps = {{"a", a}};
    return [a] { return sum(gelu(a)); };
  });

  run_case("exp_log", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({3, 3}, rng, -1, 1);
    ps = {{"a", a}};
    return [a] { return sum(swindet::log(add_scalar(exp(a), T(1.5)))); };
  });

  run_case("pow_scalar", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({3, 3}, rng, 0.5, 1.5);
    ps = {{"a", a}};
    return [a] { return sum(pow_scalar(a, T(2.5))); };
  });

  run_case("abs", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({4, 4}, rng, -1, 1, 0.1);
    ps = {{"a", a}};
    return [a] { return sum(mul(abs(a), a)); };
  });

  run_case("clamp", [](Rng& rng, Params& ps) {
    // values in (-1,1) minus a band around the clamp edges at +-0.5
    std::vector<T> v;
    while (v.size() < 12) {
      const double x = rng.uniform(-1, 1);
      if (std::fabs(std::fabs(x) - 0.5) > 0.05) v.push_back(x);
    }
    Tensor<T> a = Tensor<T>::from_data({3, 4}, v);
    a.set_requires_grad();
    ps = {{"a", a}};
    return [a] { return sum(mul(clamp(a, T(-0.5), T(0.5)), a)); };
  });

  run_case("sum_mean", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({5, 3}, rng);
    ps = {{"a", a}};
    return [a] { return add(sum(mul(a, a)), mean(a)); };
  });

  run_case("reshape_permute", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({24}, rng);
    ps = {{"a", a}};
    return [a] {
      Tensor<T> p = permute(reshape(a, {2, 3, 4}), {2, 0, 1});
      return sum(mul(p, p));
    };
  });

  run_case("slice_concat", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({2, 6}, rng);
    ps = {{"a", a}};
    return [a] {
      Tensor<T> left = slice_lastdim(a, 0, 2), right = slice_lastdim(a, 2, 4);
      Tensor<T> back = concat_lastdim<T>({right, left});
      return sum(mul(back, back));
    };
  });

  run_case("gather_map", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({6}, rng);
    ps = {{"a", a}};
    // duplicated reads and a zero-filled slot exercise scatter-accumulate
    auto map = std::make_shared<const std::vector<std::int64_t>>(
        std::vector<std::int64_t>{5, 0, 0, 3, -1, 2, 1, 4});
    return [a, map] {
      Tensor<T> g = gather_map(a, {8}, map);
      return sum(mul(g, g));
    };
  });

  run_case("softmax_lastdim", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({3, 5}, rng, -2, 2), w = grad_leaf({3, 5}, rng);
    ps = {{"a", a}, {"w", w}};
    return [a, w] { return sum(mul(softmax_lastdim(a), w)); };
  });

  run_case("layer_norm", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({4, 6}, rng), g = grad_leaf({6}, rng, 0.5, 1.5),
              b = grad_leaf({6}, rng), m = grad_leaf({4, 6}, rng);
    ps = {{"x", x}, {"g", g}, {"b", b}, {"m", m}};
    return [x, g, b, m] { return sum(mul(layer_norm(x, g, b, T(1e-5)), m)); };
  });

  run_case("matmul", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({3, 4}, rng), b = grad_leaf({4, 5}, rng);
    ps = {{"a", a}, {"b", b}};
    return [a, b] {
      Tensor<T> c = matmul(a, b);
      return sum(mul(c, c));
    };
  });

  run_case("matmul_batched", [](Rng& rng, Params& ps) {
    Tensor<T> a = grad_leaf({2, 3, 4}, rng), b = grad_leaf({2, 4, 5}, rng);
    ps = {{"a", a}, {"b", b}};
    return [a, b] {
      Tensor<T> c = transpose_last2(matmul(a, b));
      return sum(mul(c, c));
    };
  });

  run_case("linear", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({5, 4}, rng), w = grad_leaf({4, 3}, rng), b = grad_leaf({3}, rng);
    ps = {{"x", x}, {"w", w}, {"b", b}};
    return [x, w, b] {
      Tensor<T> y = linear(x, w, b);
      return sum(mul(y, y));
    };
  });

  run_case("conv2d", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({1, 2, 5, 5}, rng), w = grad_leaf({3, 2, 3, 3}, rng),
              b = grad_leaf({3}, rng);
    ps = {{"x", x}, {"w", w}, {"b", b}};
    return [x, w, b] {
      Tensor<T> y = conv2d(x, w, b, 1, 1);
      return sum(mul(y, y));
    };
  });

  run_case("conv2d_strided", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({1, 3, 8, 8}, rng), w = grad_leaf({4, 3, 4, 4}, rng),
              b = grad_leaf({4}, rng);
    ps = {{"x", x}, {"w", w}, {"b", b}};
    return [x, w, b] {
      Tensor<T> y = conv2d(x, w, b, 4, 0);
      return sum(mul(y, y));
    };
  });

  run_case("embedding_lookup", [](Rng& rng, Params& ps) {
    Tensor<T> table = grad_leaf({9, 4}, rng), m = grad_leaf({5, 4}, rng);
    ps = {{"table", table}, {"m", m}};
    auto idx = std::make_shared<const std::vector<std::int64_t>>(
        std::vector<std::int64_t>{2, 7, 2, 0, 8});
    return [table, m, idx] { return sum(mul(embedding_lookup(table, idx), m)); };
  });

  run_case("window_structurals", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({5, 7, 3}, rng);
    ps = {{"x", x}};
    return [x] {
      Tensor<T> y = cyclic_shift(x, 1, 2);
      y = pad_hwc(y, 6, 8);
      y = window_partition(y, 2);
      y = window_reverse(y, 2, 6, 8);
      y = crop_hwc(y, 5, 7);
      return sum(mul(y, y));
    };
  });

  run_case("split_merge_heads", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({2, 4, 6}, rng);
    ps = {{"x", x}};
    return [x] {
      Tensor<T> y = merge_heads(split_heads(x, 2));
      return sum(mul(y, mul_scalar(x, T(0.5))));
    };
  });

  run_case("relative_position_bias", [](Rng& rng, Params& ps) {
    Tensor<T> table = grad_leaf({9, 2}, rng), m = grad_leaf({2, 4, 4}, rng);
    ps = {{"table", table}, {"m", m}};
    return [table, m] { return sum(mul(relative_position_bias(2, 2, table), m)); };
  });

  run_case("window_mhsa", [](Rng& rng, Params& ps) {
    MhsaParams<T> p = MhsaParams<T>::init(8, 2, 2, true, rng);
    Tensor<T> x = grad_leaf({2, 4, 8}, rng);
    ps = {{"x", x}};
    p.for_each_param("attn", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [x, p] {
      Tensor<T> y = window_mhsa(x, p);
      return sum(mul(y, y));
    };
  });

  run_case("window_mhsa_masked", [](Rng& rng, Params& ps) {
    MhsaParams<T> p = MhsaParams<T>::init(8, 2, 2, true, rng);
    Tensor<T> x = grad_leaf({4, 4, 8}, rng);
    Tensor<T> mask = cached_block_mask<T>(4, 4, 2, 1);
    ps = {{"x", x}};
    p.for_each_param("attn", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [x, p, mask] {
      Tensor<T> y = window_mhsa(x, p, mask);
      return sum(mul(y, y));
    };
  });

  run_case("mlp", [](Rng& rng, Params& ps) {
    MlpParams<T> p = MlpParams<T>::init(6, 4, rng);
    Tensor<T> x = grad_leaf({5, 6}, rng);
    ps = {{"x", x}};
    p.for_each_param("mlp", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [x, p] {
      Tensor<T> y = p(x);
      return sum(mul(y, y));
    };
  });

  // The squared-sum loss over a swin block is O(100); eps 1e-5 keeps the
  // difference quotient above cancellation noise (same reasoning as the
  // model-level check below).
  run_case(
      "swin_block",
      [](Rng& rng, Params& ps) {
        SwinBlockParams<T> p = SwinBlockParams<T>::init(8, 2, 2, true, rng);
        Tensor<T> x = grad_leaf({4, 4, 8}, rng);
        ps = {{"x", x}};
        p.for_each_param("block", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
        return [x, p] {
          Tensor<T> y = swin_block(x, p, true);
          return sum(mul(y, y));
        };
      },
      1e-4, 1e-5);

  run_case("space_depth_shuffle", [](Rng& rng, Params& ps) {
    Tensor<T> x = grad_leaf({4, 6, 3}, rng);
    ps = {{"x", x}};
    return [x] {
      Tensor<T> y = depth_to_space2(space_to_depth2(x));
      return sum(mul(y, x));
    };
  });

  run_case("patch_embed", [](Rng& rng, Params& ps) {
    PatchEmbedParams<T> p = PatchEmbedParams<T>::init(8, rng);
    Tensor<T> x = grad_leaf({3, 8, 8}, rng, 0, 1);
    ps = {{"x", x}};
    p.for_each_param("embed", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [x, p] {
      Tensor<T> y = patch_embed(x, p);
      return sum(mul(y, y));
    };
  });

  run_case("patch_merging", [](Rng& rng, Params& ps) {
    PatchMergingParams<T> p = PatchMergingParams<T>::init(4, rng);
    Tensor<T> x = grad_leaf({4, 4, 4}, rng);
    ps = {{"x", x}};
    p.for_each_param("merge", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [x, p] {
      Tensor<T> y = patch_merging(x, p);
      return sum(mul(y, y));
    };
  });

  run_case("up_merging", [](Rng& rng, Params& ps) {
    UpMergingParams<T> p = UpMergingParams<T>::init(8, rng);
    Tensor<T> x = grad_leaf({2, 2, 8}, rng);
    ps = {{"x", x}};
    p.for_each_param("up", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [x, p] {
      Tensor<T> y = up_merging(x, p);
      return sum(mul(y, y));
    };
  });

  run_case("skip_merge", [](Rng& rng, Params& ps) {
    LinearParams<T> proj = LinearParams<T>::init(8, 4, rng);
    Tensor<T> a = grad_leaf({3, 3, 4}, rng), b = grad_leaf({3, 3, 4}, rng);
    ps = {{"a", a}, {"b", b}};
    proj.for_each_param("skip", [&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
    return [a, b, proj] {
      Tensor<T> y = skip_merge(a, b, proj);
      return sum(mul(y, y));
    };
  });

  run_case("focal_loss", [](Rng& rng, Params& ps) {
    Tensor<T> logits = grad_leaf({1, 4, 4}, rng, -3, 1);
    ps = {{"logits", logits}};
    std::vector<T> target(16, T(0));
    target[5] = T(1);
    target[6] = T(0.6);
    target[10] = T(0.3);
    return [logits, target] { return focal_loss(sigmoid(logits), target); };
  });

  run_case("reg_l1_loss", [](Rng& rng, Params& ps) {
    Tensor<T> pred = grad_leaf({2, 3, 3}, rng, 1, 3);
    ps = {{"pred", pred}};
    std::vector<T> target(18, T(0)), mask(9, T(0));
    mask[2] = mask[7] = T(1);  // residuals stay >= 1, clear of the sign kink
    return [pred, target, mask] { return reg_l1_loss(pred, target, mask); };
  });

  run_case("total_loss", [](Rng& rng, Params& ps) {
    Tensor<T> hm_logits = grad_leaf({1, 8, 8}, rng, -3, 1);
    Tensor<T> wh = grad_leaf({2, 8, 8}, rng, 1, 4);
    Tensor<T> off = grad_leaf({2, 8, 8}, rng, 1, 2);
    ps = {{"hm", hm_logits}, {"wh", wh}, {"off", off}};
    TargetMaps<T> t = encode_targets<T>({BBox{6, 6, 16, 14}, BBox{18, 20, 27, 29}}, 8, 8);
    return [hm_logits, wh, off, t] {
      HeadOut<T> out{clamp(sigmoid(hm_logits), T(1e-4), T(1 - 1e-4)), wh, off};
      return total_loss(out, t);
    };
  });

  // End to end: tiny detector on a 64x64 synthetic scene against its real
  // targets, two sampled entries per parameter tensor. The loss is O(10)
  // and the graph is deep, so eps widens to 1e-5 and the bar to 1e-3.
  run_case(
      "model_end_to_end",
      [](Rng& rng, Params& ps) {
        SceneConfig sc;
        sc.image_size = 64;
        sc.seed = 11;
        Scene<T> scene = generate_scene<T>(sc, rng);
        Detector<T> model = Detector<T>::init(ModelConfig{}, 3);
        TargetMaps<T> targets = encode_targets<T>(scene.boxes, 16, 16);
        model.for_each_param([&](const std::string& n, Tensor<T>& t) { ps.emplace_back(n, t); });
        Tensor<T> img = scene.image;
        return [img, model, targets] { return total_loss(model.forward(img), targets); };
      },
      1e-3, 1e-5, 2);

  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (log)
    (*log) << (result.all_pass ? "grad-check suite passed" : "grad-check suite FAILED") << " in "
           << result.seconds << "s (" << result.cases.size() << " cases)\n";
  return result;
}

}  // namespace swindet
