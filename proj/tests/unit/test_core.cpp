// Unit tests for the tensor core: RNG streams, autodiff mechanics,
// elementwise/linear-algebra ops against hand-computed values, and
// finite-difference verification of every backward pass.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "swindet/checkpoint.hpp"
#include "swindet/gradcheck.hpp"
#include "swindet/ops.hpp"
#include "swindet/rng.hpp"
#include "swindet/tensor.hpp"

using namespace swindet;

using T64 = Tensor<double>;

namespace {

std::vector<double> grad_of(const T64& loss_root, T64 leaf) {
  loss_root.backward();
  return leaf.grad();
}

}  // namespace

// --------------------------------------------------------------------- rng

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::stream(42, "weights", 0);
  Rng b = Rng::stream(42, "weights", 0);
  Rng c = Rng::stream(42, "weights", 1);
  Rng d = Rng::stream(42, "data", 0);
  bool same_ab = true, same_ac = true, same_ad = true;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    same_ab = same_ab && va == b.next_u64();
    same_ac = same_ac && va == c.next_u64();
    same_ad = same_ad && va == d.next_u64();
  }
  CHECK(same_ab);
  CHECK_FALSE(same_ac);
  CHECK_FALSE(same_ad);
}

TEST_CASE("rng distributions have sane ranges and moments") {
  Rng r = Rng::stream(7, "dist", 0);
  double mn = 1e9, mx = -1e9;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    mn = std::min(mn, u);
    mx = std::max(mx, u);
  }
  CHECK(mn >= 0.0);
  CHECK(mx < 1.0);
  CHECK(mn < 0.01);
  CHECK(mx > 0.99);

  std::set<int> seen;
  for (int i = 0; i < 1000; ++i) {
    const int v = static_cast<int>(r.uniform_int(3, 7));
    REQUIRE(v >= 3);
    REQUIRE(v <= 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);

  double sum = 0, sum2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double g = r.normal();
    sum += g;
    sum2 += g * g;
  }
  CHECK(std::fabs(sum / n) < 0.05);
  CHECK(std::fabs(sum2 / n - 1.0) < 0.05);

  for (int i = 0; i < 2000; ++i) CHECK(std::fabs(r.trunc_normal(0.02)) <= 0.04 + 1e-12);
}

TEST_CASE("rng shuffle is a permutation and seed-stable") {
  Rng r1 = Rng::stream(9, "shuffle", 0);
  Rng r2 = Rng::stream(9, "shuffle", 0);
  std::vector<int> v1(50), v2(50);
  for (int i = 0; i < 50; ++i) v1[i] = v2[i] = i;
  r1.shuffle(v1.begin(), v1.end());
  r2.shuffle(v2.begin(), v2.end());
  CHECK(v1 == v2);
  auto sorted = v1;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

// ------------------------------------------------------------ tensor basics

TEST_CASE("tensor construction and scalar access") {
  auto z = T64::zeros({2, 3});
  CHECK(z.size() == 6);
  CHECK(z.shape() == Shape{2, 3});
  auto f = T64::full({2}, 1.5);
  CHECK(f.value()[1] == 1.5);
  CHECK_THROWS_AS(T64::from_data({2, 2}, {1.0, 2.0, 3.0}), shape_error);
  CHECK(T64::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(z.item(), usage_error);
}

TEST_CASE("backward requires a scalar root") {
  auto x = T64::from_data({2}, {1.0, 2.0});
  x.set_requires_grad();
  auto y = mul(x, x);
  CHECK_THROWS_AS(y.backward(), usage_error);
}

TEST_CASE("sum of squares gradient is 2x") {
  auto x = T64::from_data({3}, {1.0, 2.0, 3.0});
  x.set_requires_grad();
  auto loss = sum(mul(x, x));
  CHECK(loss.item() == 14.0);
  loss.backward();
  CHECK(x.grad() == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("backward accumulates across invocations until zero_grad") {
  auto x = T64::from_data({2}, {1.0, 2.0});
  x.set_requires_grad();
  auto loss = sum(x);
  loss.backward();
  loss.backward();
  CHECK(x.grad() == std::vector<double>{2.0, 2.0});
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("diamond graph counts both paths") {
  auto x = T64::from_data({2}, {3.0, 4.0});
  x.set_requires_grad();
  auto y = sum(add(x, x));
  y.backward();
  CHECK(x.grad() == std::vector<double>{2.0, 2.0});
}

TEST_CASE("tape is pruned when no input requires gradients") {
  auto a = T64::from_data({2}, {1.0, 2.0});
  auto b = T64::from_data({2}, {3.0, 4.0});
  auto c = add(a, b);
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->parents.empty());
}

TEST_CASE("alias shares values but keeps private gradients") {
  auto x = T64::from_data({2}, {1.0, 2.0});
  x.set_requires_grad();
  auto y = x.alias(true);
  x.value()[0] = 5.0;
  CHECK(y.value()[0] == 5.0);
  sum(mul(y, y)).backward();
  CHECK(y.grad() == std::vector<double>{10.0, 4.0});
  CHECK(x.grad() == std::vector<double>{0.0, 0.0});
}

// ------------------------------------------------------------- elementwise

TEST_CASE("broadcast add and mul against hand values") {
  auto a = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = T64::from_data({3}, {10, 20, 30});
  CHECK(add(a, b).value() == std::vector<double>{11, 22, 33, 14, 25, 36});

  auto c = T64::from_data({2, 1}, {2, 3});
  auto d = T64::from_data({1, 3}, {10, 20, 30});
  CHECK(mul(c, d).value() == std::vector<double>{20, 40, 60, 30, 60, 90});
  CHECK(sub(a, b).value() == std::vector<double>{-9, -18, -27, -6, -15, -24});

  CHECK_THROWS_AS(add(T64::zeros({2, 3}), T64::zeros({2, 4})), shape_error);
}

TEST_CASE("broadcast gradients reduce over expanded dims") {
  auto a = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = T64::from_data({3}, {10, 20, 30});
  a.set_requires_grad();
  b.set_requires_grad();
  sum(mul(a, b)).backward();
  CHECK(a.grad() == std::vector<double>{10, 20, 30, 10, 20, 30});
  CHECK(b.grad() == std::vector<double>{5, 7, 9});  // column sums of a
}

TEST_CASE("pointwise ops at pinned points") {
  auto x = T64::from_data({4}, {-1.0, 0.0, 2.0, 40.0});
  auto r = relu(x).value();
  CHECK(r == std::vector<double>{0.0, 0.0, 2.0, 40.0});
  auto s = sigmoid(x).value();
  CHECK(s[1] == 0.5);
  CHECK(std::fabs(s[3] - 1.0) < 1e-15);
  auto g = gelu(T64::from_data({2}, {0.0, 1.0})).value();
  CHECK(g[0] == 0.0);
  CHECK(std::fabs(g[1] - 0.8411919906082768) < 1e-12);

  CHECK(clamp(T64::from_data({3}, {-2.0, 0.5, 3.0}), 0.0, 1.0).value() ==
        std::vector<double>{0.0, 0.5, 1.0});
  CHECK(abs(T64::from_data({3}, {-3.0, 0.0, 2.0})).value() == std::vector<double>{3.0, 0.0, 2.0});
  CHECK(pow_scalar(T64::from_data({2}, {2.0, 3.0}), 2.0).value() == std::vector<double>{4.0, 9.0});
  auto e = swindet::exp(T64::scalar(1.0)).item();
  CHECK(std::fabs(e - 2.718281828459045) < 1e-14);
  CHECK(std::fabs(swindet::log(T64::scalar(e)).item() - 1.0) < 1e-14);
}

TEST_CASE("clamp and abs subgradients") {
  auto x = T64::from_data({3}, {-2.0, 0.5, 3.0});
  x.set_requires_grad();
  sum(clamp(x, 0.0, 1.0)).backward();
  CHECK(x.grad() == std::vector<double>{0.0, 1.0, 0.0});

  auto y = T64::from_data({3}, {-3.0, 0.0, 2.0});
  y.set_requires_grad();
  sum(abs(y)).backward();
  CHECK(y.grad() == std::vector<double>{-1.0, 0.0, 1.0});
}

TEST_CASE("mean value and gradient") {
  auto x = T64::from_data({4}, {1, 2, 3, 4});
  x.set_requires_grad();
  auto m = mean(x);
  CHECK(m.item() == 2.5);
  m.backward();
  CHECK(x.grad() == std::vector<double>{0.25, 0.25, 0.25, 0.25});
}

// --------------------------------------------------------------- shape ops

TEST_CASE("reshape aliases storage and routes gradients") {
  auto x = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad();
  auto y = reshape(x, {3, 2});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y.node()->value == x.node()->value);  // same buffer
  sum(mul(y, y)).backward();
  CHECK(x.grad() == std::vector<double>{2, 4, 6, 8, 10, 12});
  CHECK_THROWS_AS(reshape(x, {4, 2}), shape_error);
}

TEST_CASE("permute transposes a matrix") {
  auto x = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = permute(x, {1, 0});
  CHECK(y.shape() == Shape{3, 2});
  CHECK(y.value() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("concat and slice on the last dim round-trip") {
  auto a = T64::from_data({2, 2}, {1, 2, 5, 6});
  auto b = T64::from_data({2, 1}, {3, 7});
  auto cat = concat_lastdim<double>({a, b});
  CHECK(cat.shape() == Shape{2, 3});
  CHECK(cat.value() == std::vector<double>{1, 2, 3, 5, 6, 7});
  CHECK(slice_lastdim(cat, 0, 2).value() == a.value());
  CHECK(slice_lastdim(cat, 2, 1).value() == b.value());
  CHECK_THROWS_AS(slice_lastdim(cat, 2, 2), shape_error);
  CHECK_THROWS_AS(concat_lastdim<double>({a, T64::zeros({3, 1})}), shape_error);
}

TEST_CASE("gather_map fills -1 with zero and scatters gradients") {
  auto x = T64::from_data({3}, {10, 20, 30});
  x.set_requires_grad();
  auto map = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{2, -1, 0});
  auto y = gather_map(x, {3}, map);
  CHECK(y.value() == std::vector<double>{30, 0, 10});
  sum(y).backward();
  CHECK(x.grad() == std::vector<double>{1, 0, 1});
}

TEST_CASE("embedding lookup gathers rows and range-checks") {
  auto table = T64::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  table.set_requires_grad();
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{2, 0, 2});
  auto y = embedding_lookup(table, idx);
  CHECK(y.value() == std::vector<double>{5, 6, 1, 2, 5, 6});
  sum(y).backward();
  CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
  auto bad = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{3});
  CHECK_THROWS_AS(embedding_lookup(table, bad), usage_error);
}

// ------------------------------------------------------ softmax / layernorm

TEST_CASE("softmax uniform, mask annihilation, and row sums") {
  auto u = softmax_lastdim(T64::zeros({1, 3})).value();
  for (double v : u) CHECK(std::fabs(v - 1.0 / 3.0) < 1e-15);

  auto m = softmax_lastdim(T64::from_data({1, 2}, {5.0, 5.0 - 1e9})).value();
  CHECK(m[0] == 1.0);
  CHECK(m[1] == 0.0);  // exact: exp underflows

  Rng r = Rng::stream(3, "softmax", 0);
  auto x = T64::randn({4, 7}, r);
  auto y = softmax_lastdim(x).value();
  for (int row = 0; row < 4; ++row) {
    double s = 0;
    for (int j = 0; j < 7; ++j) s += y[row * 7 + j];
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm pinned values") {
  auto g1 = T64::full({2}, 1.0);
  auto b0 = T64::zeros({2});
  auto c = layer_norm(T64::from_data({1, 2}, {5.0, 5.0}), g1, b0, 1e-5).value();
  CHECK(c == std::vector<double>{0.0, 0.0});  // zero variance handled by eps

  auto y = layer_norm(T64::from_data({1, 2}, {1.0, 3.0}), g1, b0, 1e-5).value();
  CHECK(std::fabs(y[0] + 0.9999950000374997) < 1e-12);
  CHECK(std::fabs(y[1] - 0.9999950000374997) < 1e-12);

  auto g2 = T64::from_data({2}, {2.0, 2.0});
  auto b2 = T64::from_data({2}, {10.0, 10.0});
  auto z = layer_norm(T64::from_data({1, 2}, {1.0, 3.0}), g2, b2, 1e-5).value();
  CHECK(std::fabs(z[0] - (10.0 - 1.9999900000749994)) < 1e-12);
  CHECK(std::fabs(z[1] - (10.0 + 1.9999900000749994)) < 1e-12);

  CHECK_THROWS_AS(layer_norm(T64::zeros({1, 2}), T64::zeros({3}), b0, 1e-5), shape_error);
  CHECK_THROWS_AS(layer_norm(T64::zeros({1, 2}), g1, b0, 0.0), usage_error);
}

// ------------------------------------------------------------ linear algebra

TEST_CASE("matmul against hand product and identity") {
  auto a = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = T64::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  CHECK(matmul(a, b).value() == std::vector<double>{58, 64, 139, 154});

  auto eye = T64::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(matmul(a, eye).value() == a.value());
  CHECK_THROWS_AS(matmul(a, T64::zeros({2, 2})), shape_error);
}

TEST_CASE("matmul broadcasts batch dims") {
  auto a = T64::from_data({2, 2, 2}, {1, 0, 0, 1, 2, 0, 0, 2});
  auto b = T64::from_data({2, 2}, {1, 2, 3, 4});
  auto y = matmul(a, b);
  CHECK(y.shape() == Shape{2, 2, 2});
  CHECK(y.value() == std::vector<double>{1, 2, 3, 4, 2, 4, 6, 8});
}

TEST_CASE("linear matches matmul plus bias and flattens leading dims") {
  auto x = T64::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto w = T64::from_data({2, 3}, {1, 0, 1, 0, 1, 1});
  auto b = T64::from_data({3}, {10, 20, 30});
  auto y = linear(x, w, b);
  CHECK(y.shape() == Shape{2, 2, 3});
  CHECK(y.value() ==
        std::vector<double>{11, 22, 33, 13, 24, 37, 15, 26, 41, 17, 28, 45});
  auto yn = linear(x, w);  // no bias
  CHECK(yn.value()[0] == 1.0);
  CHECK_THROWS_AS(linear(x, T64::zeros({3, 2})), shape_error);
  CHECK_THROWS_AS(linear(x, w, T64::zeros({2})), shape_error);
}

// -------------------------------------------------------------------- conv

TEST_CASE("conv2d 3x3 ones kernel computes neighborhood sums") {
  auto x = T64::full({1, 1, 4, 4}, 1.0);
  auto w = T64::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, Tensor<double>(), 1, 1);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.value() == std::vector<double>{4, 6, 6, 4, 6, 9, 9, 6, 6, 9, 9, 6, 4, 6, 6, 4});
}

TEST_CASE("conv2d 1x1 kernel scales, patch conv pools, errors fire") {
  auto x = T64::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = T64::from_data({1, 1, 1, 1}, {2.0});
  CHECK(conv2d(x, w, Tensor<double>(), 1, 0).value() == std::vector<double>{2, 4, 6, 8});

  auto wp = T64::full({1, 1, 2, 2}, 1.0);
  auto yp = conv2d(x, wp, Tensor<double>(), 2, 0);  // stride == kernel: patch embed case
  CHECK(yp.shape() == Shape{1, 1, 1, 1});
  CHECK(yp.item() == 10.0);

  auto b = T64::from_data({1}, {100.0});
  CHECK(conv2d(x, w, b, 1, 0).value() == std::vector<double>{102, 104, 106, 108});

  CHECK_THROWS_AS(conv2d(T64::zeros({1, 1, 5, 5}), wp, Tensor<double>(), 2, 0), shape_error);
  CHECK_THROWS_AS(conv2d(x, wp, Tensor<double>(), 1, 0), usage_error);  // even kernel, stride 1
  CHECK_THROWS_AS(conv2d(x, T64::zeros({1, 2, 1, 1}), Tensor<double>(), 1, 0), shape_error);
}

// ------------------------------------------------------ finite differences

TEST_CASE("finite differences validate elementwise and broadcast backward") {
  Rng r = Rng::stream(11, "fd-elem", 0);
  auto a = T64::randn({2, 3}, r);
  auto b = T64::randn({3}, r);
  a.set_requires_grad();
  b.set_requires_grad();
  auto rep = grad_check<double>(
      [&] { return sum(mul(sigmoid(add(a, b)), sub(a, b))); }, {{"a", a}, {"b", b}});
  INFO(rep.worst_param << "[" << rep.worst_index << "] " << rep.worst_analytic << " vs "
                       << rep.worst_numeric);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate activations") {
  Rng r = Rng::stream(12, "fd-act", 0);
  auto x = T64::randn({17}, r);
  // keep clear of the relu/abs kinks and clamp boundaries
  for (auto& v : x.value())
    if (std::fabs(v) < 0.05) v = 0.1;
  x.set_requires_grad();
  auto rep = grad_check<double>(
      [&] {
        auto t = add(gelu(x), relu(x));
        t = add(t, swindet::exp(mul_scalar(x, 0.1)));
        t = add(t, pow_scalar(clamp(x, -1.8, 1.8), 2.0));
        t = add(t, abs(x));
        return mean(t);
      },
      {{"x", x}});
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate matmul, linear, layer_norm, softmax") {
  Rng r = Rng::stream(13, "fd-la", 0);
  auto x = T64::randn({2, 3, 4}, r);
  auto w = T64::randn({4, 5}, r, 0.5);
  auto b = T64::randn({5}, r, 0.5);
  auto g = T64::randn({5}, r, 0.5);
  auto be = T64::randn({5}, r, 0.5);
  auto m = T64::randn({5, 3}, r, 0.5);
  for (auto* t : {&x, &w, &b, &g, &be, &m}) t->set_requires_grad();
  auto rep = grad_check<double>(
      [&] {
        auto h = layer_norm(linear(x, w, b), g, be, 1e-5);
        auto s = softmax_lastdim(h);
        return sum(matmul(s, m));
      },
      {{"x", x}, {"w", w}, {"b", b}, {"g", g}, {"be", be}, {"m", m}});
  INFO(rep.worst_param << "[" << rep.worst_index << "]");
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate batched-broadcast matmul") {
  Rng r = Rng::stream(14, "fd-bmm", 0);
  auto a = T64::randn({2, 2, 3, 4}, r);
  auto b = T64::randn({2, 1, 4, 2}, r);  // broadcast over dim 1
  a.set_requires_grad();
  b.set_requires_grad();
  auto rep =
      grad_check<double>([&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {{"a", a}, {"b", b}});
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate conv2d") {
  Rng r = Rng::stream(15, "fd-conv", 0);
  auto x = T64::randn({2, 2, 5, 5}, r);
  auto w = T64::randn({3, 2, 3, 3}, r, 0.5);
  auto b = T64::randn({3}, r, 0.5);
  x.set_requires_grad();
  w.set_requires_grad();
  b.set_requires_grad();
  auto rep = grad_check<double>([&] { return mean(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); },
                                {{"x", x}, {"w", w}, {"b", b}});
  CHECK(rep.max_rel_err < 1e-6);

  auto x2 = T64::randn({2, 2, 4, 4}, r);
  auto wp = T64::randn({4, 2, 2, 2}, r, 0.5);
  x2.set_requires_grad();
  wp.set_requires_grad();
  auto rep2 = grad_check<double>([&] { return mean(conv2d(x2, wp, Tensor<double>(), 2, 0)); },
                                 {{"x2", x2}, {"wp", wp}});
  CHECK(rep2.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate shape ops and gathers") {
  Rng r = Rng::stream(16, "fd-shape", 0);
  auto a = T64::randn({2, 3, 4}, r);
  auto b = T64::randn({2, 3, 2}, r);
  a.set_requires_grad();
  b.set_requires_grad();
  auto map = std::make_shared<std::vector<std::int64_t>>();
  Rng mr = Rng::stream(16, "fd-shape-map", 0);
  for (int i = 0; i < 30; ++i)
    map->push_back(mr.uniform() < 0.2 ? -1 : static_cast<std::int64_t>(mr.uniform_int(0, 23)));
  auto rep = grad_check<double>(
      [&] {
        auto cat = concat_lastdim<double>({a, b});          // [2,3,6]
        auto p = permute(cat, {2, 0, 1});                   // [6,2,3]
        auto sl = slice_lastdim(reshape(p, {6, 6}), 1, 4);  // [6,4]
        auto gm = gather_map(a, {30}, map);
        return add(sum(mul(sl, sl)), sum(gm));
      },
      {{"a", a}, {"b", b}});
  CHECK(rep.max_rel_err < 1e-6);
}

// -------------------------------------------------------------- checkpoint

TEST_CASE("checkpoint round-trips tensors bit-exactly") {
  Checkpoint ck;
  Rng r = Rng::stream(21, "ckpt", 0);
  std::vector<float> wf(12);
  for (auto& v : wf) v = static_cast<float>(r.normal());
  std::vector<double> wd(6);
  for (auto& v : wd) v = r.normal();
  ck.put<float>("layer.weight", {3, 4}, wf);
  ck.put<double>("layer.stats", {6}, wd);
  ck.meta = {{"epoch", 3}, {"step", 1234}, {"precision", "f32"}};
  ck.save("ckpt_roundtrip_test.bin");

  auto lk = Checkpoint::load("ckpt_roundtrip_test.bin");
  auto [sf, vf] = lk.get<float>("layer.weight");
  CHECK(sf == Shape{3, 4});
  CHECK(std::memcmp(vf.data(), wf.data(), wf.size() * sizeof(float)) == 0);
  auto [sd, vd] = lk.get<double>("layer.stats");
  CHECK(sd == Shape{6});
  CHECK(std::memcmp(vd.data(), wd.data(), wd.size() * sizeof(double)) == 0);
  CHECK(lk.meta.at("step").get<int>() == 1234);
  CHECK(lk.meta.at("precision").get<std::string>() == "f32");

  CHECK_THROWS_AS(lk.get<float>("missing"), io_error);
  CHECK_THROWS_AS(lk.get<double>("layer.weight"), io_error);  // dtype mismatch
  CHECK_THROWS_AS(Checkpoint::load("no_such_file.bin"), io_error);
  std::remove("ckpt_roundtrip_test.bin");
}

TEST_CASE("checkpoint name list is sorted and complete") {
  Checkpoint ck;
  ck.put<float>("b", {1}, {1.0f});
  ck.put<float>("a", {1}, {2.0f});
  ck.put<float>("c", {1}, {3.0f});
  CHECK(ck.names() == std::vector<std::string>{"a", "b", "c"});
  CHECK(ck.has("a"));
  CHECK_FALSE(ck.has("z"));
}

// --------------------------------------------------------------- gradcheck

TEST_CASE("grad_check flags a deliberately broken gradient") {
  // abs has slope -1 at x<0; a fake op that claims slope +1 must be caught.
  auto x = T64::from_data({1}, {-2.0});
  x.set_requires_grad();
  auto broken = detail::pointwise(
      x, [](double v) { return std::fabs(v); }, [](double, double) { return 1.0; });
  // grad_check builds its own graph each call; wrap construction in the loss
  auto rep = grad_check<double>(
      [&] {
        return sum(detail::pointwise(
            x, [](double v) { return std::fabs(v); }, [](double, double) { return 1.0; }));
      },
      {{"x", x}});
  CHECK(rep.max_rel_err > 0.9);
  (void)broken;
}
