#pragma once

// Differentiable operations on Tensor. Forward results are computed eagerly;
// each op records a closure that pulls the output gradient into the parents.
// Parent order inside each closure matches the order passed to make_op.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "swindet/tensor.hpp"

#if defined(__GNUC__) || defined(__clang__)
#define SWINDET_RESTRICT __restrict__
#else
#define SWINDET_RESTRICT
#endif

namespace swindet {

namespace detail {

// ---------------------------------------------------------------- broadcast

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw shape_error(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                        shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `s` aligned to rank `r`, zeroed on broadcast dims.
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> st(r, 0);
  std::int64_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (r - s.size());
    st[oi] = (s[i] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= s[i];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <typename F>
void broadcast_iterate(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::int64_t n = shape_numel(out);
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t r = out.size();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind, const char* name) {
  const auto& av = a.value();
  const auto& bv = b.value();
  Shape os = broadcast_shapes(a.shape(), b.shape(), name);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(os)));
  const bool same = a.shape() == b.shape();
  if (same) {
    const std::size_t n = out.size();
    switch (kind) {
      case BinKind::Add:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
        break;
      case BinKind::Sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
        break;
      case BinKind::Mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
        break;
    }
  } else {
    broadcast_iterate(os, a.shape(), b.shape(), [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      switch (kind) {
        case BinKind::Add: out[o] = av[ia] + bv[ib]; break;
        case BinKind::Sub: out[o] = av[ia] - bv[ib]; break;
        case BinKind::Mul: out[o] = av[ia] * bv[ib]; break;
      }
    });
  }
  Shape as = a.shape(), bs = b.shape();
  return make_op<T>(
      std::move(os), std::move(out), {a, b},
      [kind, as = std::move(as), bs = std::move(bs), same](TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        const auto& av2 = *pa.value;
        const auto& bv2 = *pb.value;
        if (same) {
          const std::size_t n = g.size();
          if (pa.requires_grad) {
            auto& ga = pa.ensure_grad();
            switch (kind) {
              case BinKind::Add:
              case BinKind::Sub:
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                break;
              case BinKind::Mul:
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv2[i];
                break;
            }
          }
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            switch (kind) {
              case BinKind::Add:
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                break;
              case BinKind::Sub:
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                break;
              case BinKind::Mul:
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av2[i];
                break;
            }
          }
          return;
        }
        const bool need_a = pa.requires_grad, need_b = pb.requires_grad;
        if (need_a) pa.ensure_grad();
        if (need_b) pb.ensure_grad();
        broadcast_iterate(self.shape, as, bs, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
          switch (kind) {
            case BinKind::Add:
              if (need_a) pa.grad[ia] += g[o];
              if (need_b) pb.grad[ib] += g[o];
              break;
            case BinKind::Sub:
              if (need_a) pa.grad[ia] += g[o];
              if (need_b) pb.grad[ib] -= g[o];
              break;
            case BinKind::Mul:
              if (need_a) pa.grad[ia] += g[o] * bv2[ib];
              if (need_b) pb.grad[ib] += g[o] * av2[ia];
              break;
          }
        });
      });
}

// Pointwise with dy/dx computed from (x, y).
template <typename T, typename Fwd, typename Dfdx>
Tensor<T> pointwise(const Tensor<T>& x, Fwd f, Dfdx df) {
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_op<T>(x.shape(), std::move(out), {x}, [df](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.ensure_grad();
    const auto& xv2 = *p.value;
    const auto& yv = *self.value;
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv2[i], yv[i]);
  });
}

}  // namespace detail

// ------------------------------------------------------------- arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::pointwise(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::pointwise(
      x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

// ------------------------------------------------------------- activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

// tanh approximation of GELU; the same expression is used for forward and
// for the analytic derivative.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  // The tanh values are kept for backward, which would otherwise pay for a
  // second transcendental pass over the tensor.
  const auto& xv = x.value();
  auto tanhs = std::make_shared<std::vector<T>>(xv.size());
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv[i];
    const T t = std::tanh(k * (v + c * v * v * v));
    (*tanhs)[i] = t;
    out[i] = T(0.5) * v * (T(1) + t);
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x},
                            [tanhs](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& xv2 = *p.value;
                              const auto& g = self.grad;
                              const auto& ts = *tanhs;
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                const T v = xv2[i], t = ts[i];
                                const T du = k * (T(1) + T(3) * c * v * v);
                                gx[i] += g[i] * (T(0.5) * (T(1) + t) +
                                                 T(0.5) * v * (T(1) - t * t) * du);
                              }
                            });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  return detail::pointwise(
      x, [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return p * std::pow(v, p - T(1)); });
}
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::pointwise(
      x, [](T v) { return std::fabs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::pointwise(
      x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto& xv = x.value();
  T s = 0;
  for (T v : xv) s += v;
  return detail::make_op<T>({1}, {s}, {x}, [](detail::TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& gx = p.ensure_grad();
    const T g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const auto n = static_cast<T>(x.size());
  return mul_scalar(sum(x), T(1) / n);
}

// ------------------------------------------------------------- shape ops

// Shares the value buffer; gradient is the identity on flat storage.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape ns) {
  if (shape_numel(ns) != x.size())
    throw shape_error("reshape: " + shape_str(x.shape()) + " to " + shape_str(ns));
  auto node = std::make_shared<detail::TensorNode<T>>();
  node->shape = std::move(ns);
  node->value = x.node()->value;
  if (x.requires_grad()) {
    node->requires_grad = true;
    node->parents = {x.node()};
    node->backprop = [](detail::TensorNode<T>& self) {
      auto& p = *self.parents[0];
      auto& gx = p.ensure_grad();
      const auto& g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  }
  return Tensor<T>(std::move(node));
}

// Element gather through a precomputed flat index map; -1 fills with zero.
// The gradient scatters through the same map.
template <typename T>
Tensor<T> gather_map(const Tensor<T>& x, Shape out_shape,
                     std::shared_ptr<const std::vector<std::int64_t>> map) {
  const auto& xv = x.value();
  const auto& m = *map;
  std::vector<T> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= 0 ? xv[m[i]] : T(0);
  return detail::make_op<T>(std::move(out_shape), std::move(out), {x},
                            [map](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              const auto& m2 = *map;
                              for (std::size_t i = 0; i < m2.size(); ++i)
                                if (m2[i] >= 0) gx[m2[i]] += g[i];
                            });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  const auto& s = x.shape();
  if (axes.size() != s.size()) throw shape_error("permute: axes rank mismatch for " + shape_str(s));
  const std::size_t r = s.size();
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = s[axes[i]];
  std::vector<std::int64_t> in_strides(r);
  std::int64_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = st;
    st *= s[i];
  }
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.size()));
  std::vector<std::int64_t> idx(r, 0);
  for (std::int64_t o = 0; o < x.size(); ++o) {
    std::int64_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[axes[i]];
    (*map)[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < os[d]) break;
      idx[d] = 0;
    }
  }
  return gather_map(x, os, std::move(map));
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  const auto& s = x.shape();
  const std::int64_t last = s.back();
  if (start < 0 || len <= 0 || start + len > last)
    throw shape_error("slice_lastdim: [" + std::to_string(start) + ", " +
                      std::to_string(start + len) + ") out of " + shape_str(s));
  Shape os = s;
  os.back() = len;
  const std::int64_t rows = x.size() / last;
  const auto& xv = x.value();
  std::vector<T> out(static_cast<std::size_t>(rows * len));
  for (std::int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, xv.data() + r * last + start, sizeof(T) * len);
  return detail::make_op<T>(std::move(os), std::move(out), {x},
                            [start, len, last, rows](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& g = self.grad;
                              for (std::int64_t r = 0; r < rows; ++r) {
                                T* dst = gx.data() + r * last + start;
                                const T* src = g.data() + r * len;
                                for (std::int64_t j = 0; j < len; ++j) dst[j] += src[j];
                              }
                            });
}

template <typename T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw usage_error("concat_lastdim: empty input list");
  Shape lead = xs[0].shape();
  lead.pop_back();
  std::int64_t total = 0;
  std::vector<std::int64_t> widths;
  for (const auto& x : xs) {
    Shape l = x.shape();
    const std::int64_t w = l.back();
    l.pop_back();
    if (l != lead)
      throw shape_error("concat_lastdim: mismatched shapes " + shape_str(xs[0].shape()) + " vs " +
                        shape_str(x.shape()));
    widths.push_back(w);
    total += w;
  }
  const std::int64_t rows = shape_numel(lead);
  Shape os = lead;
  os.push_back(total);
  std::vector<T> out(static_cast<std::size_t>(rows * total));
  std::int64_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const auto& xv = xs[k].value();
    for (std::int64_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * total + off, xv.data() + r * widths[k], sizeof(T) * widths[k]);
    off += widths[k];
  }
  return detail::make_op<T>(std::move(os), std::move(out), xs,
                            [widths, rows, total](detail::TensorNode<T>& self) {
                              const auto& g = self.grad;
                              std::int64_t off2 = 0;
                              for (std::size_t k = 0; k < widths.size(); ++k) {
                                auto& p = *self.parents[k];
                                if (p.requires_grad) {
                                  auto& gx = p.ensure_grad();
                                  for (std::int64_t r = 0; r < rows; ++r) {
                                    T* dst = gx.data() + r * widths[k];
                                    const T* src = g.data() + r * total + off2;
                                    for (std::int64_t j = 0; j < widths[k]; ++j) dst[j] += src[j];
                                  }
                                }
                                off2 += widths[k];
                              }
                            });
}

// ------------------------------------------------------- softmax / layernorm

// Numerically stable softmax over the last dim. Entries at the -1e9 mask
// surrogate underflow to exactly zero. NaN in gives NaN out.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::int64_t last = x.shape().back();
  const std::int64_t rows = x.size() / last;
  const auto& xv = x.value();
  std::vector<T> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * last;
    T* yr = out.data() + r * last;
    T mx = xr[0];
    for (std::int64_t j = 1; j < last; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (std::int64_t j = 0; j < last; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    const T inv = T(1) / s;
    for (std::int64_t j = 0; j < last; ++j) yr[j] *= inv;
  }
  return detail::make_op<T>(x.shape(), std::move(out), {x},
                            [last, rows](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gx = p.ensure_grad();
                              const auto& y = *self.value;
                              const auto& g = self.grad;
                              for (std::int64_t r = 0; r < rows; ++r) {
                                const T* yr = y.data() + r * last;
                                const T* gr = g.data() + r * last;
                                T* gxr = gx.data() + r * last;
                                T dot = 0;
                                for (std::int64_t j = 0; j < last; ++j) dot += gr[j] * yr[j];
                                for (std::int64_t j = 0; j < last; ++j)
                                  gxr[j] += yr[j] * (gr[j] - dot);
                              }
                            });
}

// Per-row normalization over the last dim followed by the affine (gamma, beta).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (eps <= T(0)) throw usage_error("layer_norm: eps must be positive");
  const std::int64_t C = x.shape().back();
  if (gamma.size() != C || beta.size() != C)
    throw shape_error("layer_norm: affine size mismatch, x " + shape_str(x.shape()) + " gamma " +
                      shape_str(gamma.shape()));
  const std::int64_t rows = x.size() / C;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<T> out(xv.size());
  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * 2));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * C;
    T* yr = out.data() + r * C;
    T m = 0;
    for (std::int64_t j = 0; j < C; ++j) m += xr[j];
    m /= static_cast<T>(C);
    T var = 0;
    for (std::int64_t j = 0; j < C; ++j) {
      const T d = xr[j] - m;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T rstd = T(1) / std::sqrt(var + eps);
    (*stats)[2 * r] = m;
    (*stats)[2 * r + 1] = rstd;
    for (std::int64_t j = 0; j < C; ++j) yr[j] = (xr[j] - m) * rstd * gv[j] + bv[j];
  }
  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta}, [C, rows, stats](detail::TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& xv2 = *px.value;
        const auto& gv2 = *pg.value;
        const auto& g = self.grad;
        const bool nx = px.requires_grad, ng = pg.requires_grad, nb = pb.requires_grad;
        if (nx) px.ensure_grad();
        if (ng) pg.ensure_grad();
        if (nb) pb.ensure_grad();
        std::vector<T> xhat(static_cast<std::size_t>(C));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T m = (*stats)[2 * r], rstd = (*stats)[2 * r + 1];
          const T* xr = xv2.data() + r * C;
          const T* gr = g.data() + r * C;
          for (std::int64_t j = 0; j < C; ++j) xhat[j] = (xr[j] - m) * rstd;
          if (ng)
            for (std::int64_t j = 0; j < C; ++j) pg.grad[j] += gr[j] * xhat[j];
          if (nb)
            for (std::int64_t j = 0; j < C; ++j) pb.grad[j] += gr[j];
          if (nx) {
            T m1 = 0, m2 = 0;
            for (std::int64_t j = 0; j < C; ++j) {
              const T dxh = gr[j] * gv2[j];
              m1 += dxh;
              m2 += dxh * xhat[j];
            }
            m1 /= static_cast<T>(C);
            m2 /= static_cast<T>(C);
            T* gxr = px.grad.data() + r * C;
            for (std::int64_t j = 0; j < C; ++j)
              gxr[j] += rstd * (gr[j] * gv2[j] - m1 - xhat[j] * m2);
          }
        }
      });
}

// ------------------------------------------------------------------- gemm

namespace detail {

// c[M,N] (+)= a[M,K] * b[K,N]. 4x8 output tiles are held in registers
// across the whole K loop, so each b row is reloaded once per four output
// rows instead of once per row; tails fall back to the simple kernel.
template <typename T>
void gemm_nn(const T* SWINDET_RESTRICT a, const T* SWINDET_RESTRICT b, T* SWINDET_RESTRICT c,
             std::int64_t M, std::int64_t K, std::int64_t N, bool accumulate) {
#ifdef SWINDET_GEMM_HOOK
  SWINDET_GEMM_HOOK(M, K, N);
#endif
  if (!accumulate)
    for (std::int64_t i = 0; i < M * N; ++i) c[i] = T(0);
  constexpr std::int64_t MR = 4, NR = 8;
  const std::int64_t Mt = M - M % MR, Nt = N - N % NR;
  for (std::int64_t i0 = 0; i0 < Mt; i0 += MR) {
    const T* SWINDET_RESTRICT a0 = a + (i0 + 0) * K;
    const T* SWINDET_RESTRICT a1 = a + (i0 + 1) * K;
    const T* SWINDET_RESTRICT a2 = a + (i0 + 2) * K;
    const T* SWINDET_RESTRICT a3 = a + (i0 + 3) * K;
    for (std::int64_t j0 = 0; j0 < Nt; j0 += NR) {
      T acc0[NR], acc1[NR], acc2[NR], acc3[NR];
      for (int s = 0; s < NR; ++s) acc0[s] = c[(i0 + 0) * N + j0 + s];
      for (int s = 0; s < NR; ++s) acc1[s] = c[(i0 + 1) * N + j0 + s];
      for (int s = 0; s < NR; ++s) acc2[s] = c[(i0 + 2) * N + j0 + s];
      for (int s = 0; s < NR; ++s) acc3[s] = c[(i0 + 3) * N + j0 + s];
      for (std::int64_t k = 0; k < K; ++k) {
        const T* SWINDET_RESTRICT bk = b + k * N + j0;
        const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
        for (int s = 0; s < NR; ++s) acc0[s] += v0 * bk[s];
        for (int s = 0; s < NR; ++s) acc1[s] += v1 * bk[s];
        for (int s = 0; s < NR; ++s) acc2[s] += v2 * bk[s];
        for (int s = 0; s < NR; ++s) acc3[s] += v3 * bk[s];
      }
      for (int s = 0; s < NR; ++s) c[(i0 + 0) * N + j0 + s] = acc0[s];
      for (int s = 0; s < NR; ++s) c[(i0 + 1) * N + j0 + s] = acc1[s];
      for (int s = 0; s < NR; ++s) c[(i0 + 2) * N + j0 + s] = acc2[s];
      for (int s = 0; s < NR; ++s) c[(i0 + 3) * N + j0 + s] = acc3[s];
    }
    if (Nt < N)
      for (std::int64_t k = 0; k < K; ++k) {
        const T* SWINDET_RESTRICT bk = b + k * N;
        const T v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
        for (std::int64_t j = Nt; j < N; ++j) {
          const T bj = bk[j];
          c[(i0 + 0) * N + j] += v0 * bj;
          c[(i0 + 1) * N + j] += v1 * bj;
          c[(i0 + 2) * N + j] += v2 * bj;
          c[(i0 + 3) * N + j] += v3 * bj;
        }
      }
  }
  for (std::int64_t i = Mt; i < M; ++i) {
    T* SWINDET_RESTRICT ci = c + i * N;
    const T* ai = a + i * K;
    for (std::int64_t k = 0; k < K; ++k) {
      const T aik = ai[k];
      const T* SWINDET_RESTRICT bk = b + k * N;
      for (std::int64_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
    }
  }
}

template <typename T>
void transpose_2d(const T* SWINDET_RESTRICT src, T* SWINDET_RESTRICT dst, std::int64_t R,
                  std::int64_t C) {
  constexpr std::int64_t B = 32;
  for (std::int64_t i0 = 0; i0 < R; i0 += B)
    for (std::int64_t j0 = 0; j0 < C; j0 += B) {
      const std::int64_t i1 = std::min(i0 + B, R), j1 = std::min(j0 + B, C);
      for (std::int64_t i = i0; i < i1; ++i)
        for (std::int64_t j = j0; j < j1; ++j) dst[j * R + i] = src[i * C + j];
    }
}

}  // namespace detail

// Batched matrix product a[..,M,K] * b[..,K,N] with broadcastable batch dims.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as.back() != bs[bs.size() - 2])
    throw shape_error("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  const std::int64_t M = as[as.size() - 2], K = as.back(), N = bs.back();
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  Shape batch = detail::broadcast_shapes(abatch, bbatch, "matmul");
  const std::int64_t nb = shape_numel(batch);
  Shape os = batch;
  os.push_back(M);
  os.push_back(N);
  std::vector<T> out(static_cast<std::size_t>(nb * M * N));

  // flat batch index -> element offsets
  auto offsets = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(nb * 2));
  detail::broadcast_iterate(batch, abatch, bbatch,
                            [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                              (*offsets)[2 * o] = ia * M * K;
                              (*offsets)[2 * o + 1] = ib * K * N;
                            });
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::int64_t i = 0; i < nb; ++i)
    detail::gemm_nn(av.data() + (*offsets)[2 * i], bv.data() + (*offsets)[2 * i + 1],
                    out.data() + i * M * N, M, K, N, false);
  return detail::make_op<T>(
      std::move(os), std::move(out), {a, b}, [M, K, N, nb, offsets](detail::TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        const auto& av2 = *pa.value;
        const auto& bv2 = *pb.value;
        std::vector<T> tb, ta;
        if (pa.requires_grad) {
          auto& ga = pa.ensure_grad();
          tb.resize(static_cast<std::size_t>(K * N));
          for (std::int64_t i = 0; i < nb; ++i) {
            detail::transpose_2d(bv2.data() + (*offsets)[2 * i + 1], tb.data(), K, N);
            detail::gemm_nn(g.data() + i * M * N, tb.data(), ga.data() + (*offsets)[2 * i], M, N, K,
                            true);
          }
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          ta.resize(static_cast<std::size_t>(M * K));
          for (std::int64_t i = 0; i < nb; ++i) {
            detail::transpose_2d(av2.data() + (*offsets)[2 * i], ta.data(), M, K);
            detail::gemm_nn(ta.data(), g.data() + i * M * N, gb.data() + (*offsets)[2 * i + 1], K,
                            M, N, true);
          }
        }
      });
}

// x[.., In] * w[In, Out] + b. Leading dims of x are flattened into rows.
// Pass an empty (default) tensor to skip the bias.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
  const auto& xs = x.shape();
  if (w.rank() != 2 || xs.back() != w.dim(0))
    throw shape_error("linear: input " + shape_str(xs) + " vs weight " + shape_str(w.shape()));
  const std::int64_t In = w.dim(0), Out = w.dim(1);
  const std::int64_t R = x.size() / In;
  const bool has_bias = b.defined();
  if (has_bias && b.size() != Out)
    throw shape_error("linear: bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  Shape os = xs;
  os.back() = Out;
  std::vector<T> out(static_cast<std::size_t>(R * Out));
  if (has_bias) {
    const auto& bvv = b.value();
    for (std::int64_t r = 0; r < R; ++r)
      std::memcpy(out.data() + r * Out, bvv.data(), sizeof(T) * Out);
  }
  detail::gemm_nn(x.value().data(), w.value().data(), out.data(), R, In, Out, has_bias);

  std::vector<Tensor<T>> parents = has_bias ? std::vector<Tensor<T>>{x, w, b}
                                            : std::vector<Tensor<T>>{x, w};
  return detail::make_op<T>(
      std::move(os), std::move(out), std::move(parents),
      [R, In, Out, has_bias](detail::TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const auto& g = self.grad;
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          std::vector<T> wt(static_cast<std::size_t>(In * Out));
          detail::transpose_2d(pw.value->data(), wt.data(), In, Out);
          detail::gemm_nn(g.data(), wt.data(), gx.data(), R, Out, In, true);
        }
        if (pw.requires_grad) {
          auto& gw = pw.ensure_grad();
          std::vector<T> xt(static_cast<std::size_t>(R * In));
          detail::transpose_2d(px.value->data(), xt.data(), R, In);
          detail::gemm_nn(xt.data(), g.data(), gw.data(), In, R, Out, true);
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (std::int64_t r = 0; r < R; ++r) {
            const T* gr = g.data() + r * Out;
            for (std::int64_t j = 0; j < Out; ++j) gb[j] += gr[j];
          }
        }
      });
}

// ------------------------------------------------------------------- conv

namespace detail {

template <typename T>
void im2col(const T* x, T* col, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t kH,
            std::int64_t kW, std::int64_t stride, std::int64_t pad, std::int64_t OH,
            std::int64_t OW) {
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t kh = 0; kh < kH; ++kh)
      for (std::int64_t kw = 0; kw < kW; ++kw) {
        T* row = col + ((ci * kH + kh) * kW + kw) * OH * OW;
        const T* xc = x + ci * H * W;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          const std::int64_t ih = oh * stride - pad + kh;
          T* dst = row + oh * OW;
          if (ih < 0 || ih >= H) {
            for (std::int64_t ow = 0; ow < OW; ++ow) dst[ow] = T(0);
            continue;
          }
          const T* xr = xc + ih * W;
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const std::int64_t iw = ow * stride - pad + kw;
            dst[ow] = (iw >= 0 && iw < W) ? xr[iw] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* col, T* gx, std::int64_t Cin, std::int64_t H, std::int64_t W,
                std::int64_t kH, std::int64_t kW, std::int64_t stride, std::int64_t pad,
                std::int64_t OH, std::int64_t OW) {
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t kh = 0; kh < kH; ++kh)
      for (std::int64_t kw = 0; kw < kW; ++kw) {
        const T* row = col + ((ci * kH + kh) * kW + kw) * OH * OW;
        T* xc = gx + ci * H * W;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          const std::int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          const T* src = row + oh * OW;
          T* xr = xc + ih * W;
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const std::int64_t iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) xr[iw] += src[ow];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation: x[B,Cin,H,W], w[Cout,Cin,kH,kW], optional b[Cout].
// Kernels must be odd-sized, or exactly match the stride with no padding
// (the patch-embedding case).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                 std::int64_t pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw shape_error("conv2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const std::int64_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const std::int64_t Cout = ws[0], kH = ws[2], kW = ws[3];
  const bool odd = (kH % 2 == 1 && kW % 2 == 1);
  const bool patch = (stride == kH && stride == kW && pad == 0);
  if (!odd && !patch)
    throw usage_error("conv2d: kernel must be odd-sized or stride-matching, got " + shape_str(ws));
  if ((H + 2 * pad - kH) % stride != 0 || (W + 2 * pad - kW) % stride != 0)
    throw shape_error("conv2d: non-integral output size for input " + shape_str(xs) + " kernel " +
                      shape_str(ws) + " stride " + std::to_string(stride) + " pad " +
                      std::to_string(pad));
  const std::int64_t OH = (H + 2 * pad - kH) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - kW) / stride + 1;
  const bool has_bias = b.defined();
  if (has_bias && b.size() != Cout)
    throw shape_error("conv2d: bias " + shape_str(b.shape()) + " vs weight " + shape_str(ws));

  const std::int64_t CKK = Cin * kH * kW;
  std::vector<T> out(static_cast<std::size_t>(B * Cout * OH * OW));
  std::vector<T> col(static_cast<std::size_t>(CKK * OH * OW));
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::int64_t n = 0; n < B; ++n) {
    detail::im2col(xv.data() + n * Cin * H * W, col.data(), Cin, H, W, kH, kW, stride, pad, OH, OW);
    T* on = out.data() + n * Cout * OH * OW;
    if (has_bias) {
      const auto& bvv = b.value();
      for (std::int64_t c = 0; c < Cout; ++c)
        for (std::int64_t p = 0; p < OH * OW; ++p) on[c * OH * OW + p] = bvv[c];
    }
    detail::gemm_nn(wv.data(), col.data(), on, Cout, CKK, OH * OW, has_bias);
  }

  std::vector<Tensor<T>> parents = has_bias ? std::vector<Tensor<T>>{x, w, b}
                                            : std::vector<Tensor<T>>{x, w};
  return detail::make_op<T>(
      Shape{B, Cout, OH, OW}, std::move(out), std::move(parents),
      [=](detail::TensorNode<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const auto& g = self.grad;
        const auto& xv2 = *px.value;
        const auto& wv2 = *pw.value;
        const bool nx = px.requires_grad, nw = pw.requires_grad;
        if (nx) px.ensure_grad();
        if (nw) pw.ensure_grad();
        std::vector<T> col2(static_cast<std::size_t>(CKK * OH * OW));
        std::vector<T> colT, wT, dcol;
        if (nw) colT.resize(static_cast<std::size_t>(OH * OW * CKK));
        if (nx) {
          wT.resize(static_cast<std::size_t>(CKK * Cout));
          detail::transpose_2d(wv2.data(), wT.data(), Cout, CKK);
          dcol.resize(static_cast<std::size_t>(CKK * OH * OW));
        }
        for (std::int64_t n = 0; n < B; ++n) {
          const T* gn = g.data() + n * Cout * OH * OW;
          if (nw || nx)
            detail::im2col(xv2.data() + n * Cin * H * W, col2.data(), Cin, H, W, kH, kW, stride,
                           pad, OH, OW);
          if (nw) {
            detail::transpose_2d(col2.data(), colT.data(), CKK, OH * OW);
            detail::gemm_nn(gn, colT.data(), pw.grad.data(), Cout, OH * OW, CKK, true);
          }
          if (nx) {
            detail::gemm_nn(wT.data(), gn, dcol.data(), CKK, Cout, OH * OW, false);
            detail::col2im_acc(dcol.data(), px.grad.data() + n * Cin * H * W, Cin, H, W, kH, kW,
                               stride, pad, OH, OW);
          }
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (std::int64_t n = 0; n < B; ++n)
            for (std::int64_t c = 0; c < Cout; ++c) {
              const T* gc = g.data() + (n * Cout + c) * OH * OW;
              T s = 0;
              for (std::int64_t p = 0; p < OH * OW; ++p) s += gc[p];
              gb[c] += s;
            }
        }
      });
}

// ------------------------------------------------------------- embedding

// Row gather out[i,:] = table[idx[i],:]; gradient scatter-adds rows.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table,
                           std::shared_ptr<const std::vector<std::int64_t>> idx) {
  if (table.rank() != 2) throw shape_error("embedding_lookup: table must be 2-D, got " +
                                           shape_str(table.shape()));
  const std::int64_t R = table.dim(0), C = table.dim(1);
  const auto& iv = *idx;
  const auto& tv = table.value();
  std::vector<T> out(iv.size() * static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < iv.size(); ++i) {
    if (iv[i] < 0 || iv[i] >= R)
      throw usage_error("embedding_lookup: index " + std::to_string(iv[i]) + " out of range " +
                        std::to_string(R));
    std::memcpy(out.data() + i * C, tv.data() + iv[i] * C, sizeof(T) * C);
  }
  return detail::make_op<T>(Shape{static_cast<std::int64_t>(iv.size()), C}, std::move(out), {table},
                            [idx, C](detail::TensorNode<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              auto& gt = p.ensure_grad();
                              const auto& g = self.grad;
                              const auto& iv2 = *idx;
                              for (std::size_t i = 0; i < iv2.size(); ++i) {
                                T* dst = gt.data() + iv2[i] * C;
                                const T* src = g.data() + i * C;
                                for (std::int64_t j = 0; j < C; ++j) dst[j] += src[j];
                              }
                            });
}

}  // namespace swindet
