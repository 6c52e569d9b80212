#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "gsa/error.hpp"
#include "gsa/numerics/blas.hpp"
#include "gsa/numerics/graph.hpp"
#include "gsa/numerics/tensor.hpp"

// Primitive operations over Graph. Every op validates shapes up front and throws
// Error{kShape} naming the node it was about to create.
namespace gsa::ops {

namespace detail {

template <class T>
bool any_requires(const Graph<T>& g, std::initializer_list<Var> vars) {
  for (Var v : vars) {
    if (v.valid() && g.requires_grad(v)) return true;
  }
  return false;
}

template <class T>
[[noreturn]] void shape_fail(const Graph<T>& g, const std::string& op, const std::string& what) {
  throw Error(ErrorCode::kShape, g.next_name(op) + ": " + what);
}

template <class T>
void expect_same(const Graph<T>& g, const std::string& op, Var a, Var b) {
  if (g.shape(a) != g.shape(b)) {
    shape_fail(g, op, "operand shapes " + shape_str(g.shape(a)) + " and " +
                          shape_str(g.shape(b)) + " differ");
  }
}

template <class T>
void expect_rank(const Graph<T>& g, const std::string& op, Var a, std::size_t rank,
                 const char* role) {
  if (g.shape(a).size() != rank) {
    shape_fail(g, op,
               std::string(role) + " must have rank " + std::to_string(rank) + ", got " +
                   shape_str(g.shape(a)));
  }
}

template <class T>
std::uint64_t sign_bits(const Tensor<T>& x) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < x.size(); ++i) {
    h = (h ^ static_cast<std::uint64_t>(x[i] > T(0))) * 0x100000001b3ULL;
  }
  return h;
}

// View of an (N, C, H, W) tensor, or of (N, C) as (N, C, 1, 1).
struct Nchw {
  std::size_t n, c, h, w;
};

template <class T>
Nchw nchw_of(const Graph<T>& g, const std::string& op, Var x) {
  const Shape& s = g.shape(x);
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 2) return {s[0], s[1], 1, 1};
  shape_fail(g, op, "expected (N,C,H,W) or (N,C), got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::expect_same(g, "add", a, b);
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.emit("add", std::move(out), detail::any_requires(g, {a, b}),
                [a, b](Graph<T>& g, Var self) {
                  const Tensor<T>& gy = g.grad(self);
                  for (Var in : {a, b}) {
                    if (!g.requires_grad(in)) continue;
                    Tensor<T>& gx = g.grad(in);
                    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                  }
                });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
  detail::expect_same(g, "sub", a, b);
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.emit("sub", std::move(out), detail::any_requires(g, {a, b}),
                [a, b](Graph<T>& g, Var self) {
                  const Tensor<T>& gy = g.grad(self);
                  if (g.requires_grad(a)) {
                    Tensor<T>& ga = g.grad(a);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                  }
                  if (g.requires_grad(b)) {
                    Tensor<T>& gb = g.grad(b);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
                  }
                });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::expect_same(g, "mul", a, b);
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.emit("mul", std::move(out), detail::any_requires(g, {a, b}),
                [a, b](Graph<T>& g, Var self) {
                  const Tensor<T>& gy = g.grad(self);
                  const Tensor<T>& av = g.value(a);
                  const Tensor<T>& bv = g.value(b);
                  if (g.requires_grad(a)) {
                    Tensor<T>& ga = g.grad(a);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
                  }
                  if (g.requires_grad(b)) {
                    Tensor<T>& gb = g.grad(b);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
                  }
                });
}

template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.values()) v *= s;
  return g.emit("scale", std::move(out), g.requires_grad(a), [a, s](Graph<T>& g, Var self) {
    const Tensor<T>& gy = g.grad(self);
    Tensor<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
  });
}

template <class T>
Var add_scalar(Graph<T>& g, Var a, T s) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.values()) v += s;
  return g.emit("add_scalar", std::move(out), g.requires_grad(a), [a](Graph<T>& g, Var self) {
    const Tensor<T>& gy = g.grad(self);
    Tensor<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
  });
}

template <class T>
Var exp(Graph<T>& g, Var a) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.values()) v = std::exp(v);
  return g.emit("exp", std::move(out), g.requires_grad(a), [a](Graph<T>& g, Var self) {
    const Tensor<T>& gy = g.grad(self);
    const Tensor<T>& y = g.value(self);
    Tensor<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y[i];
  });
}

/// max(x, slope * x); slope 0 is the plain rectifier.
template <class T>
Var leaky_relu(Graph<T>& g, Var a, T slope = T(1e-2)) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.values()) v = v > T(0) ? v : slope * v;
  if (g.tracking_decisions()) g.record_decision(detail::sign_bits(g.value(a)));
  return g.emit("leaky_relu", std::move(out), g.requires_grad(a),
                [a, slope](Graph<T>& g, Var self) {
                  const Tensor<T>& gy = g.grad(self);
                  const Tensor<T>& x = g.value(a);
                  Tensor<T>& ga = g.grad(a);
                  for (std::size_t i = 0; i < gy.size(); ++i) {
                    ga[i] += x[i] > T(0) ? gy[i] : slope * gy[i];
                  }
                });
}

template <class T>
Var relu(Graph<T>& g, Var a) {
  return leaky_relu(g, a, T(0));
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var sum(Graph<T>& g, Var a) {
  T acc = T(0);
  for (T v : g.value(a).values()) acc += v;
  return g.emit("sum", Tensor<T>::scalar(acc), g.requires_grad(a), [a](Graph<T>& g, Var self) {
    const T gy = g.grad(self)[0];
    Tensor<T>& ga = g.grad(a);
    for (auto& v : ga.values()) v += gy;
  });
}

template <class T>
Var mean(Graph<T>& g, Var a) {
  const std::size_t n = g.value(a).size();
  if (n == 0) detail::shape_fail(g, "mean", "empty operand");
  return scale(g, sum(g, a), T(1) / static_cast<T>(n));
}

/// Mean squared error over all elements.
template <class T>
Var mse(Graph<T>& g, Var a, Var b) {
  detail::expect_same(g, "mse", a, b);
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  const std::size_t n = av.size();
  if (n == 0) detail::shape_fail(g, "mse", "empty operands");
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  return g.emit("mse", Tensor<T>::scalar(acc / static_cast<T>(n)), detail::any_requires(g, {a, b}),
                [a, b, n](Graph<T>& g, Var self) {
                  const T k = T(2) * g.grad(self)[0] / static_cast<T>(n);
                  const Tensor<T>& av = g.value(a);
                  const Tensor<T>& bv = g.value(b);
                  if (g.requires_grad(a)) {
                    Tensor<T>& ga = g.grad(a);
                    for (std::size_t i = 0; i < n; ++i) ga[i] += k * (av[i] - bv[i]);
                  }
                  if (g.requires_grad(b)) {
                    Tensor<T>& gb = g.grad(b);
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= k * (av[i] - bv[i]);
                  }
                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var reshape(Graph<T>& g, Var a, Shape shape) {
  if (shape_size(shape) != g.value(a).size()) {
    detail::shape_fail(g, "reshape",
                       "cannot view " + shape_str(g.shape(a)) + " as " + shape_str(shape));
  }
  Tensor<T> out = g.value(a).reshaped(std::move(shape));
  return g.emit("reshape", std::move(out), g.requires_grad(a), [a](Graph<T>& g, Var self) {
    const Tensor<T>& gy = g.grad(self);
    Tensor<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
  });
}

/// Concatenates two (N, C, H, W) tensors along the channel axis.
template <class T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
  detail::expect_rank(g, "concat_channels", a, 4, "first operand");
  detail::expect_rank(g, "concat_channels", b, 4, "second operand");
  const Shape& sa = g.shape(a);
  const Shape& sb = g.shape(b);
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    detail::shape_fail(g, "concat_channels",
                       "incompatible " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor<T> out(Shape{n, ca + cb, sa[2], sa[3]});
  const T* pa = g.value(a).data();
  const T* pb = g.value(b).data();
  T* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(pa + i * ca * hw, ca * hw, po + i * (ca + cb) * hw);
    std::copy_n(pb + i * cb * hw, cb * hw, po + i * (ca + cb) * hw + ca * hw);
  }
  return g.emit("concat_channels", std::move(out), detail::any_requires(g, {a, b}),
                [a, b, n, ca, cb, hw](Graph<T>& g, Var self) {
                  const T* gy = g.grad(self).data();
                  if (g.requires_grad(a)) {
                    T* ga = g.grad(a).data();
                    for (std::size_t i = 0; i < n; ++i) {
                      const T* src = gy + i * (ca + cb) * hw;
                      for (std::size_t j = 0; j < ca * hw; ++j) ga[i * ca * hw + j] += src[j];
                    }
                  }
                  if (g.requires_grad(b)) {
                    T* gb = g.grad(b).data();
                    for (std::size_t i = 0; i < n; ++i) {
                      const T* src = gy + i * (ca + cb) * hw + ca * hw;
                      for (std::size_t j = 0; j < cb * hw; ++j) gb[i * cb * hw + j] += src[j];
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Dense layers

/// (M, K) x (K, N) -> (M, N).
template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
  detail::expect_rank(g, "matmul", a, 2, "left operand");
  detail::expect_rank(g, "matmul", b, 2, "right operand");
  const std::size_t m = g.shape(a)[0], k = g.shape(a)[1], n = g.shape(b)[1];
  if (g.shape(b)[0] != k) {
    detail::shape_fail(g, "matmul", "inner extents differ: " + shape_str(g.shape(a)) + " x " +
                                        shape_str(g.shape(b)));
  }
  Tensor<T> out(Shape{m, n});
  blas::gemm(false, false, int(m), int(n), int(k), T(1), g.value(a).data(), int(k),
             g.value(b).data(), int(n), T(0), out.data(), int(n));
  return g.emit("matmul", std::move(out), detail::any_requires(g, {a, b}),
                [a, b, m, n, k](Graph<T>& g, Var self) {
                  const T* gy = g.grad(self).data();
                  if (g.requires_grad(a)) {
                    blas::gemm(false, true, int(m), int(k), int(n), T(1), gy, int(n),
                               g.value(b).data(), int(n), T(1), g.grad(a).data(), int(k));
                  }
                  if (g.requires_grad(b)) {
                    blas::gemm(true, false, int(k), int(n), int(m), T(1), g.value(a).data(),
                               int(k), gy, int(n), T(1), g.grad(b).data(), int(n));
                  }
                });
}

/// Adds a per-column bias of shape (N) to an (M, N) matrix.
template <class T>
Var add_row_bias(Graph<T>& g, Var a, Var bias) {
  detail::expect_rank(g, "add_row_bias", a, 2, "matrix");
  const std::size_t m = g.shape(a)[0], n = g.shape(a)[1];
  if (g.shape(bias) != Shape{n}) {
    detail::shape_fail(g, "add_row_bias", "bias shape " + shape_str(g.shape(bias)) +
                                              " does not match " + std::to_string(n) + " columns");
  }
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(bias);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return g.emit("add_row_bias", std::move(out), detail::any_requires(g, {a, bias}),
                [a, bias, m, n](Graph<T>& g, Var self) {
                  const Tensor<T>& gy = g.grad(self);
                  if (g.requires_grad(a)) {
                    Tensor<T>& ga = g.grad(a);
                    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                  }
                  if (g.requires_grad(bias)) {
                    Tensor<T>& gb = g.grad(bias);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
                  }
                });
}

// ---------------------------------------------------------------------------
// Convolutions

/// Stride-1 2-D convolution. x: (N, C, H, W), w: (O, C, k, k), b: (O).
/// Output (N, O, H + 2*pad - k + 1, W + 2*pad - k + 1).
template <class T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, std::size_t pad) {
  detail::expect_rank(g, "conv2d", x, 4, "input");
  detail::expect_rank(g, "conv2d", w, 4, "weight");
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(w);
  const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const std::size_t o = ws[0], k = ws[2];
  if (ws[1] != c) {
    detail::shape_fail(g, "conv2d", "input has " + std::to_string(c) +
                                        " channels, weight expects " + std::to_string(ws[1]));
  }
  if (ws[3] != k) detail::shape_fail(g, "conv2d", "non-square kernel " + shape_str(ws));
  if (g.shape(b) != Shape{o}) {
    detail::shape_fail(g, "conv2d", "bias shape " + shape_str(g.shape(b)) + " for " +
                                        std::to_string(o) + " output channels");
  }
  if (h + 2 * pad < k || wd + 2 * pad < k) {
    detail::shape_fail(g, "conv2d", "kernel larger than padded input " + shape_str(xs));
  }
  const std::size_t oh = h + 2 * pad - k + 1, ow = wd + 2 * pad - k + 1;
  const std::size_t p = oh * ow, kk = c * k * k, cols = n * p;

  // im2col over the whole batch: (C*k*k, N*P).
  auto col = std::make_shared<std::vector<T>>(kk * cols, T(0));
  const T* xv = g.value(x).data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col->data() + ((ci * k + ki) * k + kj) * cols;
        for (std::size_t ni = 0; ni < n; ++ni) {
          const T* src = xv + (ni * c + ci) * h * wd;
          T* dst = row + ni * p;
          for (std::size_t r = 0; r < oh; ++r) {
            const std::ptrdiff_t sr = std::ptrdiff_t(r + ki) - std::ptrdiff_t(pad);
            if (sr < 0 || sr >= std::ptrdiff_t(h)) continue;
            for (std::size_t q = 0; q < ow; ++q) {
              const std::ptrdiff_t sc = std::ptrdiff_t(q + kj) - std::ptrdiff_t(pad);
              if (sc < 0 || sc >= std::ptrdiff_t(wd)) continue;
              dst[r * ow + q] = src[sr * std::ptrdiff_t(wd) + sc];
            }
          }
        }
      }
    }
  }
  std::vector<T> outmat(o * cols);
  blas::gemm(false, false, int(o), int(cols), int(kk), T(1), g.value(w).data(), int(kk),
             col->data(), int(cols), T(0), outmat.data(), int(cols));
  Tensor<T> out(Shape{n, o, oh, ow});
  const T* bv = g.value(b).data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi) {
      const T* src = outmat.data() + oi * cols + ni * p;
      T* dst = out.data() + (ni * o + oi) * p;
      for (std::size_t j = 0; j < p; ++j) dst[j] = src[j] + bv[oi];
    }

  return g.emit(
      "conv2d", std::move(out), detail::any_requires(g, {x, w, b}),
      [x, w, b, col, n, c, h, wd, o, k, pad, oh, ow, p, kk, cols](Graph<T>& g, Var self) {
        const T* gy = g.grad(self).data();
        std::vector<T> gmat(o * cols);
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t oi = 0; oi < o; ++oi)
            std::copy_n(gy + (ni * o + oi) * p, p, gmat.data() + oi * cols + ni * p);
        if (g.requires_grad(b)) {
          T* gb = g.grad(b).data();
          for (std::size_t oi = 0; oi < o; ++oi) {
            T acc = T(0);
            for (std::size_t j = 0; j < cols; ++j) acc += gmat[oi * cols + j];
            gb[oi] += acc;
          }
        }
        if (g.requires_grad(w)) {
          blas::gemm(false, true, int(o), int(kk), int(cols), T(1), gmat.data(), int(cols),
                     col->data(), int(cols), T(1), g.grad(w).data(), int(kk));
        }
        if (g.requires_grad(x)) {
          std::vector<T> gcol(kk * cols);
          blas::gemm(true, false, int(kk), int(cols), int(o), T(1), g.value(w).data(), int(kk),
                     gmat.data(), int(cols), T(0), gcol.data(), int(cols));
          T* gx = g.grad(x).data();
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = gcol.data() + ((ci * k + ki) * k + kj) * cols;
                for (std::size_t ni = 0; ni < n; ++ni) {
                  T* dst = gx + (ni * c + ci) * h * wd;
                  const T* src = row + ni * p;
                  for (std::size_t r = 0; r < oh; ++r) {
                    const std::ptrdiff_t sr = std::ptrdiff_t(r + ki) - std::ptrdiff_t(pad);
                    if (sr < 0 || sr >= std::ptrdiff_t(h)) continue;
                    for (std::size_t q = 0; q < ow; ++q) {
                      const std::ptrdiff_t sc = std::ptrdiff_t(q + kj) - std::ptrdiff_t(pad);
                      if (sc < 0 || sc >= std::ptrdiff_t(wd)) continue;
                      dst[sr * std::ptrdiff_t(wd) + sc] += src[r * ow + q];
                    }
                  }
                }
              }
        }
      });
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
/// x: (N, C, H, W), w: (C, O, 2, 2), b: (O). Output (N, O, 2H, 2W).
template <class T>
Var conv_transpose2x2(Graph<T>& g, Var x, Var w, Var b) {
  detail::expect_rank(g, "conv_transpose2x2", x, 4, "input");
  detail::expect_rank(g, "conv_transpose2x2", w, 4, "weight");
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(w);
  const std::size_t n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  if (ws[0] != c || ws[2] != 2 || ws[3] != 2) {
    detail::shape_fail(g, "conv_transpose2x2", "weight " + shape_str(ws) +
                                                   " incompatible with input " + shape_str(xs));
  }
  const std::size_t o = ws[1];
  if (g.shape(b) != Shape{o}) {
    detail::shape_fail(g, "conv_transpose2x2", "bias shape " + shape_str(g.shape(b)));
  }
  const std::size_t hw = h * wd, cols = n * hw, m = o * 4;
  // X as (C, N*HW); Y = W^T X as (O*4, N*HW).
  auto xmat = std::make_shared<std::vector<T>>(c * cols);
  const T* xv = g.value(x).data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      std::copy_n(xv + (ni * c + ci) * hw, hw, xmat->data() + ci * cols + ni * hw);
  std::vector<T> ymat(m * cols);
  blas::gemm(true, false, int(m), int(cols), int(c), T(1), g.value(w).data(), int(m),
             xmat->data(), int(cols), T(0), ymat.data(), int(cols));
  const std::size_t oh = 2 * h, ow = 2 * wd;
  Tensor<T> out(Shape{n, o, oh, ow});
  const T* bv = g.value(b).data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi)
      for (std::size_t d = 0; d < 4; ++d) {
        const std::size_t di = d / 2, dj = d % 2;
        const T* src = ymat.data() + (oi * 4 + d) * cols + ni * hw;
        T* dst = out.data() + (ni * o + oi) * oh * ow;
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t q = 0; q < wd; ++q)
            dst[(2 * r + di) * ow + 2 * q + dj] = src[r * wd + q] + bv[oi];
      }

  return g.emit("conv_transpose2x2", std::move(out), detail::any_requires(g, {x, w, b}),
                [x, w, b, xmat, n, c, h, wd, o, hw, cols, m, oh, ow](Graph<T>& g, Var self) {
                  const T* gy = g.grad(self).data();
                  std::vector<T> gmat(m * cols);
                  for (std::size_t ni = 0; ni < n; ++ni)
                    for (std::size_t oi = 0; oi < o; ++oi)
                      for (std::size_t d = 0; d < 4; ++d) {
                        const std::size_t di = d / 2, dj = d % 2;
                        const T* src = gy + (ni * o + oi) * oh * ow;
                        T* dst = gmat.data() + (oi * 4 + d) * cols + ni * hw;
                        for (std::size_t r = 0; r < h; ++r)
                          for (std::size_t q = 0; q < wd; ++q)
                            dst[r * wd + q] = src[(2 * r + di) * ow + 2 * q + dj];
                      }
                  if (g.requires_grad(b)) {
                    T* gb = g.grad(b).data();
                    for (std::size_t oi = 0; oi < o; ++oi) {
                      T acc = T(0);
                      for (std::size_t j = 0; j < 4 * cols; ++j) acc += gmat[oi * 4 * cols + j];
                      gb[oi] += acc;
                    }
                  }
                  if (g.requires_grad(w)) {
                    // dW (C, O*4) += X (C, N*HW) * G^T
                    blas::gemm(false, true, int(c), int(m), int(cols), T(1), xmat->data(),
                               int(cols), gmat.data(), int(cols), T(1), g.grad(w).data(), int(m));
                  }
                  if (g.requires_grad(x)) {
                    std::vector<T> gx_mat(c * cols);
                    blas::gemm(false, false, int(c), int(cols), int(m), T(1), g.value(w).data(),
                               int(m), gmat.data(), int(cols), T(0), gx_mat.data(), int(cols));
                    T* gx = g.grad(x).data();
                    for (std::size_t ni = 0; ni < n; ++ni)
                      for (std::size_t ci = 0; ci < c; ++ci) {
                        const T* src = gx_mat.data() + ci * cols + ni * hw;
                        T* dst = gx + (ni * c + ci) * hw;
                        for (std::size_t j = 0; j < hw; ++j) dst[j] += src[j];
                      }
                  }
                });
}

/// 2x2 max-pool with stride 2; ties resolve to the first position in row-major order.
template <class T>
Var max_pool2x2(Graph<T>& g, Var x) {
  detail::expect_rank(g, "max_pool2x2", x, 4, "input");
  const Shape& xs = g.shape(x);
  if (xs[2] % 2 || xs[3] % 2) {
    detail::shape_fail(g, "max_pool2x2", "odd spatial extents " + shape_str(xs));
  }
  const std::size_t planes = xs[0] * xs[1], h = xs[2], wd = xs[3], oh = h / 2, ow = wd / 2;
  Tensor<T> out(Shape{xs[0], xs[1], oh, ow});
  auto arg = std::make_shared<std::vector<std::uint32_t>>(planes * oh * ow);
  const T* xv = g.value(x).data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t q = 0; q < ow; ++q) {
        const std::size_t base = pl * h * wd;
        const std::size_t cand[4] = {base + 2 * r * wd + 2 * q, base + 2 * r * wd + 2 * q + 1,
                                     base + (2 * r + 1) * wd + 2 * q,
                                     base + (2 * r + 1) * wd + 2 * q + 1};
        std::size_t best = cand[0];
        for (std::size_t t = 1; t < 4; ++t)
          if (xv[cand[t]] > xv[best]) best = cand[t];
        const std::size_t oi = (pl * oh + r) * ow + q;
        out[oi] = xv[best];
        (*arg)[oi] = static_cast<std::uint32_t>(best);
      }
  if (g.tracking_decisions()) {
    std::uint64_t hsh = 0xcbf29ce484222325ULL;
    for (std::uint32_t a : *arg) hsh = (hsh ^ a) * 0x100000001b3ULL;
    g.record_decision(hsh);
  }
  return g.emit("max_pool2x2", std::move(out), g.requires_grad(x), [x, arg](Graph<T>& g, Var self) {
    const Tensor<T>& gy = g.grad(self);
    Tensor<T>& gx = g.grad(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[(*arg)[i]] += gy[i];
  });
}

// ---------------------------------------------------------------------------
// Normalization and output heads

/// Softmax over the channel axis of (N, C, H, W).
template <class T>
Var softmax_channels(Graph<T>& g, Var x) {
  detail::expect_rank(g, "softmax_channels", x, 4, "input");
  const Shape& xs = g.shape(x);
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor<T> out(xs);
  const T* xv = g.value(x).data();
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = ni * c * hw + p;
      T mx = xv[base];
      for (std::size_t ci = 1; ci < c; ++ci) mx = std::max(mx, xv[base + ci * hw]);
      T z = T(0);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T e = std::exp(xv[base + ci * hw] - mx);
        out[base + ci * hw] = e;
        z += e;
      }
      for (std::size_t ci = 0; ci < c; ++ci) out[base + ci * hw] /= z;
    }
  return g.emit("softmax_channels", std::move(out), g.requires_grad(x),
                [x, n, c, hw](Graph<T>& g, Var self) {
                  const Tensor<T>& gy = g.grad(self);
                  const Tensor<T>& y = g.value(self);
                  Tensor<T>& gx = g.grad(x);
                  for (std::size_t ni = 0; ni < n; ++ni)
                    for (std::size_t p = 0; p < hw; ++p) {
                      const std::size_t base = ni * c * hw + p;
                      T dot = T(0);
                      for (std::size_t ci = 0; ci < c; ++ci)
                        dot += y[base + ci * hw] * gy[base + ci * hw];
                      for (std::size_t ci = 0; ci < c; ++ci)
                        gx[base + ci * hw] += y[base + ci * hw] * (gy[base + ci * hw] - dot);
                    }
                });
}

/// Per-channel statistics of one normalization call, for running-average updates.
template <class T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased
  std::size_t count = 0;
};

/// Batch-statistics normalization over (N, H, W) per channel with learnable
/// scale/shift of shape (C). Accepts (N, C, H, W) or (N, C).
template <class T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps, BatchStats<T>* stats = nullptr) {
  const detail::Nchw d = detail::nchw_of(g, "batch_norm", x);
  if (g.shape(gamma) != Shape{d.c} || g.shape(beta) != Shape{d.c}) {
    detail::shape_fail(g, "batch_norm", "scale/shift must have shape (" + std::to_string(d.c) +
                                            ") for input " + shape_str(g.shape(x)));
  }
  const std::size_t hw = d.h * d.w, cnt = d.n * hw;
  const T* xv = g.value(x).data();
  auto xhat = std::make_shared<std::vector<T>>(g.value(x).size());
  auto inv_std = std::make_shared<std::vector<T>>(d.c);
  Tensor<T> out(g.shape(x));
  const T* gm = g.value(gamma).data();
  const T* bt = g.value(beta).data();
  if (stats) {
    stats->mean.assign(d.c, T(0));
    stats->var.assign(d.c, T(0));
    stats->count = cnt;
  }
  for (std::size_t ci = 0; ci < d.c; ++ci) {
    T mu = T(0);
    for (std::size_t ni = 0; ni < d.n; ++ni) {
      const T* src = xv + (ni * d.c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) mu += src[j];
    }
    mu /= static_cast<T>(cnt);
    T var = T(0);
    for (std::size_t ni = 0; ni < d.n; ++ni) {
      const T* src = xv + (ni * d.c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) var += (src[j] - mu) * (src[j] - mu);
    }
    var /= static_cast<T>(cnt);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[ci] = is;
    if (stats) {
      stats->mean[ci] = mu;
      stats->var[ci] = var;
    }
    for (std::size_t ni = 0; ni < d.n; ++ni) {
      const std::size_t off = (ni * d.c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const T xh = (xv[off + j] - mu) * is;
        (*xhat)[off + j] = xh;
        out[off + j] = gm[ci] * xh + bt[ci];
      }
    }
  }
  return g.emit("batch_norm", std::move(out), detail::any_requires(g, {x, gamma, beta}),
                [x, gamma, beta, xhat, inv_std, d, hw, cnt](Graph<T>& g, Var self) {
                  const T* gy = g.grad(self).data();
                  const T* gm = g.value(gamma).data();
                  const bool need_x = g.requires_grad(x);
                  T* gg = g.requires_grad(gamma) ? g.grad(gamma).data() : nullptr;
                  T* gb = g.requires_grad(beta) ? g.grad(beta).data() : nullptr;
                  T* gx = need_x ? g.grad(x).data() : nullptr;
                  for (std::size_t ci = 0; ci < d.c; ++ci) {
                    T sum_dy = T(0), sum_dy_xh = T(0);
                    for (std::size_t ni = 0; ni < d.n; ++ni) {
                      const std::size_t off = (ni * d.c + ci) * hw;
                      for (std::size_t j = 0; j < hw; ++j) {
                        sum_dy += gy[off + j];
                        sum_dy_xh += gy[off + j] * (*xhat)[off + j];
                      }
                    }
                    if (gg) gg[ci] += sum_dy_xh;
                    if (gb) gb[ci] += sum_dy;
                    if (!need_x) continue;
                    const T k = gm[ci] * (*inv_std)[ci] / static_cast<T>(cnt);
                    for (std::size_t ni = 0; ni < d.n; ++ni) {
                      const std::size_t off = (ni * d.c + ci) * hw;
                      for (std::size_t j = 0; j < hw; ++j) {
                        gx[off + j] += k * (static_cast<T>(cnt) * gy[off + j] - sum_dy -
                                            (*xhat)[off + j] * sum_dy_xh);
                      }
                    }
                  }
                });
}

/// Inference-mode normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta with
/// fixed (non-differentiated) running statistics.
template <class T>
Var batch_norm_inference(Graph<T>& g, Var x, Var gamma, Var beta, const Tensor<T>& running_mean,
                         const Tensor<T>& running_var, T eps) {
  const detail::Nchw d = detail::nchw_of(g, "batch_norm_inference", x);
  if (g.shape(gamma) != Shape{d.c} || g.shape(beta) != Shape{d.c} ||
      running_mean.shape() != Shape{d.c} || running_var.shape() != Shape{d.c}) {
    detail::shape_fail(g, "batch_norm_inference",
                       "per-channel tensors must have shape (" + std::to_string(d.c) + ")");
  }
  const std::size_t hw = d.h * d.w;
  auto inv_std = std::make_shared<std::vector<T>>(d.c);
  auto mean = std::make_shared<std::vector<T>>(running_mean.values());
  for (std::size_t ci = 0; ci < d.c; ++ci)
    (*inv_std)[ci] = T(1) / std::sqrt(running_var[ci] + eps);
  Tensor<T> out(g.shape(x));
  const T* xv = g.value(x).data();
  const T* gm = g.value(gamma).data();
  const T* bt = g.value(beta).data();
  for (std::size_t ni = 0; ni < d.n; ++ni)
    for (std::size_t ci = 0; ci < d.c; ++ci) {
      const std::size_t off = (ni * d.c + ci) * hw;
      for (std::size_t j = 0; j < hw; ++j)
        out[off + j] = gm[ci] * (xv[off + j] - (*mean)[ci]) * (*inv_std)[ci] + bt[ci];
    }
  return g.emit("batch_norm_inference", std::move(out), detail::any_requires(g, {x, gamma, beta}),
                [x, gamma, beta, inv_std, mean, d, hw](Graph<T>& g, Var self) {
                  const T* gy = g.grad(self).data();
                  const T* xv = g.value(x).data();
                  const T* gm = g.value(gamma).data();
                  T* gg = g.requires_grad(gamma) ? g.grad(gamma).data() : nullptr;
                  T* gb = g.requires_grad(beta) ? g.grad(beta).data() : nullptr;
                  T* gx = g.requires_grad(x) ? g.grad(x).data() : nullptr;
                  for (std::size_t ni = 0; ni < d.n; ++ni)
                    for (std::size_t ci = 0; ci < d.c; ++ci) {
                      const std::size_t off = (ni * d.c + ci) * hw;
                      const T is = (*inv_std)[ci];
                      for (std::size_t j = 0; j < hw; ++j) {
                        const T dy = gy[off + j];
                        if (gg) gg[ci] += dy * (xv[off + j] - (*mean)[ci]) * is;
                        if (gb) gb[ci] += dy;
                        if (gx) gx[off + j] += dy * gm[ci] * is;
                      }
                    }
                });
}

}  // namespace gsa::ops
