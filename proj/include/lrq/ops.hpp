#pragma once

#include <cmath>
#include <utility>

#include "lrq/tensor.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// shape checks

namespace detail {

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
void check_4d(const TensorT<T>& x, const char* op) {
    if (x.ndim() != 4)
        throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + shape_str(x.shape()));
}

// C[m, :] (+)= sum_k A[m, k] * B[k, :]
template <typename T>
void gemm_nn(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[k, :] (+)= sum_m A[m, k] * B[m, :]   (A is M x K, B is M x N)
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, T(0));
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m, p] (+)= sum_d A[m, d] * B[p, d]   (contract the contiguous dims)
template <typename T>
void gemm_rowdot(T* c, const T* a, const T* b, int64_t m, int64_t p, int64_t d, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * d;
        T* crow = c + i * p;
        for (int64_t j = 0; j < p; ++j) {
            const T* brow = b + j * d;
            T acc = T(0);
            for (int64_t q = 0; q < d; ++q) acc += arow[q] * brow[q];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary (shapes must match exactly; no broadcasting)

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()},
                              [](NodeT<T>& self) {
                                  detail::accumulate(*self.parents[0], self.grad);
                                  detail::accumulate(*self.parents[1], self.grad);
                              });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()},
                              [](NodeT<T>& self) {
                                  detail::accumulate(*self.parents[0], self.grad);
                                  auto& pb = *self.parents[1];
                                  pb.ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                      pb.grad[i] -= self.grad[i];
                              });
}

/// Hadamard product (Eq-style element-wise gating uses this).
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()},
                              [](NodeT<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  pa.ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                      pa.grad[i] += self.grad[i] * pb.data[i];
                                  pb.ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                      pb.grad[i] += self.grad[i] * pa.data[i];
                              });
}

template <typename T>
TensorT<T> elementwise_mul(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a.node(), b.node()},
                              [](NodeT<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  pa.ensure_grad();
                                  pb.ensure_grad();
                                  for (size_t i = 0; i < self.grad.size(); ++i) {
                                      const T inv = T(1) / pb.data[i];
                                      pa.grad[i] += self.grad[i] * inv;
                                      pb.grad[i] -= self.grad[i] * pa.data[i] * inv * inv;
                                  }
                              });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
    std::vector<T> out(a.values());
    for (auto& v : out) v += s;
    return detail::make_op<T>(a.shape(), std::move(out), {a.node()}, [](NodeT<T>& self) {
        detail::accumulate(*self.parents[0], self.grad);
    });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
    std::vector<T> out(a.values());
    for (auto& v : out) v *= s;
    return detail::make_op<T>(a.shape(), std::move(out), {a.node()}, [s](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
    });
}

// ---------------------------------------------------------------------------
// elementwise unary

namespace detail {

template <typename T, typename FwdFn, typename BwdFn>
TensorT<T> unary_op(const TensorT<T>& x, FwdFn f, BwdFn dfdx_from_in_out) {
    std::vector<T> out(x.values());
    for (auto& v : out) v = f(v);
    return make_op<T>(x.shape(), std::move(out), {x.node()},
                      [dfdx_from_in_out](NodeT<T>& self) {
                          auto& p = *self.parents[0];
                          p.ensure_grad();
                          for (size_t i = 0; i < self.grad.size(); ++i)
                              p.grad[i] += self.grad[i] * dfdx_from_in_out(p.data[i], self.data[i]);
                      });
}

}  // namespace detail

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> leaky_relu(const TensorT<T>& x, T slope) {
    return detail::unary_op(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T in, T) { return in > T(0) ? T(1) : slope; });
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::tanh(v); },
        [](T, T out) { return T(1) - out * out; });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
        [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
TensorT<T> exp_op(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::exp(v); },
        [](T, T out) { return out; });
}

/// Natural log. Callers clamp inputs away from zero.
template <typename T>
TensorT<T> log_op(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::log(v); },
        [](T in, T) { return T(1) / in; });
}

template <typename T>
TensorT<T> sqrt_op(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::sqrt(v); },
        [](T, T out) { return T(1) / (T(2) * out); });
}

/// 1 / sqrt(x + eps)
template <typename T>
TensorT<T> rsqrt(const TensorT<T>& x, T eps) {
    return detail::unary_op(
        x, [eps](T v) { return T(1) / std::sqrt(v + eps); },
        [](T, T out) { return T(-0.5) * out * out * out; });
}

template <typename T>
TensorT<T> cos_op(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::cos(v); },
        [](T in, T) { return -std::sin(in); });
}

template <typename T>
TensorT<T> acos_op(const TensorT<T>& x) {
    return detail::unary_op(
        x, [](T v) { return std::acos(v); },
        [](T in, T) { return T(-1) / std::sqrt(T(1) - in * in); });
}

/// Hard clamp; gradient passes inside [lo, hi] (inclusive) and is zero outside.
template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
    return detail::unary_op(
        x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T in, T) { return (in >= lo && in <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    return detail::make_op<T>({1}, {acc}, {x.node()}, [](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T g = self.grad[0];
        for (auto& pg : p.grad) pg += g;
    });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    return detail::make_op<T>({1}, {acc * inv}, {x.node()}, [inv](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const T g = self.grad[0] * inv;
        for (auto& pg : p.grad) pg += g;
    });
}

/// Sum along the last axis of a 2-D tensor: [N,K] -> [N].
template <typename T>
TensorT<T> row_sum(const TensorT<T>& x) {
    if (x.ndim() != 2) throw ShapeError("row_sum expects a 2-D tensor");
    const int64_t n = x.dim(0), k = x.dim(1);
    std::vector<T> out(static_cast<size_t>(n), T(0));
    const auto& xv = x.values();
    for (int64_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < k; ++j) acc += xv[i * k + j];
        out[i] = acc;
    }
    return detail::make_op<T>({n}, std::move(out), {x.node()}, [n, k](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const T g = self.grad[i];
            for (int64_t j = 0; j < k; ++j) p.grad[i * k + j] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// affine map: y = x . w^T + b   (x: [N,D], w: [K,D], b: [K] or undefined)

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b = {}) {
    if (x.ndim() != 2 || w.ndim() != 2)
        throw ShapeError("linear expects 2-D input and weight");
    const int64_t n = x.dim(0), d = x.dim(1), k = w.dim(0);
    if (w.dim(1) != d)
        throw ShapeError("linear: input dim " + std::to_string(d) + " vs weight dim " +
                         std::to_string(w.dim(1)));
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != k))
        throw ShapeError("linear: bias shape mismatch");

    std::vector<T> out(static_cast<size_t>(n * k));
    detail::gemm_rowdot(out.data(), x.values().data(), w.values().data(), n, k, d, false);
    if (b.defined()) {
        const auto& bv = b.values();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < k; ++j) out[i * k + j] += bv[j];
    }

    std::vector<NodePtr<T>> parents = {x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    return detail::make_op<T>({n, k}, std::move(out), std::move(parents),
                              [n, d, k](NodeT<T>& self) {
                                  auto& px = *self.parents[0];
                                  auto& pw = *self.parents[1];
                                  px.ensure_grad();
                                  pw.ensure_grad();
                                  // dx = g . w ; dw = g^T . x
                                  detail::gemm_nn(px.grad.data(), self.grad.data(),
                                                  pw.data.data(), n, k, d, true);
                                  detail::gemm_tn(pw.grad.data(), self.grad.data(),
                                                  px.data.data(), n, k, d, true);
                                  if (self.parents.size() > 2) {
                                      auto& pb = *self.parents[2];
                                      pb.ensure_grad();
                                      for (int64_t i = 0; i < n; ++i)
                                          for (int64_t j = 0; j < k; ++j)
                                              pb.grad[j] += self.grad[i * k + j];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// softmax family (along an arbitrary axis)

namespace detail {

struct AxisSplit {
    int64_t outer, axis, inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError("softmax axis out of range");
    AxisSplit s{1, shape[axis], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[i];
    for (size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    const auto sp = detail::split_axis(x.shape(), axis);
    std::vector<T> out(x.values());
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t in = 0; in < sp.inner; ++in) {
            T* base = out.data() + o * sp.axis * sp.inner + in;
            T mx = base[0];
            for (int64_t a = 1; a < sp.axis; ++a) mx = std::max(mx, base[a * sp.inner]);
            T denom = T(0);
            for (int64_t a = 0; a < sp.axis; ++a) {
                T e = std::exp(base[a * sp.inner] - mx);
                base[a * sp.inner] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (int64_t a = 0; a < sp.axis; ++a) base[a * sp.inner] *= inv;
        }
    return detail::make_op<T>(x.shape(), std::move(out), {x.node()}, [sp](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t in = 0; in < sp.inner; ++in) {
                const int64_t off = o * sp.axis * sp.inner + in;
                T dot = T(0);
                for (int64_t a = 0; a < sp.axis; ++a)
                    dot += self.grad[off + a * sp.inner] * self.data[off + a * sp.inner];
                for (int64_t a = 0; a < sp.axis; ++a) {
                    const int64_t i = off + a * sp.inner;
                    p.grad[i] += self.data[i] * (self.grad[i] - dot);
                }
            }
    });
}

template <typename T>
TensorT<T> log_softmax(const TensorT<T>& x, int axis) {
    const auto sp = detail::split_axis(x.shape(), axis);
    std::vector<T> out(x.values());
    for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t in = 0; in < sp.inner; ++in) {
            T* base = out.data() + o * sp.axis * sp.inner + in;
            T mx = base[0];
            for (int64_t a = 1; a < sp.axis; ++a) mx = std::max(mx, base[a * sp.inner]);
            T denom = T(0);
            for (int64_t a = 0; a < sp.axis; ++a) denom += std::exp(base[a * sp.inner] - mx);
            const T lse = mx + std::log(denom);
            for (int64_t a = 0; a < sp.axis; ++a) base[a * sp.inner] -= lse;
        }
    return detail::make_op<T>(x.shape(), std::move(out), {x.node()}, [sp](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o)
            for (int64_t in = 0; in < sp.inner; ++in) {
                const int64_t off = o * sp.axis * sp.inner + in;
                T gsum = T(0);
                for (int64_t a = 0; a < sp.axis; ++a) gsum += self.grad[off + a * sp.inner];
                for (int64_t a = 0; a < sp.axis; ++a) {
                    const int64_t i = off + a * sp.inner;
                    p.grad[i] += self.grad[i] - std::exp(self.data[i]) * gsum;
                }
            }
    });
}

/// Mean negative log-likelihood of the labelled class. logp: [N,K] log-probs.
template <typename T>
TensorT<T> nll_from_logprobs(const TensorT<T>& logp, const std::vector<int>& labels) {
    if (logp.ndim() != 2) throw ShapeError("nll_from_logprobs expects [N,K] log-probs");
    const int64_t n = logp.dim(0), k = logp.dim(1);
    if (static_cast<int64_t>(labels.size()) != n)
        throw ShapeError("nll_from_logprobs: label count mismatch");
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= k) throw ConfigError("label " + std::to_string(y) + " out of range");
        acc -= logp.values()[i * k + y];
    }
    const T inv = T(1) / static_cast<T>(n);
    return detail::make_op<T>({1}, {acc * inv}, {logp.node()},
                              [labels, k, inv](NodeT<T>& self) {
                                  auto& p = *self.parents[0];
                                  p.ensure_grad();
                                  const T g = self.grad[0] * inv;
                                  for (size_t i = 0; i < labels.size(); ++i)
                                      p.grad[static_cast<int64_t>(i) * k + labels[i]] -= g;
                              });
}

// ---------------------------------------------------------------------------
// indexing / layout

/// out[i, :] = m[idx[i], :]
template <typename T>
TensorT<T> gather_rows(const TensorT<T>& m, const std::vector<int>& idx) {
    if (m.ndim() != 2) throw ShapeError("gather_rows expects a 2-D tensor");
    const int64_t rows = m.dim(0), d = m.dim(1);
    std::vector<T> out(idx.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= rows) throw ShapeError("gather_rows: index out of range");
        std::copy_n(m.values().data() + static_cast<int64_t>(idx[i]) * d, d,
                    out.data() + static_cast<int64_t>(i) * d);
    }
    return detail::make_op<T>({static_cast<int64_t>(idx.size()), d}, std::move(out), {m.node()},
                              [idx, d](NodeT<T>& self) {
                                  auto& p = *self.parents[0];
                                  p.ensure_grad();
                                  for (size_t i = 0; i < idx.size(); ++i) {
                                      const T* g = self.grad.data() + static_cast<int64_t>(i) * d;
                                      T* dst = p.grad.data() + static_cast<int64_t>(idx[i]) * d;
                                      for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
                                  }
                              });
}

/// Column-wise concatenation of two [N,*] tensors.
template <typename T>
TensorT<T> concat_cols(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
        throw ShapeError("concat_cols expects 2-D tensors with equal row counts");
    const int64_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
    std::vector<T> out(static_cast<size_t>(n * (da + db)));
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(a.values().data() + i * da, da, out.data() + i * (da + db));
        std::copy_n(b.values().data() + i * db, db, out.data() + i * (da + db) + da);
    }
    return detail::make_op<T>({n, da + db}, std::move(out), {a.node(), b.node()},
                              [n, da, db](NodeT<T>& self) {
                                  auto& pa = *self.parents[0];
                                  auto& pb = *self.parents[1];
                                  pa.ensure_grad();
                                  pb.ensure_grad();
                                  for (int64_t i = 0; i < n; ++i) {
                                      const T* g = self.grad.data() + i * (da + db);
                                      for (int64_t j = 0; j < da; ++j) pa.grad[i * da + j] += g[j];
                                      for (int64_t j = 0; j < db; ++j)
                                          pb.grad[i * db + j] += g[da + j];
                                  }
                              });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, const Shape& target) {
    if (lrq::numel(target) != x.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(target));
    return detail::make_op<T>(target, x.values(), {x.node()}, [](NodeT<T>& self) {
        detail::accumulate(*self.parents[0], self.grad);
    });
}

/// Zero padding on the spatial dims of an NCHW tensor.
template <typename T>
TensorT<T> pad2d(const TensorT<T>& x, int top, int bottom, int left, int right) {
    detail::check_4d(x, "pad2d");
    if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ConfigError("pad2d: negative pad");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h + top + bottom, ow = w + left + right;
    std::vector<T> out(static_cast<size_t>(n * c * oh * ow), T(0));
    const auto& xv = x.values();
    for (int64_t i = 0; i < n * c; ++i)
        for (int64_t r = 0; r < h; ++r)
            std::copy_n(xv.data() + (i * h + r) * w, w,
                        out.data() + (i * oh + r + top) * ow + left);
    return detail::make_op<T>({n, c, oh, ow}, std::move(out), {x.node()},
                              [n, c, h, w, oh, ow, top, left](NodeT<T>& self) {
                                  auto& p = *self.parents[0];
                                  p.ensure_grad();
                                  for (int64_t i = 0; i < n * c; ++i)
                                      for (int64_t r = 0; r < h; ++r) {
                                          const T* g =
                                              self.grad.data() + (i * oh + r + top) * ow + left;
                                          T* dst = p.grad.data() + (i * h + r) * w;
                                          for (int64_t q = 0; q < w; ++q) dst[q] += g[q];
                                      }
                              });
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, NCHW / OIHW)

struct Conv2dOpts {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

namespace detail {

struct ConvDims {
    int64_t n, cin, h, w, cout, kh, kw, oh, ow, cg, og;
};

template <typename T>
ConvDims conv_check(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                    const Conv2dOpts& o) {
    check_4d(x, "conv2d");
    if (w.ndim() != 4) throw ShapeError("conv2d: weight must be OIHW");
    if (o.stride < 1 || o.dilation < 1 || o.groups < 1 || o.padding < 0)
        throw ConfigError("conv2d: invalid stride/dilation/groups/padding");
    ConvDims d{};
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    if (d.cin % o.groups != 0 || d.cout % o.groups != 0)
        throw ShapeError("conv2d: channel counts not divisible by groups");
    d.cg = d.cin / o.groups;
    d.og = d.cout / o.groups;
    if (w.dim(1) != d.cg)
        throw ShapeError("conv2d: weight in-channels " + std::to_string(w.dim(1)) +
                         " != input channels/groups " + std::to_string(d.cg));
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != d.cout))
        throw ShapeError("conv2d: bias shape mismatch");
    d.oh = (d.h + 2 * o.padding - o.dilation * (d.kh - 1) - 1) / o.stride + 1;
    d.ow = (d.w + 2 * o.padding - o.dilation * (d.kw - 1) - 1) / o.stride + 1;
    if (d.h + 2 * o.padding < o.dilation * (d.kh - 1) + 1 ||
        d.w + 2 * o.padding < o.dilation * (d.kw - 1) + 1 || d.oh <= 0 || d.ow <= 0)
        throw ShapeError("conv2d: non-positive output extent");
    return d;
}

// col is [cg*kh*kw, oh*ow] for one (sample, group) block.
template <typename T>
void im2col(const T* x, const ConvDims& d, const Conv2dOpts& o, T* col) {
    const int64_t spatial = d.oh * d.ow;
    for (int64_t c = 0; c < d.cg; ++c) {
        const T* xc = x + c * d.h * d.w;
        for (int64_t kh = 0; kh < d.kh; ++kh)
            for (int64_t kw = 0; kw < d.kw; ++kw) {
                T* row = col + ((c * d.kh + kh) * d.kw + kw) * spatial;
                for (int64_t oh = 0; oh < d.oh; ++oh) {
                    const int64_t ih = oh * o.stride - o.padding + kh * o.dilation;
                    if (ih < 0 || ih >= d.h) {
                        std::fill(row + oh * d.ow, row + (oh + 1) * d.ow, T(0));
                        continue;
                    }
                    const T* xr = xc + ih * d.w;
                    for (int64_t ow = 0; ow < d.ow; ++ow) {
                        const int64_t iw = ow * o.stride - o.padding + kw * o.dilation;
                        row[oh * d.ow + ow] = (iw >= 0 && iw < d.w) ? xr[iw] : T(0);
                    }
                }
            }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, const Conv2dOpts& o, T* dx) {
    const int64_t spatial = d.oh * d.ow;
    for (int64_t c = 0; c < d.cg; ++c) {
        T* xc = dx + c * d.h * d.w;
        for (int64_t kh = 0; kh < d.kh; ++kh)
            for (int64_t kw = 0; kw < d.kw; ++kw) {
                const T* row = col + ((c * d.kh + kh) * d.kw + kw) * spatial;
                for (int64_t oh = 0; oh < d.oh; ++oh) {
                    const int64_t ih = oh * o.stride - o.padding + kh * o.dilation;
                    if (ih < 0 || ih >= d.h) continue;
                    T* xr = xc + ih * d.w;
                    for (int64_t ow = 0; ow < d.ow; ++ow) {
                        const int64_t iw = ow * o.stride - o.padding + kw * o.dilation;
                        if (iw >= 0 && iw < d.w) xr[iw] += row[oh * d.ow + ow];
                    }
                }
            }
    }
}

// depthwise fast path: groups == cin == cout, weight [C,1,kh,kw]
template <typename T>
void depthwise_forward(const T* x, const T* w, const ConvDims& d, const Conv2dOpts& o, T* out) {
    for (int64_t nc = 0; nc < d.n * d.cin; ++nc) {
        const int64_t c = nc % d.cin;
        const T* xc = x + nc * d.h * d.w;
        const T* wc = w + c * d.kh * d.kw;
        T* oc = out + nc * d.oh * d.ow;
        for (int64_t oh = 0; oh < d.oh; ++oh)
            for (int64_t ow = 0; ow < d.ow; ++ow) {
                T acc = T(0);
                for (int64_t kh = 0; kh < d.kh; ++kh) {
                    const int64_t ih = oh * o.stride - o.padding + kh * o.dilation;
                    if (ih < 0 || ih >= d.h) continue;
                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                        const int64_t iw = ow * o.stride - o.padding + kw * o.dilation;
                        if (iw < 0 || iw >= d.w) continue;
                        acc += xc[ih * d.w + iw] * wc[kh * d.kw + kw];
                    }
                }
                oc[oh * d.ow + ow] = acc;
            }
    }
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* gout, const ConvDims& d,
                        const Conv2dOpts& o, T* dx, T* dw) {
    for (int64_t nc = 0; nc < d.n * d.cin; ++nc) {
        const int64_t c = nc % d.cin;
        const T* xc = x + nc * d.h * d.w;
        const T* wc = w + c * d.kh * d.kw;
        const T* gc = gout + nc * d.oh * d.ow;
        T* dxc = dx + nc * d.h * d.w;
        T* dwc = dw + c * d.kh * d.kw;
        for (int64_t oh = 0; oh < d.oh; ++oh)
            for (int64_t ow = 0; ow < d.ow; ++ow) {
                const T g = gc[oh * d.ow + ow];
                if (g == T(0)) continue;
                for (int64_t kh = 0; kh < d.kh; ++kh) {
                    const int64_t ih = oh * o.stride - o.padding + kh * o.dilation;
                    if (ih < 0 || ih >= d.h) continue;
                    for (int64_t kw = 0; kw < d.kw; ++kw) {
                        const int64_t iw = ow * o.stride - o.padding + kw * o.dilation;
                        if (iw < 0 || iw >= d.w) continue;
                        dxc[ih * d.w + iw] += g * wc[kh * d.kw + kw];
                        dwc[kh * d.kw + kw] += g * xc[ih * d.w + iw];
                    }
                }
            }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  const Conv2dOpts& opts) {
    const auto d = detail::conv_check(x, w, b, opts);
    const bool depthwise = (opts.groups == d.cin && d.cin == d.cout);
    const int64_t spatial = d.oh * d.ow;
    std::vector<T> out(static_cast<size_t>(d.n * d.cout * spatial));

    if (depthwise) {
        detail::depthwise_forward(x.values().data(), w.values().data(), d, opts, out.data());
    } else {
        const int64_t krows = d.cg * d.kh * d.kw;
        std::vector<T> col(static_cast<size_t>(krows * spatial));
        for (int64_t i = 0; i < d.n; ++i)
            for (int64_t g = 0; g < opts.groups; ++g) {
                detail::im2col(x.values().data() + (i * d.cin + g * d.cg) * d.h * d.w, d, opts,
                               col.data());
                detail::gemm_nn(out.data() + (i * d.cout + g * d.og) * spatial,
                                w.values().data() + g * d.og * krows, col.data(), d.og, krows,
                                spatial, false);
            }
    }
    if (b.defined()) {
        const auto& bv = b.values();
        for (int64_t i = 0; i < d.n; ++i)
            for (int64_t c = 0; c < d.cout; ++c) {
                T* oc = out.data() + (i * d.cout + c) * spatial;
                for (int64_t s = 0; s < spatial; ++s) oc[s] += bv[c];
            }
    }

    std::vector<NodePtr<T>> parents = {x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    return detail::make_op<T>(
        {d.n, d.cout, d.oh, d.ow}, std::move(out), std::move(parents),
        [d, opts, depthwise](NodeT<T>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            px.ensure_grad();
            pw.ensure_grad();
            const int64_t spatial = d.oh * d.ow;
            if (depthwise) {
                detail::depthwise_backward(px.data.data(), pw.data.data(), self.grad.data(), d,
                                           opts, px.grad.data(), pw.grad.data());
            } else {
                const int64_t krows = d.cg * d.kh * d.kw;
                std::vector<T> col(static_cast<size_t>(krows * spatial));
                std::vector<T> dcol(static_cast<size_t>(krows * spatial));
                for (int64_t i = 0; i < d.n; ++i)
                    for (int64_t g = 0; g < opts.groups; ++g) {
                        const T* gout = self.grad.data() + (i * d.cout + g * d.og) * spatial;
                        // dx via dcol = W^T . gout
                        detail::gemm_tn(dcol.data(), pw.data.data() + g * d.og * krows, gout,
                                        d.og, krows, spatial, false);
                        detail::col2im_add(dcol.data(), d, opts,
                                           px.grad.data() + (i * d.cin + g * d.cg) * d.h * d.w);
                        // dw += gout . col^T
                        detail::im2col(px.data.data() + (i * d.cin + g * d.cg) * d.h * d.w, d,
                                       opts, col.data());
                        detail::gemm_rowdot(pw.grad.data() + g * d.og * krows, gout, col.data(),
                                            d.og, krows, spatial, true);
                    }
            }
            if (self.parents.size() > 2) {
                auto& pb = *self.parents[2];
                pb.ensure_grad();
                for (int64_t i = 0; i < d.n; ++i)
                    for (int64_t c = 0; c < d.cout; ++c) {
                        const T* gc = self.grad.data() + (i * d.cout + c) * spatial;
                        T acc = T(0);
                        for (int64_t s = 0; s < spatial; ++s) acc += gc[s];
                        pb.grad[c] += acc;
                    }
            }
        });
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const Conv2dOpts& opts) {
    return conv2d(x, w, TensorT<T>{}, opts);
}

// ---------------------------------------------------------------------------
// resizing / pooling

template <typename T>
TensorT<T> upsample_nearest(const TensorT<T>& x, int factor) {
    detail::check_4d(x, "upsample_nearest");
    if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), f = factor;
    const int64_t oh = h * f, ow = w * f;
    std::vector<T> out(static_cast<size_t>(n * c * oh * ow));
    const auto& xv = x.values();
    for (int64_t i = 0; i < n * c; ++i)
        for (int64_t r = 0; r < oh; ++r) {
            const T* src = xv.data() + (i * h + r / f) * w;
            T* dst = out.data() + (i * oh + r) * ow;
            for (int64_t q = 0; q < ow; ++q) dst[q] = src[q / f];
        }
    return detail::make_op<T>({n, c, oh, ow}, std::move(out), {x.node()},
                              [n, c, h, w, f](NodeT<T>& self) {
                                  auto& p = *self.parents[0];
                                  p.ensure_grad();
                                  const int64_t oh = h * f, ow = w * f;
                                  for (int64_t i = 0; i < n * c; ++i)
                                      for (int64_t r = 0; r < oh; ++r) {
                                          const T* g = self.grad.data() + (i * oh + r) * ow;
                                          T* dst = p.grad.data() + (i * h + r / f) * w;
                                          for (int64_t q = 0; q < ow; ++q) dst[q / f] += g[q];
                                      }
                              });
}

/// NCHW -> [N, C]: mean over the spatial dims.
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    detail::check_4d(x, "global_avg_pool");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(static_cast<size_t>(n * c));
    const T inv = T(1) / static_cast<T>(hw);
    const auto& xv = x.values();
    for (int64_t i = 0; i < n * c; ++i) {
        T acc = T(0);
        const T* src = xv.data() + i * hw;
        for (int64_t s = 0; s < hw; ++s) acc += src[s];
        out[i] = acc * inv;
    }
    return detail::make_op<T>({n, c}, std::move(out), {x.node()}, [n, c, hw, inv](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < n * c; ++i) {
            const T g = self.grad[i] * inv;
            T* dst = p.grad.data() + i * hw;
            for (int64_t s = 0; s < hw; ++s) dst[s] += g;
        }
    });
}

// ---------------------------------------------------------------------------
// batch-norm building blocks

/// Per-channel mean over (N,H,W) of an NCHW tensor -> [C].
template <typename T>
TensorT<T> channel_mean(const TensorT<T>& x) {
    detail::check_4d(x, "channel_mean");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const int64_t m = n * hw;
    std::vector<T> out(static_cast<size_t>(c), T(0));
    const auto& xv = x.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = xv.data() + (i * c + ch) * hw;
            T acc = T(0);
            for (int64_t s = 0; s < hw; ++s) acc += src[s];
            out[ch] += acc;
        }
    const T inv = T(1) / static_cast<T>(m);
    for (auto& v : out) v *= inv;
    return detail::make_op<T>({c}, std::move(out), {x.node()}, [n, c, hw, inv](NodeT<T>& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const T g = self.grad[ch] * inv;
                T* dst = p.grad.data() + (i * c + ch) * hw;
                for (int64_t s = 0; s < hw; ++s) dst[s] += g;
            }
    });
}

/// Per-channel population variance of x about the supplied mean -> [C].
template <typename T>
TensorT<T> channel_var(const TensorT<T>& x, const TensorT<T>& mu) {
    detail::check_4d(x, "channel_var");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (mu.ndim() != 1 || mu.dim(0) != c) throw ShapeError("channel_var: mean shape mismatch");
    const int64_t m = n * hw;
    const T inv = T(1) / static_cast<T>(m);
    std::vector<T> out(static_cast<size_t>(c), T(0));
    const auto& xv = x.values();
    const auto& mv = mu.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = xv.data() + (i * c + ch) * hw;
            const T mc = mv[ch];
            T acc = T(0);
            for (int64_t s = 0; s < hw; ++s) {
                const T dct = src[s] - mc;
                acc += dct * dct;
            }
            out[ch] += acc;
        }
    for (auto& v : out) v *= inv;
    return detail::make_op<T>(
        {c}, std::move(out), {x.node(), mu.node()}, [n, c, hw, inv](NodeT<T>& self) {
            auto& px = *self.parents[0];
            auto& pm = *self.parents[1];
            px.ensure_grad();
            pm.ensure_grad();
            // d var_c / d x_i = 2 (x_i - mu_c) / M ; d var_c / d mu_c = -(2/M) sum(x - mu)
            for (int64_t ch = 0; ch < c; ++ch) {
                const T g = self.grad[ch];
                if (g == T(0)) continue;
                const T mc = pm.data[ch];
                T devsum = T(0);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t off = (i * c + ch) * hw;
                    for (int64_t s = 0; s < hw; ++s) {
                        const T dev = px.data[off + s] - mc;
                        px.grad[off + s] += g * T(2) * inv * dev;
                        devsum += dev;
                    }
                }
                pm.grad[ch] -= g * T(2) * inv * devsum;
            }
        });
}

/// y = (x - mean_c) * inv_std_c * gamma_c + beta_c, all channel vectors [C].
template <typename T>
TensorT<T> bn_affine(const TensorT<T>& x, const TensorT<T>& mean, const TensorT<T>& inv_std,
                     const TensorT<T>& gamma, const TensorT<T>& beta) {
    detail::check_4d(x, "bn_affine");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (const auto* v : {&mean, &inv_std, &gamma, &beta})
        if (v->ndim() != 1 || v->dim(0) != c)
            throw ShapeError("bn_affine: channel vector shape mismatch");
    std::vector<T> out(static_cast<size_t>(n * c * hw));
    const auto& xv = x.values();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T mc = mean.values()[ch], ic = inv_std.values()[ch];
            const T gc = gamma.values()[ch], bc = beta.values()[ch];
            const T* src = xv.data() + (i * c + ch) * hw;
            T* dst = out.data() + (i * c + ch) * hw;
            for (int64_t s = 0; s < hw; ++s) dst[s] = (src[s] - mc) * ic * gc + bc;
        }
    return detail::make_op<T>(
        x.shape(), std::move(out),
        {x.node(), mean.node(), inv_std.node(), gamma.node(), beta.node()},
        [n, c, hw](NodeT<T>& self) {
            auto& px = *self.parents[0];
            auto& pm = *self.parents[1];
            auto& pi = *self.parents[2];
            auto& pg = *self.parents[3];
            auto& pb = *self.parents[4];
            px.ensure_grad();
            pm.ensure_grad();
            pi.ensure_grad();
            pg.ensure_grad();
            pb.ensure_grad();
            for (int64_t ch = 0; ch < c; ++ch) {
                const T mc = pm.data[ch], ic = pi.data[ch], gc = pg.data[ch];
                T s1 = T(0), s2 = T(0);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t off = (i * c + ch) * hw;
                    for (int64_t s = 0; s < hw; ++s) {
                        const T g = self.grad[off + s];
                        s1 += g;
                        s2 += g * (px.data[off + s] - mc);
                        px.grad[off + s] += g * ic * gc;
                    }
                }
                pm.grad[ch] -= ic * gc * s1;
                pi.grad[ch] += gc * s2;
                pg.grad[ch] += ic * s2;
                pb.grad[ch] += s1;
            }
        });
}

enum class BNMode { Train, Eval };

template <typename T>
struct BatchNormResult {
    TensorT<T> out;
    TensorT<T> batch_mean;  // statistics actually used for normalization
    TensorT<T> batch_var;
};

/// Batch normalization over NCHW input. Train mode normalizes by batch
/// statistics and returns them; eval mode uses the running buffers. Running
/// buffers are updated only when update_running is set (pretraining).
template <typename T>
BatchNormResult<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                              std::vector<T>& running_mean, std::vector<T>& running_var,
                              BNMode mode, double momentum, double eps,
                              bool update_running = false) {
    detail::check_4d(x, "batch_norm");
    const int64_t c = x.dim(1);
    if (static_cast<int64_t>(running_mean.size()) != c ||
        static_cast<int64_t>(running_var.size()) != c)
        throw ShapeError("batch_norm: running buffer size mismatch");
    if (eps <= 0) throw ConfigError("batch_norm: eps must be positive");

    if (mode == BNMode::Train) {
        auto mu = channel_mean(x);
        auto var = channel_var(x, mu);
        auto inv_std = rsqrt(var, static_cast<T>(eps));
        auto out = bn_affine(x, mu, inv_std, gamma, beta);
        if (update_running) {
            // momentum is the fraction of the old value kept:
            // new = momentum * old + (1 - momentum) * batch
            const T m = static_cast<T>(momentum);
            for (int64_t ch = 0; ch < c; ++ch) {
                running_mean[ch] = m * running_mean[ch] + (T(1) - m) * mu.values()[ch];
                running_var[ch] = m * running_var[ch] + (T(1) - m) * var.values()[ch];
            }
        }
        return {out, mu, var};
    }
    auto mu = TensorT<T>::from_data({c}, running_mean);
    auto var = TensorT<T>::from_data({c}, running_var);
    auto inv_std = rsqrt(var, static_cast<T>(eps));
    auto out = bn_affine(x, mu, inv_std, gamma, beta);
    return {out, mu, var};
}

// ---------------------------------------------------------------------------
// grouped mean of rows (class centers)

template <typename T>
struct ClassCenters {
    TensorT<T> centers;             // [P, D], one row per class present
    std::vector<int> class_ids;     // P entries, ascending
    std::vector<int> row_of_class;  // class -> row, -1 if absent
    std::vector<int> counts;        // per present class
};

/// Mean feature vector per label value present in the batch. Differentiable:
/// each member row receives grad / count.
template <typename T>
ClassCenters<T> class_centers(const TensorT<T>& features, const std::vector<int>& labels,
                              int num_classes) {
    if (features.ndim() != 2) throw ShapeError("class_centers expects [B,D] features");
    const int64_t bsz = features.dim(0), dim = features.dim(1);
    if (static_cast<int64_t>(labels.size()) != bsz)
        throw ShapeError("class_centers: label count mismatch");
    std::vector<int> count(num_classes, 0);
    for (int y : labels) {
        if (y < 0 || y >= num_classes) throw ConfigError("class_centers: label out of range");
        ++count[y];
    }
    ClassCenters<T> result;
    result.row_of_class.assign(num_classes, -1);
    for (int cls = 0; cls < num_classes; ++cls)
        if (count[cls] > 0) {
            result.row_of_class[cls] = static_cast<int>(result.class_ids.size());
            result.class_ids.push_back(cls);
            result.counts.push_back(count[cls]);
        }
    const int64_t p = static_cast<int64_t>(result.class_ids.size());
    std::vector<T> centers(static_cast<size_t>(p * dim), T(0));
    const auto& fv = features.values();
    for (int64_t i = 0; i < bsz; ++i) {
        const int row = result.row_of_class[labels[i]];
        for (int64_t j = 0; j < dim; ++j) centers[row * dim + j] += fv[i * dim + j];
    }
    for (int64_t r = 0; r < p; ++r) {
        const T inv = T(1) / static_cast<T>(result.counts[r]);
        for (int64_t j = 0; j < dim; ++j) centers[r * dim + j] *= inv;
    }
    auto row_of = result.row_of_class;
    auto counts = result.counts;
    result.centers = detail::make_op<T>(
        {p, dim}, std::move(centers), {features.node()},
        [labels, row_of, counts, dim](NodeT<T>& self) {
            auto& p0 = *self.parents[0];
            p0.ensure_grad();
            for (size_t i = 0; i < labels.size(); ++i) {
                const int row = row_of[labels[i]];
                const T inv = T(1) / static_cast<T>(counts[row]);
                const T* g = self.grad.data() + row * dim;
                T* dst = p0.grad.data() + static_cast<int64_t>(i) * dim;
                for (int64_t j = 0; j < dim; ++j) dst[j] += g[j] * inv;
            }
        });
    return result;
}

}  // namespace lrq
