#pragma once

#include <cmath>
#include <cstddef>

#include "vir/tensor.hpp"

namespace vir {

namespace detail {

template <typename T>
void require_2d(const TensorT<T>& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " must be rank 2, got " + format_shape(t.shape()));
}

// c[m x n] = a[m x kk] * b[kk x n] on raw row-major buffers.
template <typename T>
void matmul_raw(const T* a, std::size_t m, std::size_t kk, const T* b, std::size_t n, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * kk;
        for (std::size_t k = 0; k < kk; ++k) {
            const T aik = arow[k];
            const T* brow = b + k * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// One LayerNorm row; shared by the batch op and the token-streaming path so
// both produce identical arithmetic.
template <typename T>
void layer_norm_row(const T* x, const T* gain, const T* bias, std::size_t d, T eps, T* out) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
        const T c = x[j] - mean;
        var += c * c;
    }
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mean) * inv * gain[j] + bias[j];
}

}  // namespace detail

// c[i][j] = sum_k a[i][k] * b[k][j]. The i-k-j loop accumulates over k in
// ascending order, matching a naive triple loop bit-for-bit.
template <typename T>
void matmul_into(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    detail::require_2d(a, "matmul lhs");
    detail::require_2d(b, "matmul rhs");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner extents differ: " + format_shape(a.shape()) + " x " +
                         format_shape(b.shape()));
    const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
    if (c.rank() != 2 || c.dim(0) != m || c.dim(1) != n)
        throw ShapeError("matmul output shape " + format_shape(c.shape()) + " does not match " +
                         format_shape({m, n}));
    detail::matmul_raw(a.data(), m, kk, b.data(), n, c.data());
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_2d(a, "matmul lhs");
    detail::require_2d(b, "matmul rhs");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner extents differ: " + format_shape(a.shape()) + " x " +
                         format_shape(b.shape()));
    TensorT<T> c({a.dim(0), b.dim(1)});
    matmul_into(a, b, c);
    return c;
}

// a[M x K] * b[N x K]^T -> [M x N]; rows of both operands are contiguous.
template <typename T>
void matmul_nt_into(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    detail::require_2d(a, "matmul_nt lhs");
    detail::require_2d(b, "matmul_nt rhs");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt inner extents differ: " + format_shape(a.shape()) + " x " +
                         format_shape(b.shape()) + "^T");
    const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(0);
    const T* ap = a.data();
    const T* bp = b.data();
    T* cp = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = ap + i * kk;
        T* crow = cp + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = bp + j * kk;
            T acc = T(0);
            for (std::size_t k = 0; k < kk; ++k) acc += arow[k] * brow[k];
            crow[j] = acc;
        }
    }
}

template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt inner extents differ: " + format_shape(a.shape()) + " x " +
                         format_shape(b.shape()) + "^T");
    TensorT<T> c({a.dim(0), b.dim(0)});
    matmul_nt_into(a, b, c);
    return c;
}

// row vector [K] times m[K x N] -> [N], written into out.
template <typename T>
void vecmat_into(std::span<const T> v, const TensorT<T>& m, std::span<T> out) {
    const std::size_t kk = m.dim(0), n = m.dim(1);
    if (v.size() != kk || out.size() != n)
        throw ShapeError("vecmat extents differ: [" + std::to_string(v.size()) + "] x " +
                         format_shape(m.shape()));
    const T* mp = m.data();
    for (std::size_t j = 0; j < n; ++j) out[j] = T(0);
    for (std::size_t k = 0; k < kk; ++k) {
        const T vk = v[k];
        const T* mrow = mp + k * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += vk * mrow[j];
    }
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    detail::require_2d(a, "transpose input");
    TensorT<T> out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T>
void hadamard_inplace(TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw ShapeError("hadamard shapes differ: " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
    T* ap = a.data();
    const T* bp = b.data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) ap[i] *= bp[i];
}

template <typename T>
TensorT<T> hadamard(const TensorT<T>& a, const TensorT<T>& b) {
    TensorT<T> out = a;
    hadamard_inplace(out, b);
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw ShapeError("add shapes differ: " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
    TensorT<T> out = a;
    T* op = out.data();
    const T* bp = b.data();
    for (std::size_t i = 0; i < out.numel(); ++i) op[i] += bp[i];
    return out;
}

template <typename T>
void add_inplace(TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b))
        throw ShapeError("add shapes differ: " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
    T* ap = a.data();
    const T* bp = b.data();
    for (std::size_t i = 0; i < a.numel(); ++i) ap[i] += bp[i];
}

// Adds a [N]-vector to every row of a [M x N] tensor.
template <typename T>
void add_row_inplace(TensorT<T>& a, const TensorT<T>& bias) {
    if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1))
        throw ShapeError("row-broadcast add shapes differ: " + format_shape(a.shape()) + " vs " +
                         format_shape(bias.shape()));
    const T* bp = bias.data();
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        T* arow = a.data() + i * a.dim(1);
        for (std::size_t j = 0; j < a.dim(1); ++j) arow[j] += bp[j];
    }
}

template <typename T>
TensorT<T> scaled(const TensorT<T>& a, T factor) {
    TensorT<T> out = a;
    for (auto& x : out.flat()) x *= factor;
    return out;
}

// Per-row LayerNorm with biased variance (divide by D).
template <typename T>
void layer_norm_into(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                     double eps, TensorT<T>& out) {
    detail::require_2d(x, "layer_norm input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layer_norm gain/bias shapes " + format_shape(gain.shape()) + ", " +
                         format_shape(bias.shape()) + " do not match row width " + std::to_string(d));
    if (!(eps > 0)) throw ParamError("layer_norm eps must be > 0");
    const T* gp = gain.data();
    const T* bp = bias.data();
    for (std::size_t i = 0; i < n; ++i)
        detail::layer_norm_row(x.data() + i * d, gp, bp, d, static_cast<T>(eps), out.data() + i * d);
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      double eps = 1e-6) {
    TensorT<T> out(x.shape());
    layer_norm_into(x, gain, bias, eps, out);
    return out;
}

// Exact GELU, x * Phi(x) with Phi the standard normal CDF via erf. The erf
// form keeps the tanh-approximation constant out of cross-implementation
// comparisons.
inline double gelu_scalar(double x) {
    return x * 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    TensorT<T> out = x;
    for (auto& v : out.flat()) v = static_cast<T>(gelu_scalar(static_cast<double>(v)));
    return out;
}

}  // namespace vir
