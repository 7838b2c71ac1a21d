#pragma once

#include <cstddef>
#include <type_traits>
#include <utility>
#include <vector>

#include "vir/ops.hpp"
#include "vir/tensor.hpp"

namespace vir {

// powers[d] = gamma^d built by repeated multiplication, with powers[0] = 1
// for every gamma including 0 (the 0^0 = 1 convention keeps mask diagonals
// alive). Every retention mode draws its decay weights from this table so
// cross-mode arithmetic stays comparable.
inline std::vector<double> decay_powers(double gamma, std::size_t count) {
    std::vector<double> p(count);
    double v = 1.0;
    for (std::size_t d = 0; d < count; ++d) {
        p[d] = v;
        v *= gamma;
    }
    return p;
}

inline void check_gamma(double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0))
        throw ParamError("decay factor gamma must lie in [0, 1], got " + std::to_string(gamma));
}

inline void check_scale(double scale) {
    if (!(scale > 0.0)) throw ParamError("scale must be positive, got " + std::to_string(scale));
}

// Causal decay mask: entries[i][j] = gamma^(i-j) for i >= j, 0 above the
// diagonal.
template <typename T>
struct DecayMask1DT {
    std::size_t n = 0;
    double gamma = 0.0;
    TensorT<T> entries;
};

using DecayMask1D = DecayMask1DT<double>;

template <typename T = double>
DecayMask1DT<T> build_decay_mask_1d(std::size_t n, double gamma) {
    if (n < 1) throw ParamError("mask length must be >= 1");
    check_gamma(gamma);
    const auto pow = decay_powers(gamma, n);
    DecayMask1DT<T> mask{n, gamma, TensorT<T>({n, n})};
    T* mp = mask.entries.data();
    for (std::size_t i = 0; i < n; ++i) {
        T* row = mp + i * n;
        for (std::size_t j = 0; j <= i; ++j) row[j] = static_cast<T>(pow[i - j]);
        for (std::size_t j = i + 1; j < n; ++j) row[j] = T(0);
    }
    return mask;
}

namespace detail {

template <typename T>
void check_qkv(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || !q.same_shape(k) ||
        v.dim(0) != q.dim(0))
        throw ShapeError("retention q/k/v shapes inconsistent: q=" + format_shape(q.shape()) +
                         " k=" + format_shape(k.shape()) + " v=" + format_shape(v.shape()));
}

// The 1/scale factor is applied to q exactly once, identically in all modes.
template <typename T>
TensorT<T> scale_queries(const TensorT<T>& q, double scale) {
    check_scale(scale);
    return scaled(q, static_cast<T>(1.0 / scale));
}

}  // namespace detail

// (qs k^T elementwise mask) v for a caller-supplied mask; the common core of
// the 1D and 2D parallel forms.
template <typename T>
void retention_masked_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                           const TensorT<T>& mask, double scale, TensorT<T>& out) {
    detail::check_qkv(q, k, v);
    const std::size_t n = q.dim(0);
    if (mask.rank() != 2 || mask.dim(0) != n || mask.dim(1) != n)
        throw ShapeError("mask shape " + format_shape(mask.shape()) + " does not match " +
                         std::to_string(n) + " tokens");
    TensorT<T> qs = detail::scale_queries(q, scale);
    TensorT<T> scores({n, n});
    matmul_nt_into(qs, k, scores);
    hadamard_inplace(scores, mask);
    matmul_into(scores, v, out);
}

template <typename T>
void retention_parallel_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                             double gamma, double scale, TensorT<T>& out) {
    check_gamma(gamma);
    const auto mask = build_decay_mask_1d<T>(q.dim(0), gamma);
    retention_masked_into(q, k, v, mask.entries, scale, out);
}

// out[n] = sum_{m<=n} gamma^(n-m) (q_n . k_m / scale) v_m
template <typename T>
TensorT<T> retention_parallel(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                              double gamma, double scale) {
    detail::check_qkv(q, k, v);
    TensorT<T> out({q.dim(0), v.dim(1)});
    retention_parallel_into(q, k, v, gamma, scale, out);
    return out;
}

// The recurrent accumulator s_n = gamma s_{n-1} + k_n^T v_n.
template <typename T>
struct RetentionState1DT {
    TensorT<T> s;  // [Dk x Dv]
    double gamma = 0.0;
    std::size_t position = 0;

    RetentionState1DT(std::size_t dk, std::size_t dv, double g) : s({dk, dv}), gamma(g) {
        check_gamma(g);
    }
};

using RetentionState1D = RetentionState1DT<double>;

// One recurrent step writing into a caller buffer; the token-streaming paths
// use this directly to keep per-token allocation flat.
template <typename T>
void recurrent_step_into(RetentionState1DT<T>& state, std::type_identity_t<std::span<const T>> q_n,
                         std::type_identity_t<std::span<const T>> k_n,
                         std::type_identity_t<std::span<const T>> v_n, double scale,
                         std::type_identity_t<std::span<T>> out) {
    check_scale(scale);
    const std::size_t dk = state.s.dim(0), dv = state.s.dim(1);
    if (q_n.size() != dk || k_n.size() != dk || v_n.size() != dv || out.size() != dv)
        throw ShapeError("recurrent step token dims q=" + std::to_string(q_n.size()) +
                         " k=" + std::to_string(k_n.size()) + " v=" + std::to_string(v_n.size()) +
                         " do not match state " + format_shape(state.s.shape()));
    const T g = static_cast<T>(state.gamma);
    T* sp = state.s.data();
    for (std::size_t i = 0; i < dk; ++i) {
        T* srow = sp + i * dv;
        const T ki = k_n[i];
        for (std::size_t j = 0; j < dv; ++j) srow[j] = g * srow[j] + ki * v_n[j];
    }
    const T inv = static_cast<T>(1.0 / scale);
    for (std::size_t j = 0; j < dv; ++j) out[j] = T(0);
    for (std::size_t i = 0; i < dk; ++i) {
        const T qi = q_n[i] * inv;
        const T* srow = sp + i * dv;
        for (std::size_t j = 0; j < dv; ++j) out[j] += qi * srow[j];
    }
    ++state.position;
}

// One recurrent step: updates the state in place and returns q_n s_n / scale.
template <typename T>
TensorT<T> retention_recurrent_step(RetentionState1DT<T>& state,
                                    std::type_identity_t<std::span<const T>> q_n,
                                    std::type_identity_t<std::span<const T>> k_n,
                                    std::type_identity_t<std::span<const T>> v_n, double scale) {
    TensorT<T> out({v_n.size()});
    recurrent_step_into(state, q_n, k_n, v_n, scale, out.flat());
    return out;
}

// Streams the whole sequence through the recurrent form. Working state is a
// single Dk x Dv accumulator regardless of N.
template <typename T>
void retention_recurrent_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                              double gamma, double scale, TensorT<T>& out) {
    detail::check_qkv(q, k, v);
    RetentionState1DT<T> state(q.dim(1), v.dim(1), gamma);
    for (std::size_t n = 0; n < q.dim(0); ++n)
        recurrent_step_into(state, q.row(n), k.row(n), v.row(n), scale, out.row(n));
}

template <typename T>
TensorT<T> retention_recurrent(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                               double gamma, double scale) {
    detail::check_qkv(q, k, v);
    TensorT<T> out({q.dim(0), v.dim(1)});
    retention_recurrent_into(q, k, v, gamma, scale, out);
    return out;
}

struct ChunkParams {
    std::size_t chunk_size = 1;  // the last chunk may be shorter
    double gamma = 0.0;
};

// Chunkwise evaluator: parallel within each chunk, recurrent carry between
// chunks. For a chunk of actual length c and inner index i: cross-chunk reads
// decay by gamma^(i+1), state writes by gamma^(c-1-i), and the carried state
// by gamma^c; the ragged final chunk uses its true length in all exponents.
// Working set is the carried Dk x Dv state plus O(C^2) scratch, independent
// of the total sequence length. Reused per-head by the encoder.
template <typename T>
class ChunkwiseKernel {
public:
    ChunkwiseKernel(std::size_t dk, std::size_t dv, double gamma, std::size_t chunk_capacity,
                    double scale)
        : dk_(dk),
          dv_(dv),
          pow_(decay_powers(gamma, chunk_capacity + 1)),
          mask_(build_decay_mask_1d<T>(chunk_capacity, gamma)),
          inv_(static_cast<T>(1.0 / scale)),
          c_max_(chunk_capacity),
          carry_({dk, dv}),
          qs_({chunk_capacity, dk}),
          scores_({chunk_capacity, chunk_capacity}) {
        check_scale(scale);
        if (chunk_capacity < 1) throw ParamError("chunk size must be >= 1");
    }

    // q/k/v are row-major [c x dk] / [c x dv]; out rows are dv wide with the
    // given stride. Chunks must arrive in sequence order, c <= capacity.
    void process_chunk(const T* q, const T* k, const T* v, std::size_t c, T* out,
                       std::size_t out_stride) {
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t x = 0; x < dk_; ++x) qs_(i, x) = q[i * dk_ + x] * inv_;

        // Within-chunk parallel part; the masked score block is the leading
        // c x c of the capacity-sized mask.
        const T* mp = mask_.entries.data();
        for (std::size_t i = 0; i < c; ++i) {
            T* srow = scores_.data() + i * c_max_;
            const T* qrow = qs_.data() + i * dk_;
            for (std::size_t j = 0; j < c; ++j) {
                const T* krow = k + j * dk_;
                T acc = T(0);
                for (std::size_t x = 0; x < dk_; ++x) acc += qrow[x] * krow[x];
                srow[j] = acc * mp[i * c_max_ + j];
            }
        }
        for (std::size_t i = 0; i < c; ++i) {
            T* orow = out + i * out_stride;
            for (std::size_t j = 0; j < dv_; ++j) orow[j] = T(0);
            const T* srow = scores_.data() + i * c_max_;
            for (std::size_t j = 0; j < c; ++j) {
                const T sij = srow[j];
                const T* vrow = v + j * dv_;
                for (std::size_t x = 0; x < dv_; ++x) orow[x] += sij * vrow[x];
            }
            // Cross-chunk read from the carried state.
            if (!first_chunk_) {
                const T w = static_cast<T>(pow_[i + 1]);
                const T* qrow = qs_.data() + i * dk_;
                for (std::size_t a = 0; a < dk_; ++a) {
                    const T qa = w * qrow[a];
                    const T* crow = carry_.data() + a * dv_;
                    for (std::size_t x = 0; x < dv_; ++x) orow[x] += qa * crow[x];
                }
            }
        }
        // R_m = sum_i gamma^(c-1-i) k_i^T v_i + gamma^c R_{m-1}
        const T g_carry = static_cast<T>(pow_[c]);
        for (auto& x : carry_.flat()) x *= g_carry;
        for (std::size_t i = 0; i < c; ++i) {
            const T w = static_cast<T>(pow_[c - 1 - i]);
            const T* krow = k + i * dk_;
            const T* vrow = v + i * dv_;
            for (std::size_t a = 0; a < dk_; ++a) {
                const T ka = w * krow[a];
                T* crow = carry_.data() + a * dv_;
                for (std::size_t x = 0; x < dv_; ++x) crow[x] += ka * vrow[x];
            }
        }
        first_chunk_ = false;
    }

private:
    std::size_t dk_, dv_;
    std::vector<double> pow_;
    DecayMask1DT<T> mask_;
    T inv_;
    std::size_t c_max_;
    TensorT<T> carry_;  // R_{m-1}
    TensorT<T> qs_;
    TensorT<T> scores_;
    bool first_chunk_ = true;
};

template <typename T>
void retention_chunkwise_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                              const ChunkParams& params, double scale, TensorT<T>& out) {
    detail::check_qkv(q, k, v);
    check_gamma(params.gamma);
    if (params.chunk_size < 1) throw ParamError("chunk size must be >= 1");
    const std::size_t n = q.dim(0), dk = q.dim(1), dv = v.dim(1);
    const std::size_t c_max = std::min(params.chunk_size, n);
    ChunkwiseKernel<T> kernel(dk, dv, params.gamma, c_max, scale);
    for (std::size_t start = 0; start < n; start += c_max) {
        const std::size_t c = std::min(c_max, n - start);
        kernel.process_chunk(q.data() + start * dk, k.data() + start * dk, v.data() + start * dv,
                             c, out.data() + start * dv, dv);
    }
}

template <typename T>
TensorT<T> retention_chunkwise(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                               const ChunkParams& params, double scale) {
    detail::check_qkv(q, k, v);
    TensorT<T> out({q.dim(0), v.dim(1)});
    retention_chunkwise_into(q, k, v, params, scale, out);
    return out;
}

template <typename T>
struct RetentionGradsT {
    TensorT<T> dq, dk, dv;
};

using RetentionGrads = RetentionGradsT<double>;

// Analytic gradients of the parallel form. With A = (q k^T / scale) ⊙ M:
//   dv = A^T g,  G = (g v^T) ⊙ M,  dq = G k / scale,  dk = G^T q / scale.
template <typename T>
RetentionGradsT<T> retention_parallel_backward(const TensorT<T>& q, const TensorT<T>& k,
                                               const TensorT<T>& v, double gamma, double scale,
                                               const TensorT<T>& grad_out) {
    detail::check_qkv(q, k, v);
    check_scale(scale);
    if (!grad_out.same_shape(v))
        throw ShapeError("grad_out shape " + format_shape(grad_out.shape()) +
                         " does not match output " + format_shape(v.shape()));
    const auto mask = build_decay_mask_1d<T>(q.dim(0), gamma);
    const T inv = static_cast<T>(1.0 / scale);

    TensorT<T> qs = scaled(q, inv);
    TensorT<T> a = matmul_nt(qs, k);
    hadamard_inplace(a, mask.entries);

    RetentionGradsT<T> grads;
    grads.dv = matmul(transpose(a), grad_out);

    TensorT<T> g = matmul_nt(grad_out, v);
    hadamard_inplace(g, mask.entries);
    grads.dq = scaled(matmul(g, k), inv);
    grads.dk = scaled(matmul(transpose(g), q), inv);
    return grads;
}

}  // namespace vir
