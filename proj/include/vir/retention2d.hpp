#pragma once

#include <cstddef>
#include <vector>

#include "vir/retention1d.hpp"

namespace vir {

// Patch grid with row-major raster serialization: s = y*W + x (0-based).
struct Grid {
    std::size_t width = 1;
    std::size_t height = 1;

    std::size_t tokens() const { return width * height; }
    std::size_t x_of(std::size_t s) const { return s % width; }
    std::size_t y_of(std::size_t s) const { return s / width; }
    std::size_t index(std::size_t x, std::size_t y) const { return y * width + x; }
};

inline void check_grid(const Grid& g) {
    if (g.width < 1 || g.height < 1) throw ParamError("grid extents must be >= 1");
}

// Quadrant decay mask. Row r reads source c: entry = gamma^(dx + dy) when the
// source lies in the reader's upper-left closed quadrant (dx = x(r) - x(c),
// dy = y(r) - y(c), both >= 0), else 0. The exponent is the L1 distance, so
// horizontal and vertical neighbors decay by exactly gamma at every position.
template <typename T>
struct DecayMask2DT {
    Grid grid;
    double gamma = 0.0;
    TensorT<T> entries;
};

using DecayMask2D = DecayMask2DT<double>;

template <typename T = double>
DecayMask2DT<T> build_decay_mask_2d(const Grid& grid, double gamma) {
    check_grid(grid);
    check_gamma(gamma);
    const std::size_t n = grid.tokens();
    const auto pow = decay_powers(gamma, grid.width + grid.height - 1);
    DecayMask2DT<T> mask{grid, gamma, TensorT<T>({n, n})};
    T* mp = mask.entries.data();
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t xr = grid.x_of(r), yr = grid.y_of(r);
        T* row = mp + r * n;
        for (std::size_t c = 0; c < n; ++c) {
            const std::size_t xc = grid.x_of(c), yc = grid.y_of(c);
            row[c] = (xc <= xr && yc <= yr) ? static_cast<T>(pow[(xr - xc) + (yr - yc)]) : T(0);
        }
    }
    return mask;
}

namespace detail {

template <typename T>
void check_qkv_grid(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                    const Grid& grid) {
    check_qkv(q, k, v);
    check_grid(grid);
    if (q.dim(0) != grid.tokens())
        throw ShapeError("token count " + std::to_string(q.dim(0)) + " does not match grid " +
                         std::to_string(grid.width) + "x" + std::to_string(grid.height));
}

// out_row[j] = sum_i qs[i] * acc[i][j]
template <typename T>
void readout_into(std::span<const T> qs, const TensorT<T>& acc, T* out, std::size_t dv) {
    for (std::size_t j = 0; j < dv; ++j) out[j] = T(0);
    const T* ap = acc.data();
    for (std::size_t i = 0; i < qs.size(); ++i) {
        const T qi = qs[i];
        const T* arow = ap + i * dv;
        for (std::size_t j = 0; j < dv; ++j) out[j] += qi * arow[j];
    }
}

}  // namespace detail

// out at (x,y) = sum_{g<=y} sum_{f<=x} gamma^(dx+dy) (q_{x,y} . k_{f,g} / scale) v_{f,g}
template <typename T>
void retention_2d_parallel_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                const Grid& grid, double gamma, double scale, TensorT<T>& out) {
    detail::check_qkv_grid(q, k, v, grid);
    const auto mask = build_decay_mask_2d<T>(grid, gamma);
    retention_masked_into(q, k, v, mask.entries, scale, out);
}

template <typename T>
TensorT<T> retention_2d_parallel(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                 const Grid& grid, double gamma, double scale) {
    detail::check_qkv_grid(q, k, v, grid);
    TensorT<T> out({q.dim(0), v.dim(1)});
    retention_2d_parallel_into(q, k, v, grid, gamma, scale, out);
    return out;
}

// Inclusion-exclusion recurrence
//   r(x,y) = g r(x-1,y) + g r(x,y-1) - g^2 r(x-1,y-1) + k^T v
// evaluated in raster order keeping exactly one previous row of Dk x Dv
// accumulators (constant work per cell, O(W*Dk*Dv) memory).
template <typename T>
void retention_2d_recurrent_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                 const Grid& grid, double gamma, double scale, TensorT<T>& out) {
    detail::check_qkv_grid(q, k, v, grid);
    check_gamma(gamma);
    check_scale(scale);
    const std::size_t w = grid.width, h = grid.height, dk = q.dim(1), dv = v.dim(1);
    const T g = static_cast<T>(gamma);
    const T g2 = g * g;
    const T inv = static_cast<T>(1.0 / scale);

    std::vector<TensorT<T>> prev_row, cur_row;
    prev_row.reserve(w);
    cur_row.reserve(w);
    for (std::size_t x = 0; x < w; ++x) {
        prev_row.emplace_back(Shape{dk, dv});
        cur_row.emplace_back(Shape{dk, dv});
    }
    std::vector<T> qs(dk);

    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t s = grid.index(x, y);
            const T* krow = k.data() + s * dk;
            const T* vrow = v.data() + s * dv;
            TensorT<T>& acc = cur_row[x];
            T* ap = acc.data();
            const T* left = x > 0 ? cur_row[x - 1].data() : nullptr;
            const T* up = y > 0 ? prev_row[x].data() : nullptr;
            const T* diag = (x > 0 && y > 0) ? prev_row[x - 1].data() : nullptr;
            for (std::size_t i = 0; i < dk; ++i) {
                const T ki = krow[i];
                T* arow = ap + i * dv;
                const std::size_t off = i * dv;
                if (left && up) {
                    for (std::size_t j = 0; j < dv; ++j)
                        arow[j] = g * left[off + j] + g * up[off + j] - g2 * diag[off + j] + ki * vrow[j];
                } else if (left) {
                    for (std::size_t j = 0; j < dv; ++j) arow[j] = g * left[off + j] + ki * vrow[j];
                } else if (up) {
                    for (std::size_t j = 0; j < dv; ++j) arow[j] = g * up[off + j] + ki * vrow[j];
                } else {
                    for (std::size_t j = 0; j < dv; ++j) arow[j] = ki * vrow[j];
                }
            }
            const T* qrow = q.data() + s * dk;
            for (std::size_t i = 0; i < dk; ++i) qs[i] = qrow[i] * inv;
            detail::readout_into<T>(qs, acc, out.data() + s * dv, dv);
        }
        std::swap(prev_row, cur_row);
    }
}

template <typename T>
TensorT<T> retention_2d_recurrent(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                  const Grid& grid, double gamma, double scale) {
    detail::check_qkv_grid(q, k, v, grid);
    TensorT<T> out({q.dim(0), v.dim(1)});
    retention_2d_recurrent_into(q, k, v, grid, gamma, scale, out);
    return out;
}

// Streaming state for the simplified row-state form: a running row-prefix
// accumulator
//   s_x(x,y) = g s_x(x-1,y) + k^T v
// and one column-decayed accumulator per column
//   s(x,y) = g s(x,y-1) + s_x(x,y).
// Cells must arrive in raster order; readout is q s / scale.
template <typename T>
struct RowState2DT {
    Grid grid;
    double gamma = 0.0;
    TensorT<T> row_acc;                // s_x
    std::vector<TensorT<T>> col_acc;   // s, one per column
    std::size_t position = 0;

    RowState2DT(const Grid& g, std::size_t dk, std::size_t dv, double gam)
        : grid(g), gamma(gam), row_acc({dk, dv}) {
        check_grid(g);
        check_gamma(gam);
        col_acc.reserve(g.width);
        for (std::size_t x = 0; x < g.width; ++x) col_acc.emplace_back(Shape{dk, dv});
    }

    std::size_t dk() const { return row_acc.dim(0); }
    std::size_t dv() const { return row_acc.dim(1); }

    // Accumulator for the most recently finished column position; after a
    // full raster pass col_acc[W-1] holds s(W, H).
    const TensorT<T>& column_state(std::size_t x) const { return col_acc[x]; }

    void step_into(std::span<const T> q_n, std::span<const T> k_n, std::span<const T> v_n,
                   double scale, std::span<T> out) {
        check_scale(scale);
        const std::size_t dkk = dk(), dvv = dv();
        if (q_n.size() != dkk || k_n.size() != dkk || v_n.size() != dvv || out.size() != dvv)
            throw ShapeError("2d step token dims do not match state " +
                             format_shape(row_acc.shape()));
        if (position >= grid.tokens())
            throw ParamError("2d row state consumed more tokens than the grid holds");
        const std::size_t x = grid.x_of(position);
        const T g = static_cast<T>(gamma);
        T* rp = row_acc.data();
        T* cp = col_acc[x].data();
        for (std::size_t i = 0; i < dkk; ++i) {
            const T ki = k_n[i];
            T* rrow = rp + i * dvv;
            T* crow = cp + i * dvv;
            if (x == 0) {
                for (std::size_t j = 0; j < dvv; ++j) rrow[j] = ki * v_n[j];
            } else {
                for (std::size_t j = 0; j < dvv; ++j) rrow[j] = g * rrow[j] + ki * v_n[j];
            }
            for (std::size_t j = 0; j < dvv; ++j) crow[j] = g * crow[j] + rrow[j];
        }
        const T inv = static_cast<T>(1.0 / scale);
        for (std::size_t j = 0; j < dvv; ++j) out[j] = T(0);
        const T* ap = cp;
        for (std::size_t i = 0; i < dkk; ++i) {
            const T qi = q_n[i] * inv;
            const T* arow = ap + i * dvv;
            for (std::size_t j = 0; j < dvv; ++j) out[j] += qi * arow[j];
        }
        ++position;
    }
};

using RowState2D = RowState2DT<double>;

template <typename T>
void retention_2d_simplified_into(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                  const Grid& grid, double gamma, double scale, TensorT<T>& out) {
    detail::check_qkv_grid(q, k, v, grid);
    RowState2DT<T> state(grid, q.dim(1), v.dim(1), gamma);
    for (std::size_t s = 0; s < grid.tokens(); ++s)
        state.step_into(q.row(s), k.row(s), v.row(s), scale, out.row(s));
}

template <typename T>
TensorT<T> retention_2d_simplified(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                                   const Grid& grid, double gamma, double scale) {
    detail::check_qkv_grid(q, k, v, grid);
    TensorT<T> out({q.dim(0), v.dim(1)});
    retention_2d_simplified_into(q, k, v, grid, gamma, scale, out);
    return out;
}

}  // namespace vir
