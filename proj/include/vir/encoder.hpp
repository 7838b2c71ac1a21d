#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vir/ops.hpp"
#include "vir/retention1d.hpp"
#include "vir/retention2d.hpp"
#include "vir/rng.hpp"
#include "vir/weight_store.hpp"

namespace vir {

enum class MaskMode { one_d, two_d };
enum class RunMode { parallel, recurrent, chunkwise };

inline const char* mask_mode_name(MaskMode m) { return m == MaskMode::one_d ? "1d" : "2d"; }
inline const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::parallel: return "parallel";
        case RunMode::recurrent: return "recurrent";
        case RunMode::chunkwise: return "chunkwise";
    }
    return "?";
}

std::optional<MaskMode> parse_mask_mode(const std::string& s);
std::optional<RunMode> parse_run_mode(const std::string& s);

// Default per-head decay schedule, gamma_h = 1 - 2^-(5+h).
inline std::vector<double> default_gamma_schedule(std::size_t heads) {
    std::vector<double> g(heads);
    for (std::size_t h = 0; h < heads; ++h) g[h] = 1.0 - std::exp2(-5.0 - static_cast<double>(h));
    return g;
}

struct EncoderConfig {
    std::size_t image_size = 32;   // pixels, square
    std::size_t patch_size = 8;
    std::size_t model_dim = 16;
    std::size_t depth = 2;
    std::size_t heads = 2;
    std::size_t mlp_ratio = 4;
    std::size_t channels = 3;
    std::size_t num_classes = 10;
    std::vector<double> gamma_schedule;  // empty = default schedule
    MaskMode mask_mode = MaskMode::one_d;
    RunMode mode = RunMode::parallel;
    std::size_t chunk_size = 16;

    std::size_t head_dim() const { return model_dim / heads; }
    std::size_t grid_side() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid_side() * grid_side(); }
    std::size_t seq_len() const { return num_patches() + 1; }  // + class token
    Grid grid() const { return Grid{grid_side(), grid_side()}; }
    double retention_scale() const { return std::sqrt(static_cast<double>(head_dim())); }

    std::vector<double> gammas() const {
        return gamma_schedule.empty() ? default_gamma_schedule(heads) : gamma_schedule;
    }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || model_dim == 0 || heads == 0 || channels == 0 ||
            num_classes == 0 || mlp_ratio == 0)
            throw ParamError("encoder config extents must be positive");
        if (image_size % patch_size != 0)
            throw ParamError("image_size " + std::to_string(image_size) +
                             " not divisible by patch_size " + std::to_string(patch_size));
        if (model_dim % heads != 0)
            throw ParamError("model_dim " + std::to_string(model_dim) + " not divisible by heads " +
                             std::to_string(heads));
        if (!gamma_schedule.empty() && gamma_schedule.size() != heads)
            throw ParamError("gamma_schedule length " + std::to_string(gamma_schedule.size()) +
                             " does not match heads " + std::to_string(heads));
        for (double g : gammas()) check_gamma(g);
        if (mode == RunMode::chunkwise) {
            if (chunk_size < 1) throw ParamError("chunk size must be >= 1");
            if (mask_mode == MaskMode::two_d)
                throw ParamError("2d retention has no chunkwise form");
        }
    }
};

// JSON sidecar with the config field names verbatim.
std::string encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const std::string& json_text);
void save_config(const EncoderConfig& cfg, const std::string& path);
EncoderConfig load_config(const std::string& path);

namespace weight_names {

inline std::string layer(std::size_t i, const char* suffix) {
    return "layers." + std::to_string(i) + "." + suffix;
}

inline constexpr const char* patch_weight = "patch_proj.weight";
inline constexpr const char* patch_bias = "patch_proj.bias";
inline constexpr const char* pos_embed = "pos_embed";
inline constexpr const char* class_token = "class_token";
inline constexpr const char* head_ln_gain = "head_ln.gain";
inline constexpr const char* head_ln_bias = "head_ln.bias";
inline constexpr const char* classifier = "classifier.weight";

}  // namespace weight_names

template <typename T>
struct LayerWeightsT {
    TensorT<T> ln1_gain, ln1_bias;
    TensorT<T> qkv_weight;  // [D x 3D]
    TensorT<T> ret_ln_gain, ret_ln_bias;
    TensorT<T> ln2_gain, ln2_bias;
    TensorT<T> fc1_weight, fc1_bias;
    TensorT<T> fc2_weight, fc2_bias;
};

template <typename T>
struct EncoderWeightsT {
    TensorT<T> patch_weight;  // [P*P*C x D]
    TensorT<T> patch_bias;    // [D]
    TensorT<T> pos_embed;     // [N x D]
    TensorT<T> class_token;   // [1 x D]
    std::vector<LayerWeightsT<T>> layers;
    TensorT<T> head_ln_gain, head_ln_bias;
    TensorT<T> classifier;  // [D x num_classes]
};

using LayerWeights = LayerWeightsT<double>;
using EncoderWeights = EncoderWeightsT<double>;

// Deterministic initialization: projection and MLP weights from one
// splitmix64 stream in a fixed tensor order, LayerNorm gains 1 / biases 0.
WeightStore random_weight_store(const EncoderConfig& cfg, std::uint64_t seed);

namespace detail {

template <typename T>
TensorT<T> cast_tensor(const Tensor& src) {
    if constexpr (std::is_same_v<T, double>) {
        return src;
    } else {
        TensorT<T> out(src.shape());
        const double* sp = src.data();
        T* op = out.data();
        for (std::size_t i = 0; i < src.numel(); ++i) op[i] = static_cast<T>(sp[i]);
        return out;
    }
}

inline void check_weight_shape(const Tensor& t, const Shape& want, const std::string& name) {
    if (t.shape() != want)
        throw ShapeError("weight " + name + " has shape " + format_shape(t.shape()) +
                         ", config requires " + format_shape(want));
}

}  // namespace detail

template <typename T = double>
EncoderWeightsT<T> bind_weights(const WeightStore& store, const EncoderConfig& cfg) {
    cfg.validate();
    namespace wn = weight_names;
    const std::size_t d = cfg.model_dim, n = cfg.num_patches();
    const std::size_t patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
    const std::size_t hidden = cfg.mlp_ratio * d;

    auto fetch = [&](const std::string& name, const Shape& want) {
        const Tensor& t = store.get(name);
        detail::check_weight_shape(t, want, name);
        return detail::cast_tensor<T>(t);
    };

    EncoderWeightsT<T> w;
    w.patch_weight = fetch(wn::patch_weight, {patch_in, d});
    w.patch_bias = fetch(wn::patch_bias, {d});
    w.pos_embed = fetch(wn::pos_embed, {n, d});
    w.class_token = fetch(wn::class_token, {1, d});
    w.layers.reserve(cfg.depth);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        LayerWeightsT<T> lw;
        lw.ln1_gain = fetch(wn::layer(i, "ln1.gain"), {d});
        lw.ln1_bias = fetch(wn::layer(i, "ln1.bias"), {d});
        lw.qkv_weight = fetch(wn::layer(i, "qkv.weight"), {d, 3 * d});
        lw.ret_ln_gain = fetch(wn::layer(i, "ret_ln.gain"), {d});
        lw.ret_ln_bias = fetch(wn::layer(i, "ret_ln.bias"), {d});
        lw.ln2_gain = fetch(wn::layer(i, "ln2.gain"), {d});
        lw.ln2_bias = fetch(wn::layer(i, "ln2.bias"), {d});
        lw.fc1_weight = fetch(wn::layer(i, "mlp.fc1.weight"), {d, hidden});
        lw.fc1_bias = fetch(wn::layer(i, "mlp.fc1.bias"), {hidden});
        lw.fc2_weight = fetch(wn::layer(i, "mlp.fc2.weight"), {hidden, d});
        lw.fc2_bias = fetch(wn::layer(i, "mlp.fc2.bias"), {d});
        w.layers.push_back(std::move(lw));
    }
    w.head_ln_gain = fetch(wn::head_ln_gain, {d});
    w.head_ln_bias = fetch(wn::head_ln_bias, {d});
    w.classifier = fetch(wn::classifier, {d, cfg.num_classes});
    return w;
}

// Non-overlapping P x P patches in raster order, flattened (dy, dx, channel)
// and projected to model_dim.
template <typename T>
TensorT<T> patchify_embed(const TensorT<T>& image, const EncoderWeightsT<T>& w,
                          const EncoderConfig& cfg) {
    if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.channels)
        throw ShapeError("image shape " + format_shape(image.shape()) + " does not match config " +
                         format_shape({cfg.image_size, cfg.image_size, cfg.channels}));
    const std::size_t p = cfg.patch_size, side = cfg.grid_side(), c = cfg.channels;
    const std::size_t n = cfg.num_patches(), patch_in = p * p * c;
    TensorT<T> patches({n, patch_in});
    for (std::size_t gy = 0; gy < side; ++gy)
        for (std::size_t gx = 0; gx < side; ++gx) {
            T* dst = patches.data() + (gy * side + gx) * patch_in;
            for (std::size_t dy = 0; dy < p; ++dy)
                for (std::size_t dx = 0; dx < p; ++dx)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        *dst++ = image(gy * p + dy, gx * p + dx, ch);
        }
    TensorT<T> emb = matmul(patches, w.patch_weight);
    add_row_inplace(emb, w.patch_bias);
    return emb;
}

// Position embedding is added to the patch rows first; the class token is
// appended last, bare.
template <typename T>
TensorT<T> assemble_sequence(const TensorT<T>& patch_emb, const EncoderWeightsT<T>& w) {
    if (!patch_emb.same_shape(w.pos_embed))
        throw ShapeError("patch embedding " + format_shape(patch_emb.shape()) +
                         " does not match position embedding " + format_shape(w.pos_embed.shape()));
    const std::size_t n = patch_emb.dim(0), d = patch_emb.dim(1);
    if (w.class_token.rank() != 2 || w.class_token.dim(0) != 1 || w.class_token.dim(1) != d)
        throw ShapeError("class token shape " + format_shape(w.class_token.shape()));
    TensorT<T> seq({n + 1, d});
    for (std::size_t i = 0; i < n; ++i) {
        const T* pe = patch_emb.data() + i * d;
        const T* po = w.pos_embed.data() + i * d;
        T* dst = seq.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] = pe[j] + po[j];
    }
    std::copy(w.class_token.flat().begin(), w.class_token.flat().end(), seq.row(n).begin());
    return seq;
}

// 2D decay mask extended with a trailing class token at virtual coordinates
// (W+1, H+1): the class row reads every patch at its L1 decay and itself at
// 1; no patch reads the class token.
template <typename T>
TensorT<T> build_mask_2d_class(const Grid& grid, double gamma) {
    check_grid(grid);
    check_gamma(gamma);
    const std::size_t n = grid.tokens();
    const auto base = build_decay_mask_2d<T>(grid, gamma);
    const auto pow = decay_powers(gamma, grid.width + grid.height + 1);
    TensorT<T> m({n + 1, n + 1});
    for (std::size_t r = 0; r < n; ++r) {
        const T* src = base.entries.data() + r * n;
        T* dst = m.data() + r * (n + 1);
        std::copy(src, src + n, dst);
        dst[n] = T(0);
    }
    T* cls = m.data() + n * (n + 1);
    for (std::size_t c = 0; c < n; ++c) {
        const std::size_t dx = grid.width - grid.x_of(c);   // (W+1) - (x+1)
        const std::size_t dy = grid.height - grid.y_of(c);  // (H+1) - (y+1)
        cls[c] = static_cast<T>(pow[dx + dy]);
    }
    cls[n] = T(1);
    return m;
}

// Per-head masked score rows for the class-token query, captured by
// retention_map from the final layer.
template <typename T>
struct MhrCaptureT {
    std::vector<TensorT<T>> class_score_rows;  // one [tokens] row per head
};

using MhrCapture = MhrCaptureT<double>;

namespace detail {

template <typename T>
struct MaskKind {
    bool two_d = false;
    bool with_class = false;
    Grid grid;
};

template <typename T>
MaskKind<T> classify_sequence(const TensorT<T>& z, const EncoderConfig& cfg) {
    if (z.rank() != 2 || z.dim(1) != cfg.model_dim)
        throw ShapeError("sequence shape " + format_shape(z.shape()) +
                         " does not match model_dim " + std::to_string(cfg.model_dim));
    MaskKind<T> kind;
    if (cfg.mask_mode == MaskMode::two_d) {
        kind.two_d = true;
        kind.grid = cfg.grid();
        const std::size_t n = kind.grid.tokens();
        if (z.dim(0) == n) kind.with_class = false;
        else if (z.dim(0) == n + 1) kind.with_class = true;
        else
            throw ShapeError("2d sequence length " + std::to_string(z.dim(0)) +
                             " matches neither grid tokens " + std::to_string(n) + " nor " +
                             std::to_string(n + 1));
    }
    return kind;
}

// Recurrent per-token MHR pass over the whole sequence; qkv rows are
// projected one token at a time so live state stays independent of N.
template <typename T>
void mhr_recurrent_pass(const TensorT<T>& z, const LayerWeightsT<T>& lw, const EncoderConfig& cfg,
                        const MaskKind<T>& kind, TensorT<T>& out) {
    const std::size_t tokens = z.dim(0), d = cfg.model_dim, dh = cfg.head_dim();
    const double scale = cfg.retention_scale();
    const auto gammas = cfg.gammas();

    std::vector<RetentionState1DT<T>> st1d;
    std::vector<RowState2DT<T>> st2d;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        if (kind.two_d) st2d.emplace_back(kind.grid, dh, dh, gammas[h]);
        else st1d.emplace_back(dh, dh, gammas[h]);
    }
    TensorT<T> qkv_row({3 * d});
    TensorT<T> concat({d});
    TensorT<T> class_state({dh, dh});
    const std::size_t grid_tokens = kind.two_d ? kind.grid.tokens() : 0;

    for (std::size_t nrow = 0; nrow < tokens; ++nrow) {
        vecmat_into<T>(z.row(nrow), lw.qkv_weight, qkv_row.flat());
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            std::span<const T> qh{qkv_row.data() + h * dh, dh};
            std::span<const T> kh{qkv_row.data() + d + h * dh, dh};
            std::span<const T> vh{qkv_row.data() + 2 * d + h * dh, dh};
            std::span<T> oh{concat.data() + h * dh, dh};
            if (!kind.two_d) {
                recurrent_step_into(st1d[h], qh, kh, vh, scale, oh);
            } else if (nrow < grid_tokens) {
                st2d[h].step_into(qh, kh, vh, scale, oh);
            } else {
                // Class token at virtual coordinates (W+1, H+1).
                const T g = static_cast<T>(gammas[h]);
                const T g2 = g * g;
                const TensorT<T>& corner = st2d[h].column_state(kind.grid.width - 1);
                T* cs = class_state.data();
                const T* cp = corner.data();
                for (std::size_t i = 0; i < dh; ++i)
                    for (std::size_t j = 0; j < dh; ++j)
                        cs[i * dh + j] = g2 * cp[i * dh + j] + kh[i] * vh[j];
                const T inv = static_cast<T>(1.0 / scale);
                for (std::size_t j = 0; j < dh; ++j) oh[j] = T(0);
                for (std::size_t i = 0; i < dh; ++i) {
                    const T qi = qh[i] * inv;
                    for (std::size_t j = 0; j < dh; ++j) oh[j] += qi * cs[i * dh + j];
                }
            }
        }
        layer_norm_row(concat.data(), lw.ret_ln_gain.data(), lw.ret_ln_bias.data(), d,
                       static_cast<T>(1e-6), out.data() + nrow * d);
    }
}

}  // namespace detail

// Multi-head retention: qkv projection, per-head retention with the
// head-specific decay and scale sqrt(D_h), head concat, LayerNorm. No output
// projection beyond the LN. Execution follows cfg.mode.
template <typename T>
void mhr_forward_into(const TensorT<T>& z, const LayerWeightsT<T>& lw, const EncoderConfig& cfg,
                      TensorT<T>& out, MhrCaptureT<T>* capture = nullptr) {
    const auto kind = detail::classify_sequence(z, cfg);
    const std::size_t tokens = z.dim(0), d = cfg.model_dim, dh = cfg.head_dim();
    if (lw.qkv_weight.rank() != 2 || lw.qkv_weight.dim(0) != d || lw.qkv_weight.dim(1) != 3 * d)
        throw ShapeError("qkv weight shape " + format_shape(lw.qkv_weight.shape()));
    if (!out.same_shape(z)) throw ShapeError("mhr output shape " + format_shape(out.shape()));
    const double scale = cfg.retention_scale();
    const auto gammas = cfg.gammas();

    if (cfg.mode == RunMode::recurrent) {
        detail::mhr_recurrent_pass(z, lw, cfg, kind, out);
        return;
    }

    if (cfg.mode == RunMode::chunkwise) {
        if (kind.two_d) throw ParamError("2d retention has no chunkwise form");
        const std::size_t c_max = std::min<std::size_t>(cfg.chunk_size, tokens);
        TensorT<T> qkv_chunk({c_max, 3 * d});
        TensorT<T> qh({c_max, dh}), kh({c_max, dh}), vh({c_max, dh});
        std::vector<ChunkwiseKernel<T>> kernels;
        kernels.reserve(cfg.heads);
        for (std::size_t h = 0; h < cfg.heads; ++h)
            kernels.emplace_back(dh, dh, gammas[h], c_max, scale);
        for (std::size_t start = 0; start < tokens; start += c_max) {
            const std::size_t c = std::min(c_max, tokens - start);
            detail::matmul_raw(z.data() + start * d, c, d, lw.qkv_weight.data(), 3 * d,
                               qkv_chunk.data());
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                for (std::size_t i = 0; i < c; ++i) {
                    const T* row = qkv_chunk.data() + i * 3 * d;
                    for (std::size_t j = 0; j < dh; ++j) {
                        qh(i, j) = row[h * dh + j];
                        kh(i, j) = row[d + h * dh + j];
                        vh(i, j) = row[2 * d + h * dh + j];
                    }
                }
                kernels[h].process_chunk(qh.data(), kh.data(), vh.data(), c,
                                         out.data() + start * d + h * dh, d);
            }
            for (std::size_t i = 0; i < c; ++i) {
                T* row = out.data() + (start + i) * d;
                detail::layer_norm_row(row, lw.ret_ln_gain.data(), lw.ret_ln_bias.data(), d,
                                       static_cast<T>(1e-6), row);
            }
        }
        return;
    }

    // Parallel mode.
    TensorT<T> qkv = matmul(z, lw.qkv_weight);
    TensorT<T> qh({tokens, dh}), kh({tokens, dh}), vh({tokens, dh});
    const T inv = static_cast<T>(1.0 / scale);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        for (std::size_t i = 0; i < tokens; ++i) {
            const T* row = qkv.data() + i * 3 * d;
            for (std::size_t j = 0; j < dh; ++j) {
                qh(i, j) = row[h * dh + j] * inv;
                kh(i, j) = row[d + h * dh + j];
                vh(i, j) = row[2 * d + h * dh + j];
            }
        }
        TensorT<T> mask;
        if (!kind.two_d) mask = build_decay_mask_1d<T>(tokens, gammas[h]).entries;
        else if (kind.with_class) mask = build_mask_2d_class<T>(kind.grid, gammas[h]);
        else mask = build_decay_mask_2d<T>(kind.grid, gammas[h]).entries;

        TensorT<T> scores = matmul_nt(qh, kh);
        hadamard_inplace(scores, mask);
        if (capture) {
            TensorT<T> row({tokens});
            std::copy(scores.row(tokens - 1).begin(), scores.row(tokens - 1).end(),
                      row.flat().begin());
            capture->class_score_rows.push_back(std::move(row));
        }
        TensorT<T> head_out = matmul(scores, vh);
        for (std::size_t i = 0; i < tokens; ++i) {
            const T* src = head_out.data() + i * dh;
            T* dst = out.data() + i * d + h * dh;
            std::copy(src, src + dh, dst);
        }
    }
    layer_norm_into(out, lw.ret_ln_gain, lw.ret_ln_bias, 1e-6, out);
}

template <typename T>
TensorT<T> multi_head_retention(const TensorT<T>& z, const LayerWeightsT<T>& lw,
                                const EncoderConfig& cfg) {
    TensorT<T> out(z.shape());
    mhr_forward_into(z, lw, cfg, out);
    return out;
}

template <typename T>
TensorT<T> mlp_forward(const TensorT<T>& x, const LayerWeightsT<T>& lw) {
    TensorT<T> h = matmul(x, lw.fc1_weight);
    add_row_inplace(h, lw.fc1_bias);
    for (auto& v : h.flat()) v = static_cast<T>(gelu_scalar(static_cast<double>(v)));
    TensorT<T> out = matmul(h, lw.fc2_weight);
    add_row_inplace(out, lw.fc2_bias);
    return out;
}

template <typename T>
struct EncoderOutputT {
    TensorT<T> logits;        // [num_classes]
    TensorT<T> final_tokens;  // [(N+1) x D], before the head LayerNorm
};

using EncoderOutput = EncoderOutputT<double>;

// Token-at-a-time deployment. Feed the assembled sequence rows in raster
// order, class token last; live retention state per layer is independent of
// the sequence length (1D mask) or proportional to the grid width (2D mask).
template <typename T>
class StreamSessionT {
public:
    StreamSessionT(const EncoderWeightsT<T>& weights, const EncoderConfig& cfg)
        : w_(&weights), cfg_(cfg) {
        cfg_.validate();
        const std::size_t d = cfg_.model_dim, dh = cfg_.head_dim();
        const auto gammas = cfg_.gammas();
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            if (cfg_.mask_mode == MaskMode::one_d) {
                auto& states = st1d_.emplace_back();
                states.reserve(cfg_.heads);
                for (std::size_t h = 0; h < cfg_.heads; ++h) states.emplace_back(dh, dh, gammas[h]);
            } else {
                auto& states = st2d_.emplace_back();
                states.reserve(cfg_.heads);
                for (std::size_t h = 0; h < cfg_.heads; ++h)
                    states.emplace_back(cfg_.grid(), dh, dh, gammas[h]);
            }
        }
        z_row_ = TensorT<T>({d});
        ln_row_ = TensorT<T>({d});
        qkv_row_ = TensorT<T>({3 * d});
        concat_ = TensorT<T>({d});
        mlp_hidden_ = TensorT<T>({cfg_.mlp_ratio * d});
        mlp_out_ = TensorT<T>({d});
        class_state_ = TensorT<T>({dh, dh});
    }

    std::size_t tokens_consumed() const { return consumed_; }

    // Live retention-state elements across all layers and heads.
    long long state_element_count() const {
        long long total = 0;
        for (const auto& layer : st1d_)
            for (const auto& st : layer) total += static_cast<long long>(st.s.numel());
        for (const auto& layer : st2d_)
            for (const auto& st : layer) {
                total += static_cast<long long>(st.row_acc.numel());
                for (const auto& c : st.col_acc) total += static_cast<long long>(c.numel());
            }
        return total;
    }

    // Feeds one assembled token row, returns the final-layer output row.
    TensorT<T> feed(const TensorT<T>& token_row) {
        const std::size_t d = cfg_.model_dim;
        if (token_row.numel() != d)
            throw ShapeError("token row has " + std::to_string(token_row.numel()) +
                             " elements, expected " + std::to_string(d));
        if (consumed_ >= cfg_.seq_len())
            throw ParamError("stream already consumed the full sequence of " +
                             std::to_string(cfg_.seq_len()) + " tokens");
        std::copy(token_row.flat().begin(), token_row.flat().end(), z_row_.flat().begin());

        const std::size_t dh = cfg_.head_dim();
        const double scale = cfg_.retention_scale();
        const auto gammas = cfg_.gammas();
        const std::size_t grid_tokens = cfg_.num_patches();

        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const LayerWeightsT<T>& lw = w_->layers[l];
            detail::layer_norm_row(z_row_.data(), lw.ln1_gain.data(), lw.ln1_bias.data(), d,
                                   static_cast<T>(1e-6), ln_row_.data());
            vecmat_into<T>(ln_row_.flat(), lw.qkv_weight, qkv_row_.flat());
            for (std::size_t h = 0; h < cfg_.heads; ++h) {
                std::span<const T> qh{qkv_row_.data() + h * dh, dh};
                std::span<const T> kh{qkv_row_.data() + d + h * dh, dh};
                std::span<const T> vh{qkv_row_.data() + 2 * d + h * dh, dh};
                std::span<T> oh{concat_.data() + h * dh, dh};
                if (cfg_.mask_mode == MaskMode::one_d) {
                    recurrent_step_into(st1d_[l][h], qh, kh, vh, scale, oh);
                } else if (consumed_ < grid_tokens) {
                    st2d_[l][h].step_into(qh, kh, vh, scale, oh);
                } else {
                    const T g = static_cast<T>(gammas[h]);
                    const T g2 = g * g;
                    const TensorT<T>& corner = st2d_[l][h].column_state(cfg_.grid_side() - 1);
                    T* cs = class_state_.data();
                    const T* cp = corner.data();
                    for (std::size_t i = 0; i < dh; ++i)
                        for (std::size_t j = 0; j < dh; ++j)
                            cs[i * dh + j] = g2 * cp[i * dh + j] + kh[i] * vh[j];
                    const T inv = static_cast<T>(1.0 / scale);
                    for (std::size_t j = 0; j < dh; ++j) oh[j] = T(0);
                    for (std::size_t i = 0; i < dh; ++i) {
                        const T qi = qh[i] * inv;
                        for (std::size_t j = 0; j < dh; ++j) oh[j] += qi * cs[i * dh + j];
                    }
                }
            }
            detail::layer_norm_row(concat_.data(), lw.ret_ln_gain.data(), lw.ret_ln_bias.data(), d,
                                   static_cast<T>(1e-6), ln_row_.data());
            for (std::size_t j = 0; j < d; ++j) z_row_(j) += ln_row_(j);

            detail::layer_norm_row(z_row_.data(), lw.ln2_gain.data(), lw.ln2_bias.data(), d,
                                   static_cast<T>(1e-6), ln_row_.data());
            vecmat_into<T>(ln_row_.flat(), lw.fc1_weight, mlp_hidden_.flat());
            for (std::size_t j = 0; j < mlp_hidden_.numel(); ++j)
                mlp_hidden_(j) = static_cast<T>(
                    gelu_scalar(static_cast<double>(mlp_hidden_(j) + lw.fc1_bias(j))));
            vecmat_into<T>(mlp_hidden_.flat(), lw.fc2_weight, mlp_out_.flat());
            for (std::size_t j = 0; j < d; ++j) z_row_(j) += mlp_out_(j) + lw.fc2_bias(j);
        }
        ++consumed_;
        return z_row_;
    }

    // After exactly N+1 tokens: head LayerNorm on the class row, classifier.
    TensorT<T> finalize() const {
        if (consumed_ != cfg_.seq_len())
            throw ParamError("stream consumed " + std::to_string(consumed_) + " tokens, expected " +
                             std::to_string(cfg_.seq_len()));
        const std::size_t d = cfg_.model_dim;
        TensorT<T> normed({d});
        detail::layer_norm_row(z_row_.data(), w_->head_ln_gain.data(), w_->head_ln_bias.data(), d,
                               static_cast<T>(1e-6), normed.data());
        TensorT<T> logits({cfg_.num_classes});
        vecmat_into<T>(normed.flat(), w_->classifier, logits.flat());
        return logits;
    }

private:
    const EncoderWeightsT<T>* w_;
    EncoderConfig cfg_;
    std::vector<std::vector<RetentionState1DT<T>>> st1d_;
    std::vector<std::vector<RowState2DT<T>>> st2d_;
    std::size_t consumed_ = 0;
    TensorT<T> z_row_, ln_row_, qkv_row_, concat_, mlp_hidden_, mlp_out_, class_state_;
};

using StreamSession = StreamSessionT<double>;

namespace detail {

template <typename T>
EncoderOutputT<T> encoder_forward_impl(const TensorT<T>& image, const EncoderWeightsT<T>& w,
                                       const EncoderConfig& cfg, MhrCaptureT<T>* capture) {
    cfg.validate();
    TensorT<T> seq = assemble_sequence(patchify_embed(image, w, cfg), w);
    const std::size_t d = cfg.model_dim;

    if (cfg.mode == RunMode::recurrent) {
        if (capture) throw ParamError("score capture requires parallel mode");
        StreamSessionT<T> session(w, cfg);
        TensorT<T> final_tokens(seq.shape());
        TensorT<T> row({d});
        for (std::size_t i = 0; i < seq.dim(0); ++i) {
            std::copy(seq.row(i).begin(), seq.row(i).end(), row.flat().begin());
            TensorT<T> out_row = session.feed(row);
            std::copy(out_row.flat().begin(), out_row.flat().end(), final_tokens.row(i).begin());
        }
        return {session.finalize(), std::move(final_tokens)};
    }

    TensorT<T> z = std::move(seq);
    TensorT<T> mhr(z.shape());
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        const LayerWeightsT<T>& lw = w.layers[l];
        MhrCaptureT<T>* cap = (capture && l + 1 == cfg.depth) ? capture : nullptr;
        TensorT<T> u = layer_norm(z, lw.ln1_gain, lw.ln1_bias);
        mhr_forward_into(u, lw, cfg, mhr, cap);
        add_inplace(z, mhr);  // Z' = MHR(LN(Z)) + Z
        TensorT<T> v = layer_norm(z, lw.ln2_gain, lw.ln2_bias);
        TensorT<T> m = mlp_forward(v, lw);
        add_inplace(z, m);  // Z = MLP(LN(Z')) + Z'
    }

    const std::size_t cls = z.dim(0) - 1;
    TensorT<T> normed({d});
    layer_norm_row(z.data() + cls * d, w.head_ln_gain.data(), w.head_ln_bias.data(), d,
                   static_cast<T>(1e-6), normed.data());
    TensorT<T> logits({cfg.num_classes});
    vecmat_into<T>(normed.flat(), w.classifier, logits.flat());
    return {std::move(logits), std::move(z)};
}

}  // namespace detail

// Full forward pass: L alternating MHR and MLP blocks with pre-LN residual
// wiring; the classifier reads the class-token row after a final LayerNorm.
template <typename T>
EncoderOutputT<T> encoder_forward(const TensorT<T>& image, const EncoderWeightsT<T>& w,
                                  const EncoderConfig& cfg) {
    return detail::encoder_forward_impl<T>(image, w, cfg, nullptr);
}

inline EncoderOutput encoder_forward(const Tensor& image, const WeightStore& store,
                                     const EncoderConfig& cfg) {
    const EncoderWeights w = bind_weights<double>(store, cfg);
    return encoder_forward<double>(image, w, cfg);
}

// Final-layer class-token score row, masked and scaled, averaged over heads,
// class self-score dropped, reshaped to the patch grid. Parallel mode.
template <typename T>
TensorT<T> retention_map(const TensorT<T>& image, const EncoderWeightsT<T>& w,
                         const EncoderConfig& cfg) {
    if (cfg.depth < 1) throw ParamError("retention map requires depth >= 1");
    EncoderConfig run_cfg = cfg;
    run_cfg.mode = RunMode::parallel;
    MhrCaptureT<T> capture;
    detail::encoder_forward_impl<T>(image, w, run_cfg, &capture);
    const std::size_t n = cfg.num_patches(), side = cfg.grid_side();
    TensorT<T> map({side, side});
    const T norm = T(1) / static_cast<T>(cfg.heads);
    for (std::size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (const auto& row : capture.class_score_rows) acc += row(i);
        map(i / side, i % side) = acc * norm;
    }
    return map;
}

inline Tensor retention_map(const Tensor& image, const WeightStore& store,
                            const EncoderConfig& cfg) {
    const EncoderWeights w = bind_weights<double>(store, cfg);
    return retention_map<double>(image, w, cfg);
}

}  // namespace vir
