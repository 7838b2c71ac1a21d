#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "vir/encoder.hpp"

using namespace vir;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double dev = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) dev = std::max(dev, std::abs(a(i) - b(i)));
    return dev;
}

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.num_classes = 10;
    return cfg;
}

Tensor random_image(const EncoderConfig& cfg, std::uint64_t seed) {
    SplitMix64 rng(seed);
    return fill_uniform(rng, {cfg.image_size, cfg.image_size, cfg.channels}, 0.0, 1.0);
}

Tensor ones(std::size_t n) {
    Tensor t({n});
    for (auto& x : t.flat()) x = 1.0;
    return t;
}

}  // namespace

TEST_CASE("patchify gathers patches in raster order") {
    // Identity projection makes the embedding the raw flattened patch, so a
    // one-hot pixel pins both the token index and the in-patch offset.
    EncoderConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    cfg.model_dim = 4;
    cfg.heads = 1;
    cfg.depth = 0;
    EncoderWeightsT<double> w;
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye(i, i) = 1.0;
    w.patch_weight = eye;
    w.patch_bias = Tensor({4});

    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            Tensor image({4, 4, 1});
            image(y, x, 0) = 1.0;
            const Tensor emb = patchify_embed(image, w, cfg);
            const std::size_t token = (y / 2) * 2 + (x / 2);
            const std::size_t offset = (y % 2) * 2 + (x % 2);
            for (std::size_t t = 0; t < 4; ++t)
                for (std::size_t j = 0; j < 4; ++j)
                    CHECK(emb(t, j) == ((t == token && j == offset) ? 1.0 : 0.0));
        }
}

TEST_CASE("patchify of a zero image with zero bias is zero") {
    const EncoderConfig cfg = tiny_config();
    EncoderWeights w = bind_weights<double>(random_weight_store(cfg, 5), cfg);
    for (auto& x : w.patch_bias.flat()) x = 0.0;
    const Tensor image({cfg.image_size, cfg.image_size, cfg.channels});
    const Tensor emb = patchify_embed(image, w, cfg);
    for (double x : emb.flat()) CHECK(x == 0.0);
}

TEST_CASE("patchify against a gather-then-matmul oracle") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = bind_weights<double>(random_weight_store(cfg, 7), cfg);
    const Tensor image = random_image(cfg, 11);
    const Tensor got = patchify_embed(image, w, cfg);

    const std::size_t p = cfg.patch_size, side = cfg.grid_side(), c = cfg.channels;
    const std::size_t d = cfg.model_dim, pin = p * p * c;
    for (std::size_t token = 0; token < cfg.num_patches(); ++token) {
        const std::size_t gy = token / side, gx = token % side;
        std::vector<double> flat;
        flat.reserve(pin);
        for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
                for (std::size_t ch = 0; ch < c; ++ch)
                    flat.push_back(image(gy * p + dy, gx * p + dx, ch));
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < pin; ++i) acc += flat[i] * w.patch_weight(i, j);
            acc += w.patch_bias(j);
            CHECK(got(token, j) == acc);
        }
    }
    CHECK_THROWS_AS(patchify_embed(Tensor({16, 16, 3}), w, cfg), ShapeError);
}

TEST_CASE("assemble_sequence adds positions then appends the bare class token") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = bind_weights<double>(random_weight_store(cfg, 13), cfg);
    const std::size_t n = cfg.num_patches(), d = cfg.model_dim;

    const Tensor zeros({n, d});
    const Tensor seq = assemble_sequence(zeros, w);
    CHECK(seq.dim(0) == n + 1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) CHECK(seq(i, j) == w.pos_embed(i, j));
    for (std::size_t j = 0; j < d; ++j) CHECK(seq(n, j) == w.class_token(0, j));

    // Permuting patch rows permutes only the first n output rows.
    SplitMix64 rng(17);
    const Tensor emb = fill_uniform(rng, {n, d}, -1.0, 1.0);
    Tensor swapped = emb;
    for (std::size_t j = 0; j < d; ++j) std::swap(swapped(0, j), swapped(n - 1, j));
    const Tensor a = assemble_sequence(emb, w);
    const Tensor b = assemble_sequence(swapped, w);
    for (std::size_t j = 0; j < d; ++j) {
        CHECK(a(0, j) - w.pos_embed(0, j) ==
              doctest::Approx(b(n - 1, j) - w.pos_embed(n - 1, j)).epsilon(1e-12));
        for (std::size_t i = 1; i + 1 < n; ++i) CHECK(a(i, j) == b(i, j));
        CHECK(a(n, j) == b(n, j));
    }
    CHECK_THROWS_AS(assemble_sequence(Tensor({n + 1, d}), w), ShapeError);
}

TEST_CASE("single-head MHR reduces to retention_parallel plus LayerNorm") {
    EncoderConfig cfg = tiny_config();
    cfg.heads = 1;
    cfg.gamma_schedule = {0.9};
    const std::size_t d = cfg.model_dim, t = 9;
    SplitMix64 rng(19);
    const Tensor z = fill_uniform(rng, {t, d}, -1.0, 1.0);
    LayerWeights lw;
    lw.qkv_weight = fill_uniform(rng, {d, 3 * d}, -0.5, 0.5);
    lw.ret_ln_gain = ones(d);
    lw.ret_ln_bias = Tensor({d});
    const Tensor got = multi_head_retention(z, lw, cfg);

    const Tensor qkv = matmul(z, lw.qkv_weight);
    Tensor q({t, d}), k({t, d}), v({t, d});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            q(i, j) = qkv(i, j);
            k(i, j) = qkv(i, d + j);
            v(i, j) = qkv(i, 2 * d + j);
        }
    const Tensor ret = retention_parallel(q, k, v, 0.9, cfg.retention_scale());
    const Tensor want = layer_norm(ret, lw.ret_ln_gain, lw.ret_ln_bias);
    CHECK(max_abs_diff(got, want) <= 1e-12);
}

TEST_CASE("MHR with all-zero decays depends only on the token itself") {
    EncoderConfig cfg = tiny_config();
    cfg.gamma_schedule = {0.0, 0.0};
    const std::size_t d = cfg.model_dim, t = 6;
    SplitMix64 rng(23);
    const Tensor z = fill_uniform(rng, {t, d}, -1.0, 1.0);
    LayerWeights lw;
    lw.qkv_weight = fill_uniform(rng, {d, 3 * d}, -0.5, 0.5);
    lw.ret_ln_gain = ones(d);
    lw.ret_ln_bias = Tensor({d});
    const Tensor full = multi_head_retention(z, lw, cfg);
    for (std::size_t i = 0; i < t; ++i) {
        Tensor solo({1, d});
        for (std::size_t j = 0; j < d; ++j) solo(0, j) = z(i, j);
        const Tensor alone = multi_head_retention(solo, lw, cfg);
        for (std::size_t j = 0; j < d; ++j)
            CHECK(full(i, j) == doctest::Approx(alone(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("four-head MHR matches a head-by-head loop oracle") {
    EncoderConfig cfg = tiny_config();
    cfg.heads = 4;
    const std::size_t d = cfg.model_dim, dh = cfg.head_dim(), t = 10;
    SplitMix64 rng(29);
    const Tensor z = fill_uniform(rng, {t, d}, -1.0, 1.0);
    LayerWeights lw;
    lw.qkv_weight = fill_uniform(rng, {d, 3 * d}, -0.5, 0.5);
    lw.ret_ln_gain = ones(d);
    lw.ret_ln_bias = Tensor({d});
    const Tensor got = multi_head_retention(z, lw, cfg);

    const Tensor qkv = matmul(z, lw.qkv_weight);
    Tensor concat({t, d});
    const auto gammas = cfg.gammas();
    for (std::size_t h = 0; h < 4; ++h) {
        Tensor q({t, dh}), k({t, dh}), v({t, dh});
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < dh; ++j) {
                q(i, j) = qkv(i, h * dh + j);
                k(i, j) = qkv(i, d + h * dh + j);
                v(i, j) = qkv(i, 2 * d + h * dh + j);
            }
        const Tensor ret = retention_parallel(q, k, v, gammas[h], cfg.retention_scale());
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < dh; ++j) concat(i, h * dh + j) = ret(i, j);
    }
    const Tensor want = layer_norm(concat, lw.ret_ln_gain, lw.ret_ln_bias);
    CHECK(max_abs_diff(got, want) <= 1e-12);
}

TEST_CASE("depth-zero encoder is the classifier on the normalized class row") {
    EncoderConfig cfg = tiny_config();
    cfg.depth = 0;
    const WeightStore store = random_weight_store(cfg, 31);
    const EncoderWeights w = bind_weights<double>(store, cfg);
    const Tensor image = random_image(cfg, 37);
    const EncoderOutput out = encoder_forward<double>(image, w, cfg);

    const Tensor seq = assemble_sequence(patchify_embed(image, w, cfg), w);
    Tensor cls({1, cfg.model_dim});
    for (std::size_t j = 0; j < cfg.model_dim; ++j) cls(0, j) = seq(cfg.num_patches(), j);
    const Tensor normed = layer_norm(cls, w.head_ln_gain, w.head_ln_bias);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cfg.model_dim; ++j) acc += normed(0, j) * w.classifier(j, c);
        CHECK(out.logits(c) == doctest::Approx(acc).epsilon(1e-12));
    }
    CHECK(out.final_tokens.dim(0) == cfg.seq_len());
}

TEST_CASE("same seed, same logits") {
    const EncoderConfig cfg = tiny_config();
    auto run = [&] {
        const EncoderWeights w = bind_weights<double>(random_weight_store(cfg, 41), cfg);
        return encoder_forward<double>(random_image(cfg, 43), w, cfg).logits;
    };
    const Tensor a = run(), b = run();
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a(i) == b(i));
}

TEST_CASE("parallel, streaming, and chunkwise logits agree") {
    EncoderConfig cfg = tiny_config();
    const WeightStore store = random_weight_store(cfg, 47);
    const EncoderWeights w = bind_weights<double>(store, cfg);
    const Tensor image = random_image(cfg, 53);

    cfg.mode = RunMode::parallel;
    const EncoderOutput par = encoder_forward<double>(image, w, cfg);
    cfg.mode = RunMode::recurrent;
    const EncoderOutput rec = encoder_forward<double>(image, w, cfg);
    CHECK(max_abs_diff(par.logits, rec.logits) <= 1e-9);
    CHECK(max_abs_diff(par.final_tokens, rec.final_tokens) <= 1e-9);

    cfg.mode = RunMode::chunkwise;
    for (std::size_t c : {std::size_t{1}, std::size_t{4}, cfg.num_patches()}) {
        cfg.chunk_size = c;
        const EncoderOutput chk = encoder_forward<double>(image, w, cfg);
        CHECK(max_abs_diff(par.logits, chk.logits) <= 1e-9);
    }
}

TEST_CASE("2d mask: parallel and streaming agree, chunkwise is rejected") {
    EncoderConfig cfg = tiny_config();
    cfg.mask_mode = MaskMode::two_d;
    const WeightStore store = random_weight_store(cfg, 59);
    const EncoderWeights w = bind_weights<double>(store, cfg);
    const Tensor image = random_image(cfg, 61);

    cfg.mode = RunMode::parallel;
    const Tensor par = encoder_forward<double>(image, w, cfg).logits;
    cfg.mode = RunMode::recurrent;
    const Tensor rec = encoder_forward<double>(image, w, cfg).logits;
    CHECK(max_abs_diff(par, rec) <= 1e-9);

    cfg.mode = RunMode::chunkwise;
    CHECK_THROWS_AS(encoder_forward<double>(image, w, cfg), ParamError);
}

TEST_CASE("stream session enforces the token count") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = bind_weights<double>(random_weight_store(cfg, 67), cfg);
    StreamSession session(w, cfg);
    const Tensor row({cfg.model_dim});
    session.feed(row);
    CHECK_THROWS_AS(session.finalize(), ParamError);
    for (std::size_t i = 1; i < cfg.seq_len(); ++i) session.feed(row);
    CHECK(session.tokens_consumed() == cfg.seq_len());
    CHECK_THROWS_AS(session.feed(row), ParamError);
    CHECK(session.finalize().numel() == cfg.num_classes);
}

TEST_CASE("stream session state is independent of the sequence length") {
    EncoderConfig small = tiny_config();
    EncoderConfig large = tiny_config();
    large.image_size = 64;  // 4x the patches
    const EncoderWeights ws = bind_weights<double>(random_weight_store(small, 71), small);
    const EncoderWeights wl = bind_weights<double>(random_weight_store(large, 71), large);

    auto& stats = alloc_stats();
    const long long before_small = stats.live_elems;
    StreamSession ss(ws, small);
    const long long small_delta = stats.live_elems - before_small;

    const long long before_large = stats.live_elems;
    StreamSession sl(wl, large);
    const long long large_delta = stats.live_elems - before_large;

    CHECK(small_delta == large_delta);
    CHECK(ss.state_element_count() == sl.state_element_count());
}

TEST_CASE("stream session live allocations stay flat while feeding") {
    const EncoderConfig cfg = tiny_config();
    const EncoderWeights w = bind_weights<double>(random_weight_store(cfg, 77), cfg);
    StreamSession session(w, cfg);
    SplitMix64 rng(78);
    auto& stats = alloc_stats();
    long long live_after_first = 0;
    for (std::size_t i = 0; i < cfg.seq_len(); ++i) {
        const Tensor row = fill_uniform(rng, {cfg.model_dim}, -1.0, 1.0);
        session.feed(row);
        if (i == 0) live_after_first = stats.live_elems;
        else CHECK(stats.live_elems == live_after_first);
        CHECK(session.state_element_count() ==
              static_cast<long long>(cfg.depth * cfg.heads * cfg.head_dim() * cfg.head_dim()));
    }
}

TEST_CASE("retention map shape, reachability, and independent recomputation") {
    const EncoderConfig cfg = tiny_config();
    const WeightStore store = random_weight_store(cfg, 73);
    const EncoderWeights w = bind_weights<double>(store, cfg);
    const Tensor image = random_image(cfg, 79);
    const Tensor map = retention_map<double>(image, w, cfg);

    const std::size_t side = cfg.grid_side();
    CHECK(map.shape() == Shape{side, side});
    for (double x : map.flat()) CHECK(x != 0.0);

    // Recompute the final layer's masked class-query scores by hand: run the
    // first depth-1 blocks with the public ops, then expand the last MHR.
    Tensor z = assemble_sequence(patchify_embed(image, w, cfg), w);
    for (std::size_t l = 0; l + 1 < cfg.depth; ++l) {
        const LayerWeights& lw = w.layers[l];
        const Tensor u = layer_norm(z, lw.ln1_gain, lw.ln1_bias);
        add_inplace(z, multi_head_retention(u, lw, cfg));
        const Tensor m = layer_norm(z, lw.ln2_gain, lw.ln2_bias);
        add_inplace(z, mlp_forward(m, lw));
    }
    const LayerWeights& last = w.layers[cfg.depth - 1];
    const Tensor u = layer_norm(z, last.ln1_gain, last.ln1_bias);
    const Tensor qkv = matmul(u, last.qkv_weight);
    const std::size_t t = cfg.seq_len(), d = cfg.model_dim, dh = cfg.head_dim();
    const auto gammas = cfg.gammas();
    const double scale = cfg.retention_scale();
    for (std::size_t i = 0; i < cfg.num_patches(); ++i) {
        double acc = 0.0;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const auto mask = build_decay_mask_1d<double>(t, gammas[h]);
            double dot = 0.0;
            for (std::size_t x = 0; x < dh; ++x)
                dot += qkv(t - 1, h * dh + x) / scale * qkv(i, d + h * dh + x);
            acc += dot * mask.entries(t - 1, i);
        }
        acc /= double(cfg.heads);
        CHECK(std::abs(map(i / side, i % side) - acc) <= 1e-12);
    }
}

TEST_CASE("missing weights are named") {
    EncoderConfig shallow = tiny_config();
    shallow.depth = 1;
    const WeightStore store = random_weight_store(shallow, 83);
    EncoderConfig deep = tiny_config();
    deep.depth = 2;
    try {
        bind_weights<double>(store, deep);
        FAIL("expected MissingWeightError");
    } catch (const MissingWeightError& e) {
        CHECK(e.name() == "layers.1.ln1.gain");
    }
}

TEST_CASE("config validation and json sidecar round trip") {
    EncoderConfig cfg = tiny_config();
    cfg.mask_mode = MaskMode::two_d;
    cfg.mode = RunMode::recurrent;
    cfg.chunk_size = 5;
    const std::string text = encoder_config_to_json(cfg);
    const EncoderConfig back = encoder_config_from_json(text);
    CHECK(back.image_size == cfg.image_size);
    CHECK(back.patch_size == cfg.patch_size);
    CHECK(back.model_dim == cfg.model_dim);
    CHECK(back.depth == cfg.depth);
    CHECK(back.heads == cfg.heads);
    CHECK(back.mask_mode == cfg.mask_mode);
    CHECK(back.mode == cfg.mode);
    CHECK(back.chunk_size == cfg.chunk_size);
    CHECK(back.gammas() == cfg.gammas());

    const std::string path =
        (std::filesystem::temp_directory_path() / "vir_config_sidecar.json").string();
    save_config(cfg, path);
    const EncoderConfig from_file = load_config(path);
    CHECK(from_file.model_dim == cfg.model_dim);
    CHECK(from_file.mode == cfg.mode);

    EncoderConfig bad = tiny_config();
    bad.model_dim = 15;
    CHECK_THROWS_AS(bad.validate(), ParamError);
    bad = tiny_config();
    bad.image_size = 33;
    CHECK_THROWS_AS(bad.validate(), ParamError);
    bad = tiny_config();
    bad.mask_mode = MaskMode::two_d;
    bad.mode = RunMode::chunkwise;
    CHECK_THROWS_AS(bad.validate(), ParamError);
}
