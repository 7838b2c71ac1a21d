#include <fstream>

#include <json.hpp>

#include "vir/encoder.hpp"

namespace vir {

using nlohmann::json;

std::optional<MaskMode> parse_mask_mode(const std::string& s) {
    if (s == "1d" || s == "1D") return MaskMode::one_d;
    if (s == "2d" || s == "2D") return MaskMode::two_d;
    return std::nullopt;
}

std::optional<RunMode> parse_run_mode(const std::string& s) {
    if (s == "parallel") return RunMode::parallel;
    if (s == "recurrent") return RunMode::recurrent;
    if (s == "chunkwise") return RunMode::chunkwise;
    return std::nullopt;
}

std::string encoder_config_to_json(const EncoderConfig& cfg) {
    json j{{"image_size", cfg.image_size},
           {"patch_size", cfg.patch_size},
           {"model_dim", cfg.model_dim},
           {"depth", cfg.depth},
           {"heads", cfg.heads},
           {"head_dim", cfg.head_dim()},
           {"mlp_ratio", cfg.mlp_ratio},
           {"channels", cfg.channels},
           {"num_classes", cfg.num_classes},
           {"gamma_schedule", cfg.gammas()},
           {"mask_mode", mask_mode_name(cfg.mask_mode)},
           {"mode", run_mode_name(cfg.mode)},
           {"chunk_size", cfg.chunk_size}};
    return j.dump(2);
}

EncoderConfig encoder_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& ex) {
        throw ParamError(std::string("config json: ") + ex.what());
    }
    EncoderConfig cfg;
    try {
        cfg.image_size = j.at("image_size").get<std::size_t>();
        cfg.patch_size = j.at("patch_size").get<std::size_t>();
        cfg.model_dim = j.at("model_dim").get<std::size_t>();
        cfg.depth = j.at("depth").get<std::size_t>();
        cfg.heads = j.at("heads").get<std::size_t>();
        cfg.mlp_ratio = j.value("mlp_ratio", std::size_t{4});
        cfg.channels = j.value("channels", std::size_t{3});
        cfg.num_classes = j.value("num_classes", std::size_t{10});
        if (j.contains("gamma_schedule"))
            cfg.gamma_schedule = j.at("gamma_schedule").get<std::vector<double>>();
        cfg.chunk_size = j.value("chunk_size", std::size_t{16});
        const auto mask = parse_mask_mode(j.value("mask_mode", std::string("1d")));
        const auto mode = parse_run_mode(j.value("mode", std::string("parallel")));
        if (!mask) throw ParamError("config json: unknown mask_mode");
        if (!mode) throw ParamError("config json: unknown mode");
        cfg.mask_mode = *mask;
        cfg.mode = *mode;
    } catch (const json::exception& ex) {
        throw ParamError(std::string("config json: ") + ex.what());
    }
    if (j.contains("head_dim") && j.at("head_dim").get<std::size_t>() != cfg.head_dim())
        throw ParamError("config json: head_dim inconsistent with model_dim / heads");
    cfg.validate();
    return cfg;
}

void save_config(const EncoderConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw StoreError(StoreErrc::io, "cannot open for writing: " + path);
    out << encoder_config_to_json(cfg) << '\n';
}

EncoderConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StoreError(StoreErrc::io, "cannot open for reading: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return encoder_config_from_json(text);
}

WeightStore random_weight_store(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    namespace wn = weight_names;
    const std::size_t d = cfg.model_dim, n = cfg.num_patches();
    const std::size_t patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
    const std::size_t hidden = cfg.mlp_ratio * d;

    SplitMix64 rng(seed);
    auto rand = [&](Shape shape) { return fill_uniform<double>(rng, std::move(shape)); };
    auto ones = [](std::size_t len) {
        Tensor t({len});
        for (auto& x : t.flat()) x = 1.0;
        return t;
    };

    WeightStore store;
    store.put(wn::patch_weight, rand({patch_in, d}));
    store.put(wn::patch_bias, rand({d}));
    store.put(wn::pos_embed, rand({n, d}));
    store.put(wn::class_token, rand({1, d}));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        store.put(wn::layer(i, "ln1.gain"), ones(d));
        store.put(wn::layer(i, "ln1.bias"), Tensor({d}));
        store.put(wn::layer(i, "qkv.weight"), rand({d, 3 * d}));
        store.put(wn::layer(i, "ret_ln.gain"), ones(d));
        store.put(wn::layer(i, "ret_ln.bias"), Tensor({d}));
        store.put(wn::layer(i, "ln2.gain"), ones(d));
        store.put(wn::layer(i, "ln2.bias"), Tensor({d}));
        store.put(wn::layer(i, "mlp.fc1.weight"), rand({d, hidden}));
        store.put(wn::layer(i, "mlp.fc1.bias"), rand({hidden}));
        store.put(wn::layer(i, "mlp.fc2.weight"), rand({hidden, d}));
        store.put(wn::layer(i, "mlp.fc2.bias"), rand({d}));
    }
    store.put(wn::head_ln_gain, ones(d));
    store.put(wn::head_ln_bias, Tensor({d}));
    store.put(wn::classifier, rand({d, cfg.num_classes}));
    return store;
}

}  // namespace vir
