#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "vir/encoder.hpp"
#include "vir/weight_store.hpp"

using namespace vir;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void append_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xFF));
}

void append_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xFF));
}

// Header + manifest + payload assembled by hand, so malformed manifests can
// be expressed directly.
std::string handmade_file(const std::string& manifest, std::size_t payload_bytes) {
    std::string s = "VIRW";
    append_u32(s, 1);
    append_u64(s, manifest.size());
    s += manifest;
    s.append(payload_bytes, '\0');
    return s;
}

StoreErrc save_and_expect(const std::string& path, const std::string& bytes) {
    spit(path, bytes);
    try {
        load_weights(path);
    } catch (const StoreError& e) {
        return e.code();
    }
    FAIL("expected a StoreError");
    return StoreErrc::io;
}

EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.depth = 2;
    return cfg;
}

}  // namespace

TEST_CASE("save and load round-trip bit identically") {
    const WeightStore store = random_weight_store(tiny_config(), 2024);
    const std::string path = tmp_path("vir_store_roundtrip.virw");
    save_weights(store, path);
    const WeightStore back = load_weights(path);

    CHECK(back.size() == store.size());
    for (std::size_t i = 0; i < store.entries().size(); ++i) {
        const auto& a = store.entries()[i];
        const auto& b = back.entries()[i];
        CHECK(a.name == b.name);
        CHECK(a.dtype == b.dtype);
        REQUIRE(a.tensor.shape() == b.tensor.shape());
        CHECK(std::memcmp(a.tensor.data(), b.tensor.data(), a.tensor.numel() * 8) == 0);
    }

    // Saving the loaded store reproduces the file byte for byte.
    const std::string path2 = tmp_path("vir_store_roundtrip2.virw");
    save_weights(back, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("f32 entries narrow on save and keep their tag") {
    WeightStore store;
    Tensor t({3}, {0.1, -2.5, 1e-7});
    store.put("w", t, Dtype::f32);
    const std::string path = tmp_path("vir_store_f32.virw");
    save_weights(store, path);
    const WeightStore back = load_weights(path);
    CHECK(back.dtype_of("w") == Dtype::f32);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(back.get("w")(i) == double(float(t(i))));

    const std::string path2 = tmp_path("vir_store_f32b.virw");
    save_weights(back, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("bad magic") {
    const WeightStore store = random_weight_store(tiny_config(), 1);
    const std::string path = tmp_path("vir_store_magic.virw");
    save_weights(store, path);
    std::string bytes = slurp(path);
    bytes[0] = 'X';
    CHECK(save_and_expect(path, bytes) == StoreErrc::bad_magic);
}

TEST_CASE("version mismatch") {
    const WeightStore store = random_weight_store(tiny_config(), 1);
    const std::string path = tmp_path("vir_store_version.virw");
    save_weights(store, path);
    std::string bytes = slurp(path);
    bytes[4] = 2;
    CHECK(save_and_expect(path, bytes) == StoreErrc::bad_version);
}

TEST_CASE("truncated payload") {
    const WeightStore store = random_weight_store(tiny_config(), 1);
    const std::string path = tmp_path("vir_store_trunc.virw");
    save_weights(store, path);
    std::string bytes = slurp(path);
    bytes.resize(bytes.size() - 4);
    CHECK(save_and_expect(path, bytes) == StoreErrc::payload_length);
}

TEST_CASE("excess payload") {
    const WeightStore store = random_weight_store(tiny_config(), 1);
    const std::string path = tmp_path("vir_store_excess.virw");
    save_weights(store, path);
    std::string bytes = slurp(path) + std::string(8, '\0');
    CHECK(save_and_expect(path, bytes) == StoreErrc::payload_length);
}

TEST_CASE("overlapping manifest offsets") {
    const std::string manifest =
        R"([{"name":"a","dtype":"f64","shape":[2],"offset":0,"byte_len":16},)"
        R"({"name":"b","dtype":"f64","shape":[2],"offset":8,"byte_len":16}])";
    const std::string path = tmp_path("vir_store_overlap.virw");
    CHECK(save_and_expect(path, handmade_file(manifest, 24)) == StoreErrc::bad_manifest);
}

TEST_CASE("unknown dtype") {
    const std::string manifest =
        R"([{"name":"a","dtype":"f16","shape":[2],"offset":0,"byte_len":4}])";
    const std::string path = tmp_path("vir_store_dtype.virw");
    CHECK(save_and_expect(path, handmade_file(manifest, 4)) == StoreErrc::unknown_dtype);
}

TEST_CASE("manifest json and field errors") {
    const std::string path = tmp_path("vir_store_manifest.virw");
    CHECK(save_and_expect(path, handmade_file("[{\"name\":", 0)) == StoreErrc::bad_manifest);
    const std::string missing_fields = R"([{"name":"a","dtype":"f64"}])";
    CHECK(save_and_expect(path, handmade_file(missing_fields, 0)) == StoreErrc::bad_manifest);
    const std::string wrong_len =
        R"([{"name":"a","dtype":"f64","shape":[2],"offset":0,"byte_len":12}])";
    CHECK(save_and_expect(path, handmade_file(wrong_len, 12)) == StoreErrc::bad_manifest);
}

TEST_CASE("store lookup and duplicate names") {
    WeightStore store;
    store.put("a", Tensor({2, 2}));
    CHECK(store.contains("a"));
    CHECK_FALSE(store.contains("b"));
    CHECK_THROWS_AS(store.get("b"), MissingWeightError);
    CHECK_THROWS_AS(store.put("a", Tensor({1})), ParamError);
    try {
        store.get("pos_embed");
    } catch (const MissingWeightError& e) {
        CHECK(e.name() == "pos_embed");
    }
}

TEST_CASE("io failure surfaces as a store error") {
    CHECK_THROWS_AS(load_weights("/nonexistent/dir/x.virw"), StoreError);
    const WeightStore store = random_weight_store(tiny_config(), 1);
    CHECK_THROWS_AS(save_weights(store, "/nonexistent/dir/x.virw"), StoreError);
}
