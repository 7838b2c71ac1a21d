#include "vir/weight_store.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "vir/error.hpp"

namespace vir {

using nlohmann::json;

void WeightStore::put(std::string name, Tensor tensor, Dtype dtype) {
    if (name.empty()) throw ParamError("weight name must be non-empty");
    if (index_.count(name)) throw ParamError("duplicate weight name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(tensor), dtype});
}

const Tensor& WeightStore::get(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw MissingWeightError(std::string(name));
    return entries_[it->second].tensor;
}

Dtype WeightStore::dtype_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw MissingWeightError(std::string(name));
    return entries_[it->second].dtype;
}

bool WeightStore::contains(std::string_view name) const {
    return index_.count(std::string(name)) > 0;
}

namespace {

constexpr char kMagic[4] = {'V', 'I', 'R', 'W'};
constexpr std::uint32_t kVersion = 1;

void append_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t read_u32_le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void append_f64_le(std::string& out, double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    append_u64_le(out, bits);
}

void append_f32_le(std::string& out, float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    append_u32_le(out, bits);
}

}  // namespace

void save_weights(const WeightStore& store, const std::string& path) {
    json manifest = json::array();
    std::string payload;
    std::uint64_t offset = 0;
    for (const auto& e : store.entries()) {
        const std::uint64_t byte_len = e.tensor.numel() * dtype_size(e.dtype);
        manifest.push_back({{"name", e.name},
                            {"dtype", dtype_name(e.dtype)},
                            {"shape", e.tensor.shape()},
                            {"offset", offset},
                            {"byte_len", byte_len}});
        payload.reserve(payload.size() + byte_len);
        if (e.dtype == Dtype::f64) {
            for (double x : e.tensor.flat()) append_f64_le(payload, x);
        } else {
            for (double x : e.tensor.flat()) append_f32_le(payload, static_cast<float>(x));
        }
        offset += byte_len;
    }

    const std::string manifest_str = manifest.dump();
    std::string header;
    header.append(kMagic, 4);
    append_u32_le(header, kVersion);
    append_u64_le(header, manifest_str.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StoreError(StoreErrc::io, "cannot open for writing: " + path);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(manifest_str.data(), static_cast<std::streamsize>(manifest_str.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw StoreError(StoreErrc::io, "write failed: " + path);
}

WeightStore load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError(StoreErrc::io, "cannot open for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw StoreError(StoreErrc::io, "read failed: " + path);

    if (bytes.size() < 16) throw StoreError(StoreErrc::bad_magic, "file shorter than header");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (std::memcmp(p, kMagic, 4) != 0)
        throw StoreError(StoreErrc::bad_magic, "expected magic VIRW");
    const std::uint32_t version = read_u32_le(p + 4);
    if (version != kVersion)
        throw StoreError(StoreErrc::bad_version,
                         "unsupported version " + std::to_string(version));
    const std::uint64_t manifest_len = read_u64_le(p + 8);
    if (manifest_len > bytes.size() - 16)
        throw StoreError(StoreErrc::bad_manifest, "manifest length exceeds file size");

    json manifest;
    try {
        manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + manifest_len);
    } catch (const json::exception& ex) {
        throw StoreError(StoreErrc::bad_manifest, ex.what());
    }
    if (!manifest.is_array()) throw StoreError(StoreErrc::bad_manifest, "manifest is not an array");

    const std::size_t payload_start = 16 + manifest_len;
    const std::uint64_t payload_len = bytes.size() - payload_start;
    const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data()) + payload_start;

    WeightStore store;
    std::uint64_t expected_offset = 0;
    for (const auto& item : manifest) {
        std::string name, dtype_str;
        Shape shape;
        std::uint64_t offset = 0, byte_len = 0;
        try {
            name = item.at("name").get<std::string>();
            dtype_str = item.at("dtype").get<std::string>();
            shape = item.at("shape").get<Shape>();
            offset = item.at("offset").get<std::uint64_t>();
            byte_len = item.at("byte_len").get<std::uint64_t>();
        } catch (const json::exception& ex) {
            throw StoreError(StoreErrc::bad_manifest, ex.what());
        }

        Dtype dtype;
        if (dtype_str == "f64") dtype = Dtype::f64;
        else if (dtype_str == "f32") dtype = Dtype::f32;
        else throw StoreError(StoreErrc::unknown_dtype, "dtype \"" + dtype_str + "\" for " + name);

        if (offset < expected_offset)
            throw StoreError(StoreErrc::bad_manifest,
                             "offsets overlap or are out of order at " + name);
        std::size_t numel;
        try {
            numel = checked_numel(shape);
        } catch (const Error& ex) {
            throw StoreError(StoreErrc::bad_manifest, std::string(ex.what()) + " at " + name);
        }
        if (numel > std::numeric_limits<std::uint64_t>::max() / dtype_size(dtype) ||
            byte_len != numel * dtype_size(dtype))
            throw StoreError(StoreErrc::bad_manifest,
                             "byte_len does not match shape and dtype at " + name);
        if (offset > payload_len || byte_len > payload_len - offset)
            throw StoreError(StoreErrc::payload_length,
                             "payload truncated: " + name + " needs bytes up to " +
                                 std::to_string(offset + byte_len) + ", payload has " +
                                 std::to_string(payload_len));
        expected_offset = offset + byte_len;

        Tensor t(shape);
        const unsigned char* src = payload + offset;
        if (dtype == Dtype::f64) {
            for (std::size_t i = 0; i < numel; ++i) {
                const std::uint64_t bits = read_u64_le(src + 8 * i);
                double x;
                std::memcpy(&x, &bits, 8);
                t(i) = x;
            }
        } else {
            for (std::size_t i = 0; i < numel; ++i) {
                const std::uint32_t bits = read_u32_le(src + 4 * i);
                float x;
                std::memcpy(&x, &bits, 4);
                t(i) = static_cast<double>(x);
            }
        }
        store.put(std::move(name), std::move(t), dtype);
    }
    if (expected_offset != payload_len)
        throw StoreError(StoreErrc::payload_length,
                         "payload has " + std::to_string(payload_len) + " bytes, manifest covers " +
                             std::to_string(expected_offset));
    return store;
}

}  // namespace vir
