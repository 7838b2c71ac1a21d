#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vir/tensor.hpp"

namespace vir {

// Named-tensor container. Entries keep insertion order (which fixes manifest
// and payload order on disk) and carry a serialization dtype; values are held
// as f64 in memory, f32 entries are narrowed on save and widened on load.
class WeightStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        Dtype dtype = Dtype::f64;
    };

    void put(std::string name, Tensor tensor, Dtype dtype = Dtype::f64);
    const Tensor& get(std::string_view name) const;  // throws MissingWeightError
    Dtype dtype_of(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// On-disk format:
//   bytes 0-3   magic "VIRW"
//   bytes 4-7   version = 1, little-endian u32
//   bytes 8-15  manifest byte length, little-endian u64
//   manifest    UTF-8 JSON array of {name, dtype, shape, offset, byte_len},
//               offsets relative to payload start, non-overlapping, ascending
//   payload     raw little-endian element data
void save_weights(const WeightStore& store, const std::string& path);
WeightStore load_weights(const std::string& path);

}  // namespace vir
