#pragma once

#include <cstdint>

#include "vir/tensor.hpp"

namespace vir {

// splitmix64. Fully specified so every implementation of this library, in
// any language, reproduces the same test vectors from the same seed.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Top 53 bits -> [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) {
        if (!(lo < hi)) throw ParamError("uniform bounds require lo < hi");
        return lo + uniform() * (hi - lo);
    }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

// Row-major fill from the rng stream; same seed gives a bit-identical tensor.
template <typename T = double>
TensorT<T> fill_uniform(SplitMix64& rng, Shape shape, double lo = -0.02, double hi = 0.02) {
    if (!(lo < hi)) throw ParamError("fill_uniform requires lo < hi");
    TensorT<T> out(std::move(shape));
    for (auto& x : out.flat()) x = static_cast<T>(rng.uniform(lo, hi));
    return out;
}

}  // namespace vir
