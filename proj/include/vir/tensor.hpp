#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vir/error.hpp"

namespace vir {

using Shape = std::vector<std::size_t>;

inline std::string format_shape(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t checked_numel(const Shape& shape) {
    if (shape.empty()) throw ParamError("tensor shape must have rank >= 1");
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw ParamError("tensor extents must be positive, got " + format_shape(shape));
        if (e > std::numeric_limits<std::size_t>::max() / n)
            throw ParamError("tensor shape overflows size_t: " + format_shape(shape));
        n *= e;
    }
    return n;
}

// Thread-local accounting of live tensor elements. Benchmarks read the
// high-water mark; counts logical allocations, not OS bytes, so repeats of
// the same op report identical peaks.
struct AllocStats {
    long long live_elems = 0;
    long long peak_elems = 0;

    void on_alloc(long long n) {
        live_elems += n;
        if (live_elems > peak_elems) peak_elems = live_elems;
    }
    void on_free(long long n) { live_elems -= n; }
    void reset_peak() { peak_elems = live_elems; }
};

inline AllocStats& alloc_stats() {
    thread_local AllocStats stats;
    return stats;
}

// Dense row-major array. Element type is double for all correctness work;
// float is the opt-in benchmark variant.
template <typename T>
class TensorT {
public:
    using value_type = T;

    TensorT() = default;

    explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(checked_numel(shape_)) {
        account();
    }

    TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size())
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + format_shape(shape_));
        account();
    }

    TensorT(const TensorT& other) : shape_(other.shape_), data_(other.data_) { account(); }

    TensorT(TensorT&& other) noexcept
        : shape_(std::move(other.shape_)), data_(std::move(other.data_)), accounted_(other.accounted_) {
        other.accounted_ = 0;
        other.shape_.clear();
    }

    TensorT& operator=(const TensorT& other) {
        if (this != &other) {
            release();
            shape_ = other.shape_;
            data_ = other.data_;
            account();
        }
        return *this;
    }

    TensorT& operator=(TensorT&& other) noexcept {
        if (this != &other) {
            release();
            shape_ = std::move(other.shape_);
            data_ = std::move(other.data_);
            accounted_ = other.accounted_;
            other.accounted_ = 0;
            other.shape_.clear();
        }
        return *this;
    }

    ~TensorT() { release(); }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return shape_[0]; }
    std::size_t cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> flat() { return {data_.data(), data_.size()}; }
    std::span<const T> flat() const { return {data_.data(), data_.size()}; }

    T& operator()(std::size_t i) { return data_[i]; }
    T operator()(std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    T operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    T operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    std::span<T> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * shape_[1], shape_[1]}; }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

private:
    void account() {
        accounted_ = static_cast<long long>(data_.size());
        alloc_stats().on_alloc(accounted_);
    }
    void release() {
        if (accounted_) {
            alloc_stats().on_free(accounted_);
            accounted_ = 0;
        }
    }

    Shape shape_;
    std::vector<T> data_;
    long long accounted_ = 0;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

// Element type tag used by the weight container and the benchmark CLI.
enum class Dtype : std::uint8_t { f64, f32 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f64 ? "f64" : "f32"; }
inline std::size_t dtype_size(Dtype d) { return d == Dtype::f64 ? 8 : 4; }

}  // namespace vir
