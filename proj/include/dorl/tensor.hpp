#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "dorl/common.hpp"

namespace dorl {

using Shape = std::vector<int64_t>;

// 64-byte-aligned storage so Eigen's vectorized kernels always take the same
// peel path; unaligned buffers would make results depend on heap addresses.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}
    T* allocate(size_t n) {
        void* p = ::operator new(n * sizeof(T), std::align_val_t(64));
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw ShapeError("tensor extents must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

// Running count of matmul multiply-accumulates; used by tests to assert that
// masked encoding only touches visible tokens.
inline uint64_t& matmul_mac_counter() {
    static uint64_t count = 0;
    return count;
}

// Dense n-d array with shared, copy-on-nothing storage: copies alias the same
// buffer and ops never mutate their inputs.
template <typename T>
class TensorData {
  public:
    TensorData() = default;

    explicit TensorData(Shape shape)
        : shape_(std::move(shape)), buf_(std::make_shared<AlignedVec<T>>(shape_numel(shape_), T(0))) {}

    TensorData(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        if ((int64_t)values.size() != shape_numel(shape_))
            throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape_));
        buf_ = std::make_shared<AlignedVec<T>>(values.begin(), values.end());
    }

    static TensorData scalar(T v) { return TensorData({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int64_t numel() const { return buf_ ? (int64_t)buf_->size() : 0; }
    int64_t rows() const { return shape_.size() == 2 ? shape_[0] : (shape_.size() == 1 ? 1 : -1); }
    int64_t cols() const { return shape_.size() == 2 ? shape_[1] : (shape_.size() == 1 ? shape_[0] : -1); }
    bool defined() const { return (bool)buf_; }

    T* data() { return buf_->data(); }
    const T* data() const { return buf_->data(); }
    T& operator[](int64_t i) { return (*buf_)[i]; }
    const T& operator[](int64_t i) const { return (*buf_)[i]; }

    // 2-d view (1-d tensors map to a single row)
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<Mat> mat() {
        if (rows() < 0) throw ShapeError("matrix view requires rank <= 2, got " + shape_str(shape_));
        return Eigen::Map<Mat>(data(), rows(), cols());
    }
    Eigen::Map<const Mat> mat() const {
        if (rows() < 0) throw ShapeError("matrix view requires rank <= 2, got " + shape_str(shape_));
        return Eigen::Map<const Mat>(data(), rows(), cols());
    }
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> vec() {
        return Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(data(), numel());
    }
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vec() const {
        return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(data(), numel());
    }

    TensorData reshaped(Shape s) const {
        if (shape_numel(s) != numel()) throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s));
        TensorData out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    // Deep copy with its own buffer.
    TensorData clone() const {
        TensorData out;
        out.shape_ = shape_;
        out.buf_ = std::make_shared<AlignedVec<T>>(*buf_);
        return out;
    }

    template <typename U>
    TensorData<U> cast() const {
        std::vector<U> v(numel());
        for (int64_t i = 0; i < numel(); ++i) v[i] = (U)(*buf_)[i];
        return TensorData<U>(shape_, std::move(v));
    }

    bool same_shape(const TensorData& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (int64_t i = 0; i < numel(); ++i)
            if (!std::isfinite((double)(*buf_)[i])) return false;
        return true;
    }

    void fill(T v) { std::fill(buf_->begin(), buf_->end(), v); }

    void fill_gaussian(Rng& rng, T stddev) {
        for (int64_t i = 0; i < numel(); ++i) (*buf_)[i] = (T)(rng.gaussian() * (double)stddev);
    }

    bool bytes_equal(const TensorData& o) const {
        if (shape_ != o.shape_) return false;
        return std::memcmp(data(), o.data(), sizeof(T) * numel()) == 0;
    }

  private:
    Shape shape_;
    std::shared_ptr<AlignedVec<T>> buf_;
};

using TensorF = TensorData<float>;
using TensorD = TensorData<double>;

}  // namespace dorl
