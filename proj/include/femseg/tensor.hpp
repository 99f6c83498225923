#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "femseg/core.hpp"

namespace femseg {

/// Extents in layout order: batch, channels, then spatial axes (slowest first).
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array of scalars with a fixed shape.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), values_(numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != numel(shape_))
            throw ShapeError(cat("tensor: shape ", to_string(shape_), " holds ", numel(shape_),
                                 " values but ", values_.size(), " were given"));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    /// Number of spatial axes under the (batch, channels, spatial...) layout.
    std::size_t spatial_rank() const noexcept { return shape_.size() >= 2 ? shape_.size() - 2 : 0; }
    Shape spatial() const { return shape_.size() >= 2 ? Shape(shape_.begin() + 2, shape_.end()) : Shape{}; }

    T* data() noexcept { return values_.data(); }
    const T* data() const noexcept { return values_.data(); }
    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    bool requires_grad() const noexcept { return requires_grad_; }
    Tensor& set_requires_grad(bool on) noexcept {
        requires_grad_ = on;
        return *this;
    }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(values_.size());
        std::transform(values_.begin(), values_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        Tensor<U> t(shape_, std::move(out));
        t.set_requires_grad(requires_grad_);
        return t;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<T> values_;
    bool requires_grad_ = false;
};

}  // namespace femseg
