#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "svr/errors.hpp"

namespace svr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of reals, rank 0..5.
///
/// Axis convention (leading axes omitted when unused): batch, time,
/// channel, height, width. A rank-0 tensor holds one value.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        validate();
    }

    BasicTensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate();
        if (data_.size() != shape_size(shape_))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
    }

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T{0}); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T{1}); }
    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::ptrdiff_t axis) const {
        const auto r = static_cast<std::ptrdiff_t>(shape_.size());
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r)
            throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                                 shape_string(shape_));
        return shape_[static_cast<std::size_t>(axis)];
    }

    bool requires_grad() const noexcept { return requires_grad_; }
    BasicTensor& set_requires_grad(bool on = true) noexcept {
        requires_grad_ = on;
        return *this;
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& vec() noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    template <class... I>
    T& at(I... idx) {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }
    template <class... I>
    const T& at(I... idx) const {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }

    T item() const {
        if (data_.size() != 1)
            throw ContractError("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    BasicTensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size())
            throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                                 shape_string(shape));
        BasicTensor out(std::move(shape), data_);
        out.requires_grad_ = requires_grad_;
        return out;
    }

    template <class U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data().begin(),
                       [](T v) { return static_cast<U>(v); });
        out.set_requires_grad(requires_grad_);
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void validate() const {
        if (shape_.size() > 5)
            throw DimensionError("tensor rank " + std::to_string(shape_.size()) + " exceeds 5");
        for (auto e : shape_)
            if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape_));
    }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size())
            throw DimensionError("index rank mismatch for " + shape_string(shape_));
        std::size_t off = 0;
        std::size_t axis = 0;
        for (auto i : idx) {
            if (i >= shape_[axis]) throw DimensionError("index out of range");
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
    bool requires_grad_ = false;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

}  // namespace svr
