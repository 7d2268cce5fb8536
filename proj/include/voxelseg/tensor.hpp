#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "voxelseg/errors.hpp"

namespace voxelseg {

/// Fixed 5-axis shape (batch, channel, depth, height, width). Lower-rank
/// tensors set the leading axes to 1.
struct Shape {
    int b = 1, c = 1, d = 1, h = 1, w = 1;

    std::int64_t count() const { return std::int64_t(b) * c * d * h * w; }
    std::int64_t voxels() const { return std::int64_t(d) * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

template <class T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(Shape s, T fill = T(0))
        : shape_(s), data_(static_cast<std::size_t>(s.count()), fill) {}
    TensorT(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
        if (std::int64_t(data_.size()) != shape_.count())
            throw DataError("tensor data length does not match shape");
    }

    const Shape& shape() const { return shape_; }
    std::int64_t size() const { return std::int64_t(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& at(int b, int c, int d, int h, int w) {
        return data_[((((std::int64_t(b) * shape_.c + c) * shape_.d + d) * shape_.h + h) *
                      shape_.w) +
                     w];
    }
    T at(int b, int c, int d, int h, int w) const {
        return data_[((((std::int64_t(b) * shape_.c + c) * shape_.d + d) * shape_.h + h) *
                      shape_.w) +
                     w];
    }

    bool has_grad() const { return !grad_.empty(); }
    std::vector<T>& grad() {
        if (grad_.empty())
            grad_.assign(data_.size(), T(0));
        return grad_;
    }
    const std::vector<T>& grad() const { return grad_; }
    void zero_grad() {
        if (!grad_.empty())
            grad_.assign(grad_.size(), T(0));
    }
    void drop_grad() { grad_.clear(); }

    void resize(Shape s) {
        shape_ = s;
        data_.assign(static_cast<std::size_t>(s.count()), T(0));
        grad_.clear();
    }

    bool operator==(const TensorT&) const = default;

private:
    Shape shape_{};
    std::vector<T> data_;
    std::vector<T> grad_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

inline std::string Shape::str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," + std::to_string(d) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
}

} // namespace voxelseg
