#include "eman/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace eman {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ", ")); }

Tensor::Tensor() : shape_{0}, data_(std::make_shared<const std::vector<double>>()) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_.empty()) shape_.push_back(1);
    if (numel(shape_) != data.size()) {
        throw ShapeError(fmt::format("tensor: shape {} holds {} elements but {} were given", to_string(shape_),
                                     numel(shape_), data.size()));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), std::vector<double>(data)) {}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError(fmt::format("tensor: axis {} out of range for shape {}", axis, to_string(shape_)));
    }
    return shape_[axis];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2 || row >= shape_[0] || col >= shape_[1]) {
        throw ShapeError(fmt::format("tensor: index ({}, {}) invalid for shape {}", row, col, to_string(shape_)));
    }
    return (*data_)[row * shape_[1] + col];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError(fmt::format("tensor: item() on shape {}", to_string(shape_)));
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor out;
    out.shape_ = shape_;
    out.data_ = data_;
    return out;
}

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != size()) {
        throw ShapeError(fmt::format("reshape: cannot view {} as {}", to_string(shape_), to_string(shape)));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           (data_ == other.data_ || std::memcmp(raw(), other.raw(), size() * sizeof(double)) == 0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("max_abs_diff: shapes {} and {} differ", to_string(a.shape()), to_string(b.shape())));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(a[i] - b[i]);
        if (std::isnan(d)) return d;
        worst = std::max(worst, d);
    }
    return worst;
}

}  // namespace eman
