#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eman {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class Tape;

/// Dense row-major array of doubles.
///
/// Storage is shared and immutable: copies are cheap and never alias a
/// mutable buffer. A tensor created by `Tape::leaf` or by an op over such a
/// tensor is attached to that tape and carries its node id; everything else
/// is a constant.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);
    Tensor(Shape shape, std::initializer_list<double> data);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    std::size_t extent(std::size_t axis) const;

    std::span<const double> data() const { return *data_; }
    const double* raw() const { return data_->data(); }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double at(std::size_t row, std::size_t col) const;
    /// Value of a single-element tensor.
    double item() const;
    std::vector<double> to_vector() const { return *data_; }

    bool requires_grad() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    NodeId node() const { return node_; }
    std::uint64_t generation() const { return generation_; }

    /// Same values, no tape attachment.
    Tensor detach() const;

    /// Same data under a new shape with equal element count (no tape entry).
    Tensor reshaped(Shape shape) const;

    /// Shape and bitwise data equality.
    bool bit_equal(const Tensor& other) const;

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    NodeId node_ = 0;
    std::uint64_t generation_ = 0;
};

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace eman
