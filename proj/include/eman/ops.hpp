#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eman/autograd.hpp"
#include "eman/tensor.hpp"

namespace eman {

// Differentiable primitives. Each returns the forward value and, when any
// input is attached to a tape, appends one entry to that tape.
//
// add/sub/mul broadcast numpy-style: shapes are right-aligned and each extent
// must match or be 1. Reductions keep reduced axes with extent 1; an empty
// axis list reduces over every axis.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x, std::vector<std::size_t> axes = {});
Tensor mean(const Tensor& x, std::vector<std::size_t> axes = {});
/// Biased (1/N) variance over `axes`.
Tensor variance(const Tensor& x, std::vector<std::size_t> axes = {});
/// 1 / sqrt(x + eps)
Tensor rsqrt(const Tensor& x, double eps = 0.0);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor scale(const Tensor& x, double factor);
/// Rows of a rank>=1 tensor picked along axis 0; indices may repeat.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
/// Row-wise log-softmax over the last axis.
Tensor log_softmax(const Tensor& x);
/// Row-wise softmax over the last axis.
Tensor softmax(const Tensor& x);
/// x / max(||x||, eps) for every slice along `axis`.
Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps = 1e-12);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

enum class PrimitiveKind { matmul, add, mul, relu, mean, variance, rsqrt, concat, slice, reshape };

struct PrimitiveAttrs {
    std::vector<std::size_t> axes;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    double eps = 0.0;
    Shape shape;
};

/// Uniform entry point over the core primitive set.
Tensor apply_primitive(PrimitiveKind kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs = {});

// Composites built from the primitives above.

/// Mean cross-entropy over rows. `weights` (one per row, optional) scale each
/// row's term; the sum is divided by `denominator` (default: row count).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights = {},
                     double denominator = 0.0);

/// Row-wise softmax of a constant tensor (no tape entry).
Tensor softmax_values(const Tensor& logits);

/// Row sums of the elementwise product: [n, d] x [n, d] -> [n, 1].
Tensor row_dot(const Tensor& a, const Tensor& b);

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op);

}  // namespace eman
