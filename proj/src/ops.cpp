#include "eman/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "eman/simd/kernels.hpp"

namespace eman {
namespace {

const simd::KernelTable& kern() { return simd::kernels(); }

std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
    return strides;
}

/// Strides of `in` viewed in the (right-aligned) frame of `out`; broadcast
/// axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const std::size_t pad = out.size() - in.size();
    const auto in_strides = strides_of(in);
    std::vector<std::size_t> strides(out.size(), 0);
    for (std::size_t d = 0; d < in.size(); ++d) strides[pad + d] = in[d] == 1 ? 0 : in_strides[d];
    return strides;
}

Shape as_rank_at_least_1(Shape s) {
    if (s.empty()) s.push_back(1);
    return s;
}

/// Walks all rows (every index except the last axis) of a tensor of `shape`,
/// calling fn(row, offsets...) where offsets are computed from `stride_sets`.
template <typename Fn>
void for_each_row(const Shape& shape, const std::vector<const std::vector<std::size_t>*>& stride_sets, Fn fn) {
    const std::size_t r = shape.size();
    const std::size_t inner = shape[r - 1];
    const std::size_t total = numel(shape);
    const std::size_t rows = inner == 0 ? 0 : total / inner;
    std::vector<std::size_t> idx(r - 1, 0);
    std::vector<std::size_t> offsets(stride_sets.size(), 0);
    for (std::size_t row = 0; row < rows; ++row) {
        fn(row, offsets);
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            for (std::size_t s = 0; s < stride_sets.size(); ++s) offsets[s] += (*stride_sets[s])[d];
            if (idx[d] < shape[d]) break;
            for (std::size_t s = 0; s < stride_sets.size(); ++s) offsets[s] -= idx[d] * (*stride_sets[s])[d];
            idx[d] = 0;
        }
    }
}

enum class Bin { add, sub, mul };

std::vector<double> broadcast_binary(const Tensor& a, const Tensor& b, Bin op, const Shape& out_shape) {
    const auto& k = kern();
    const std::size_t n = numel(out_shape);
    std::vector<double> out(n);
    if (a.shape() == b.shape()) {
        switch (op) {
            case Bin::add: k.add(a.raw(), b.raw(), out.data(), n); break;
            case Bin::sub: k.sub(a.raw(), b.raw(), out.data(), n); break;
            case Bin::mul: k.mul(a.raw(), b.raw(), out.data(), n); break;
        }
        return out;
    }
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    const std::size_t r = out_shape.size();
    const std::size_t inner = out_shape[r - 1];
    const std::size_t ia = sa[r - 1];
    const std::size_t ib = sb[r - 1];
    for_each_row(out_shape, {&sa, &sb}, [&](std::size_t row, const std::vector<std::size_t>& off) {
        const double* pa = a.raw() + off[0];
        const double* pb = b.raw() + off[1];
        double* po = out.data() + row * inner;
        if (ia == 1 && ib == 1) {
            switch (op) {
                case Bin::add: k.add(pa, pb, po, inner); break;
                case Bin::sub: k.sub(pa, pb, po, inner); break;
                case Bin::mul: k.mul(pa, pb, po, inner); break;
            }
        } else if (ia == 1 && ib == 0) {
            switch (op) {
                case Bin::add: k.add_scalar(pa, *pb, po, inner); break;
                case Bin::sub: k.add_scalar(pa, -*pb, po, inner); break;  // x - s == x + (-s) exactly
                case Bin::mul: k.mul_scalar(pa, *pb, po, inner); break;
            }
        } else if (ia == 0 && ib == 1 && op != Bin::sub) {
            if (op == Bin::add) k.add_scalar(pb, *pa, po, inner);
            else k.mul_scalar(pb, *pa, po, inner);
        } else {
            for (std::size_t j = 0; j < inner; ++j) {
                const double x = pa[j * ia];
                const double y = pb[j * ib];
                po[j] = op == Bin::add ? x + y : op == Bin::sub ? x - y : x * y;
            }
        }
    });
    return out;
}

Shape reduced_shape(const Shape& shape, const std::vector<bool>& reduced) {
    Shape out = shape;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (reduced[d]) out[d] = 1;
    }
    return out;
}

std::vector<bool> reduction_mask(const Shape& shape, const std::vector<std::size_t>& axes, std::string_view op) {
    std::vector<bool> mask(shape.size(), axes.empty());
    for (std::size_t axis : axes) {
        if (axis >= shape.size()) {
            throw ShapeError(fmt::format("{}: axis {} out of range for shape {}", op, axis, to_string(shape)));
        }
        mask[axis] = true;
    }
    return mask;
}

/// Sum over masked axes, keeping dims. Accumulates rows in order so the
/// result for a given output element depends only on its own inputs.
std::vector<double> reduce_sum(const Tensor& x, const std::vector<bool>& reduced) {
    const auto& k = kern();
    const Shape out_shape = reduced_shape(x.shape(), reduced);
    std::vector<double> out(numel(out_shape), 0.0);
    const std::size_t r = x.rank();
    const std::size_t inner = x.shape()[r - 1];
    std::vector<std::size_t> out_strides = strides_of(out_shape);
    for (std::size_t d = 0; d < r; ++d) {
        if (reduced[d]) out_strides[d] = 0;
    }
    const bool last_reduced = reduced[r - 1];
    for_each_row(x.shape(), {&out_strides}, [&](std::size_t row, const std::vector<std::size_t>& off) {
        const double* px = x.raw() + row * inner;
        double* po = out.data() + off[0];
        if (last_reduced) {
            *po += k.sum(px, inner);
        } else {
            k.add(po, px, po, inner);
        }
    });
    return out;
}

/// Broadcast `g` (same rank, extents 1 or full) up to `shape`.
std::vector<double> expand(const Tensor& g, const Shape& shape) {
    if (g.shape() == shape) return g.to_vector();
    const auto sg = broadcast_strides(g.shape(), shape);
    const std::size_t inner = shape.back();
    const std::size_t ig = sg.back();
    std::vector<double> out(numel(shape));
    for_each_row(shape, {&sg}, [&](std::size_t row, const std::vector<std::size_t>& off) {
        const double* pg = g.raw() + off[0];
        double* po = out.data() + row * inner;
        if (ig == 1) std::copy(pg, pg + inner, po);
        else std::fill(po, po + inner, *pg);
    });
    return out;
}

/// Reduce a broadcast gradient back to `target`.
Tensor sum_to(const Tensor& grad, const Shape& target) {
    if (grad.shape() == target) return grad;
    const std::size_t pad = grad.rank() - target.size();
    std::vector<bool> reduced(grad.rank(), false);
    for (std::size_t d = 0; d < grad.rank(); ++d) {
        const std::size_t t = d < pad ? 1 : target[d - pad];
        reduced[d] = (t == 1 && grad.shape()[d] != 1);
    }
    return Tensor(target, reduce_sum(grad, reduced));
}

std::size_t reduced_count(const Shape& shape, const std::vector<bool>& reduced) {
    std::size_t count = 1;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (reduced[d]) count *= shape[d];
    }
    return count;
}

Tape* common_tape(std::span<const Tensor* const> inputs, OpKind kind) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->requires_grad()) continue;
        if (tape != nullptr && tape != t->tape()) {
            throw AutogradError(fmt::format("{}: inputs belong to different records", to_string(kind)));
        }
        tape = t->tape();
    }
    return tape;
}

Tensor finish(OpKind kind, std::span<const Tensor* const> inputs, Tensor value, OpAttrs attrs = {},
              std::vector<Tensor> saved = {}) {
    Tape* tape = common_tape(inputs, kind);
    if (tape == nullptr) return value;
    return tape->record(kind, inputs, value, std::move(attrs), std::move(saved));
}

Tensor finish(OpKind kind, std::initializer_list<const Tensor*> inputs, Tensor value, OpAttrs attrs = {},
              std::vector<Tensor> saved = {}) {
    return finish(kind, std::span<const Tensor* const>(inputs.begin(), inputs.size()), std::move(value),
                  std::move(attrs), std::move(saved));
}

void require_rank2(const Tensor& t, std::string_view op, std::string_view which) {
    if (t.rank() != 2) {
        throw ShapeError(fmt::format("{}: {} must be rank 2, got {}", op, which, to_string(t.shape())));
    }
}

std::vector<double> slice_values(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = x.shape();
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
    const std::size_t len = (end - begin) * inner;
    std::vector<double> out(outer * len);
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = x.raw() + (o * s[axis] + begin) * inner;
        std::copy(src, src + len, out.data() + o * len);
    }
    return out;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
    const Shape pa = as_rank_at_least_1(a);
    const Shape pb = as_rank_at_least_1(b);
    const std::size_t r = std::max(pa.size(), pb.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t ea = i < r - pa.size() ? 1 : pa[i - (r - pa.size())];
        const std::size_t eb = i < r - pb.size() ? 1 : pb[i - (r - pb.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError(fmt::format("{}: cannot broadcast {} with {} (axis {}: {} vs {})", op, to_string(a),
                                         to_string(b), i, ea, eb));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul", "lhs");
    require_rank2(b, "matmul", "rhs");
    const std::size_t n = a.extent(0), k = a.extent(1), m = b.extent(1);
    if (b.extent(0) != k) {
        throw ShapeError(fmt::format("matmul: inner extents differ ({} vs {}) for {} x {}", k, b.extent(0),
                                     to_string(a.shape()), to_string(b.shape())));
    }
    std::vector<double> out(n * m);
    kern().gemm_nn(a.raw(), b.raw(), out.data(), n, k, m);
    return finish(OpKind::matmul, {&a, &b}, Tensor({n, m}, std::move(out)), {}, {a.detach(), b.detach()});
}

Tensor add(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "add");
    OpAttrs attrs;
    attrs.input_shapes = {a.shape(), b.shape()};
    return finish(OpKind::add, {&a, &b}, Tensor(out_shape, broadcast_binary(a, b, Bin::add, out_shape)),
                  std::move(attrs));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "sub");
    OpAttrs attrs;
    attrs.input_shapes = {a.shape(), b.shape()};
    return finish(OpKind::sub, {&a, &b}, Tensor(out_shape, broadcast_binary(a, b, Bin::sub, out_shape)),
                  std::move(attrs));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape(), "mul");
    OpAttrs attrs;
    attrs.input_shapes = {a.shape(), b.shape()};
    return finish(OpKind::mul, {&a, &b}, Tensor(out_shape, broadcast_binary(a, b, Bin::mul, out_shape)),
                  std::move(attrs), {a.detach(), b.detach()});
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    kern().relu(x.raw(), out.data(), x.size());
    return finish(OpKind::relu, {&x}, Tensor(x.shape(), std::move(out)), {}, {x.detach()});
}

Tensor sum(const Tensor& x, std::vector<std::size_t> axes) {
    const auto mask = reduction_mask(x.shape(), axes, "sum");
    OpAttrs attrs;
    attrs.axes = std::move(axes);
    attrs.input_shapes = {x.shape()};
    return finish(OpKind::sum, {&x}, Tensor(reduced_shape(x.shape(), mask), reduce_sum(x, mask)), std::move(attrs));
}

Tensor mean(const Tensor& x, std::vector<std::size_t> axes) {
    const auto mask = reduction_mask(x.shape(), axes, "mean");
    const std::size_t count = reduced_count(x.shape(), mask);
    if (count == 0) throw ShapeError(fmt::format("mean: empty reduction over {}", to_string(x.shape())));
    std::vector<double> out = reduce_sum(x, mask);
    for (double& v : out) v /= static_cast<double>(count);
    OpAttrs attrs;
    attrs.axes = std::move(axes);
    attrs.input_shapes = {x.shape()};
    return finish(OpKind::mean, {&x}, Tensor(reduced_shape(x.shape(), mask), std::move(out)), std::move(attrs));
}

Tensor variance(const Tensor& x, std::vector<std::size_t> axes) {
    const auto mask = reduction_mask(x.shape(), axes, "variance");
    const std::size_t count = reduced_count(x.shape(), mask);
    if (count == 0) throw ShapeError(fmt::format("variance: empty reduction over {}", to_string(x.shape())));
    const Shape rshape = reduced_shape(x.shape(), mask);
    std::vector<double> mu = reduce_sum(x, mask);
    for (double& v : mu) v /= static_cast<double>(count);
    const Tensor mu_t(rshape, std::move(mu));
    const Tensor centered(x.shape(), broadcast_binary(x, mu_t, Bin::sub, x.shape()));
    std::vector<double> sq(centered.size());
    kern().mul(centered.raw(), centered.raw(), sq.data(), sq.size());
    std::vector<double> var = reduce_sum(Tensor(x.shape(), std::move(sq)), mask);
    for (double& v : var) v = std::max(0.0, v / static_cast<double>(count));
    OpAttrs attrs;
    attrs.axes = std::move(axes);
    attrs.input_shapes = {x.shape()};
    return finish(OpKind::variance, {&x}, Tensor(rshape, std::move(var)), std::move(attrs), {centered});
}

Tensor rsqrt(const Tensor& x, double eps) {
    std::vector<double> out(x.size());
    kern().add_scalar(x.raw(), eps, out.data(), out.size());
    kern().rsqrt(out.data(), out.data(), out.size());
    Tensor y(x.shape(), std::move(out));
    OpAttrs attrs;
    attrs.scalar = eps;
    return finish(OpKind::rsqrt, {&x}, y, std::move(attrs), {y});
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) {
        throw ShapeError(fmt::format("concat: axis {} out of range for shape {}", axis, to_string(first)));
    }
    Shape out_shape = first;
    out_shape[axis] = 0;
    OpAttrs attrs;
    attrs.axis = axis;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) {
            throw ShapeError(fmt::format("concat: shape {} incompatible with {} along axis {}", to_string(s),
                                         to_string(first), axis));
        }
        out_shape[axis] += s[axis];
        attrs.input_shapes.push_back(s);
    }
    const std::size_t outer = numel(Shape(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(first.begin() + static_cast<std::ptrdiff_t>(axis) + 1, first.end()));
    std::vector<double> out(numel(out_shape));
    double* dst = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (const Tensor& p : parts) {
            const std::size_t len = p.shape()[axis] * inner;
            const double* src = p.raw() + o * len;
            dst = std::copy(src, src + len, dst);
        }
    }
    std::vector<const Tensor*> inputs;
    inputs.reserve(parts.size());
    for (const Tensor& p : parts) inputs.push_back(&p);
    return finish(OpKind::concat, std::span<const Tensor* const>(inputs), Tensor(out_shape, std::move(out)),
                  std::move(attrs));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank() || begin >= end || end > x.shape()[axis]) {
        throw ShapeError(fmt::format("slice: range [{}, {}) on axis {} invalid for shape {}", begin, end, axis,
                                     to_string(x.shape())));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = end - begin;
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.begin = begin;
    attrs.end = end;
    attrs.input_shapes = {x.shape()};
    return finish(OpKind::slice, {&x}, Tensor(out_shape, slice_values(x, axis, begin, end)), std::move(attrs));
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError(fmt::format("reshape: cannot view {} as {}", to_string(x.shape()), to_string(shape)));
    }
    OpAttrs attrs;
    attrs.input_shapes = {x.shape()};
    return finish(OpKind::reshape, {&x}, x.detach().reshaped(std::move(shape)), std::move(attrs));
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.size());
    kern().mul_scalar(x.raw(), factor, out.data(), out.size());
    OpAttrs attrs;
    attrs.scalar = factor;
    return finish(OpKind::scale, {&x}, Tensor(x.shape(), std::move(out)), std::move(attrs));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
    if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
    const std::size_t rows = x.shape()[0];
    const std::size_t width = rows == 0 ? 0 : x.size() / rows;
    Shape out_shape = x.shape();
    out_shape[0] = indices.size();
    std::vector<double> out(indices.size() * width);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) {
            throw ShapeError(fmt::format("gather_rows: index {} out of range for {} rows", indices[i], rows));
        }
        std::copy_n(x.raw() + indices[i] * width, width, out.data() + i * width);
    }
    OpAttrs attrs;
    attrs.indices.assign(indices.begin(), indices.end());
    attrs.input_shapes = {x.shape()};
    return finish(OpKind::gather_rows, {&x}, Tensor(out_shape, std::move(out)), std::move(attrs));
}

Tensor log_softmax(const Tensor& x) {
    if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("log_softmax: empty last axis");
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.size() / width;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* px = x.raw() + r * width;
        double* po = out.data() + r * width;
        const double mx = *std::max_element(px, px + width);
        double acc = 0.0;
        for (std::size_t j = 0; j < width; ++j) acc += std::exp(px[j] - mx);
        const double lse = mx + std::log(acc);
        for (std::size_t j = 0; j < width; ++j) po[j] = px[j] - lse;
    }
    Tensor y(x.shape(), std::move(out));
    return finish(OpKind::log_softmax, {&x}, y, {}, {y});
}

Tensor softmax(const Tensor& x) {
    const Tensor lsm = log_softmax(x.detach());
    std::vector<double> out(lsm.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(lsm[i]);
    Tensor y(x.shape(), std::move(out));
    return finish(OpKind::softmax, {&x}, y, {}, {y});
}

Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps) {
    if (axis >= x.rank()) {
        throw ShapeError(fmt::format("l2_normalize: axis {} out of range for shape {}", axis, to_string(x.shape())));
    }
    if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize: eps must be > 0");
    const Shape& s = x.shape();
    const std::size_t len = s[axis];
    const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
    const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
    std::vector<double> out(x.size());
    std::vector<double> norms(outer * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const double* px = x.raw() + o * len * inner + in;
            double sq = 0.0;
            if (inner == 1) {
                sq = kern().dot(px, px, len);
            } else {
                for (std::size_t l = 0; l < len; ++l) sq += px[l * inner] * px[l * inner];
            }
            const double norm = std::sqrt(sq);
            norms[o * inner + in] = norm;
            const double denom = std::max(norm, eps);
            double* po = out.data() + o * len * inner + in;
            for (std::size_t l = 0; l < len; ++l) po[l * inner] = px[l * inner] / denom;
        }
    }
    Tensor y(s, std::move(out));
    OpAttrs attrs;
    attrs.axis = axis;
    attrs.scalar = eps;
    return finish(OpKind::l2_normalize, {&x}, y, std::move(attrs), {y, Tensor({outer * inner}, std::move(norms))});
}

Tensor apply_primitive(PrimitiveKind kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs) {
    auto need = [&](std::size_t n, std::string_view op) {
        if (inputs.size() != n) {
            throw std::invalid_argument(fmt::format("{}: expected {} input(s), got {}", op, n, inputs.size()));
        }
    };
    switch (kind) {
        case PrimitiveKind::matmul: need(2, "matmul"); return matmul(inputs[0], inputs[1]);
        case PrimitiveKind::add: need(2, "add"); return add(inputs[0], inputs[1]);
        case PrimitiveKind::mul: need(2, "mul"); return mul(inputs[0], inputs[1]);
        case PrimitiveKind::relu: need(1, "relu"); return relu(inputs[0]);
        case PrimitiveKind::mean: need(1, "mean"); return mean(inputs[0], attrs.axes);
        case PrimitiveKind::variance: need(1, "variance"); return variance(inputs[0], attrs.axes);
        case PrimitiveKind::rsqrt: need(1, "rsqrt"); return rsqrt(inputs[0], attrs.eps);
        case PrimitiveKind::concat: return concat(inputs, attrs.axis);
        case PrimitiveKind::slice: need(1, "slice"); return slice(inputs[0], attrs.axis, attrs.begin, attrs.end);
        case PrimitiveKind::reshape: need(1, "reshape"); return reshape(inputs[0], attrs.shape);
    }
    throw std::invalid_argument("apply_primitive: unknown kind");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights,
                     double denominator) {
    require_rank2(logits, "cross_entropy", "logits");
    const std::size_t n = logits.extent(0), c = logits.extent(1);
    if (labels.size() != n) {
        throw ShapeError(fmt::format("cross_entropy: {} labels for {} rows", labels.size(), n));
    }
    if (!weights.empty() && weights.size() != n) {
        throw ShapeError(fmt::format("cross_entropy: {} weights for {} rows", weights.size(), n));
    }
    const double denom = denominator > 0.0 ? denominator : static_cast<double>(n);
    std::vector<double> coeff(n * c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw std::invalid_argument(fmt::format("cross_entropy: label {} outside [0, {})", labels[i], c));
        }
        const double w = weights.empty() ? 1.0 : weights[i];
        coeff[i * c + static_cast<std::size_t>(labels[i])] = -w / denom;
    }
    return reshape(sum(mul(log_softmax(logits), Tensor({n, c}, std::move(coeff)))), {1});
}

Tensor softmax_values(const Tensor& logits) { return softmax(logits.detach()); }

Tensor row_dot(const Tensor& a, const Tensor& b) {
    require_rank2(a, "row_dot", "lhs");
    return sum(mul(a, b), {1});
}

namespace detail {

std::vector<std::optional<Tensor>> entry_backward(const TapeEntry& e, const Tensor& g) {
    const auto& k = kern();
    std::vector<std::optional<Tensor>> grads(e.inputs.size());
    auto wants = [&](std::size_t i) { return e.inputs[i] != kConstant; };

    switch (e.kind) {
        case OpKind::matmul: {
            const Tensor& a = e.saved[0];
            const Tensor& b = e.saved[1];
            const std::size_t n = a.extent(0), kk = a.extent(1), m = b.extent(1);
            if (wants(0)) {
                std::vector<double> ga(n * kk);
                k.gemm_nt(g.raw(), b.raw(), ga.data(), n, kk, m);
                grads[0] = Tensor({n, kk}, std::move(ga));
            }
            if (wants(1)) {
                std::vector<double> gb(kk * m);
                k.gemm_tn(a.raw(), g.raw(), gb.data(), n, kk, m);
                grads[1] = Tensor({kk, m}, std::move(gb));
            }
            break;
        }
        case OpKind::add:
        case OpKind::sub: {
            if (wants(0)) grads[0] = sum_to(g, e.attrs.input_shapes[0]);
            if (wants(1)) {
                Tensor gb = sum_to(g, e.attrs.input_shapes[1]);
                if (e.kind == OpKind::sub) {
                    std::vector<double> neg(gb.size());
                    k.mul_scalar(gb.raw(), -1.0, neg.data(), neg.size());
                    gb = Tensor(gb.shape(), std::move(neg));
                }
                grads[1] = std::move(gb);
            }
            break;
        }
        case OpKind::mul: {
            const Tensor& a = e.saved[0];
            const Tensor& b = e.saved[1];
            if (wants(0)) grads[0] = sum_to(Tensor(g.shape(), broadcast_binary(g, b, Bin::mul, g.shape())), a.shape());
            if (wants(1)) grads[1] = sum_to(Tensor(g.shape(), broadcast_binary(g, a, Bin::mul, g.shape())), b.shape());
            break;
        }
        case OpKind::relu: {
            const Tensor& x = e.saved[0];
            std::vector<double> gx(x.size());
            k.relu_backward(x.raw(), g.raw(), gx.data(), gx.size());
            grads[0] = Tensor(x.shape(), std::move(gx));
            break;
        }
        case OpKind::sum: {
            grads[0] = Tensor(e.attrs.input_shapes[0], expand(g, e.attrs.input_shapes[0]));
            break;
        }
        case OpKind::mean: {
            const Shape& in = e.attrs.input_shapes[0];
            const double count = static_cast<double>(reduced_count(in, reduction_mask(in, e.attrs.axes, "mean")));
            std::vector<double> gx = expand(g, in);
            for (double& v : gx) v /= count;
            grads[0] = Tensor(in, std::move(gx));
            break;
        }
        case OpKind::variance: {
            const Tensor& centered = e.saved[0];
            const Shape& in = e.attrs.input_shapes[0];
            const double count = static_cast<double>(reduced_count(in, reduction_mask(in, e.attrs.axes, "variance")));
            std::vector<double> gx = expand(g, in);
            k.mul(gx.data(), centered.raw(), gx.data(), gx.size());
            k.mul_scalar(gx.data(), 2.0 / count, gx.data(), gx.size());
            grads[0] = Tensor(in, std::move(gx));
            break;
        }
        case OpKind::rsqrt: {
            const Tensor& y = e.saved[0];
            std::vector<double> gx(y.size());
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] * (-0.5 * y[i] * y[i] * y[i]);
            grads[0] = Tensor(y.shape(), std::move(gx));
            break;
        }
        case OpKind::concat: {
            std::size_t offset = 0;
            for (std::size_t i = 0; i < e.inputs.size(); ++i) {
                const Shape& s = e.attrs.input_shapes[i];
                const std::size_t len = s[e.attrs.axis];
                if (wants(i)) grads[i] = Tensor(s, slice_values(g, e.attrs.axis, offset, offset + len));
                offset += len;
            }
            break;
        }
        case OpKind::slice: {
            const Shape& s = e.attrs.input_shapes[0];
            const std::size_t axis = e.attrs.axis;
            const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
            const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
            const std::size_t len = (e.attrs.end - e.attrs.begin) * inner;
            std::vector<double> gx(numel(s), 0.0);
            for (std::size_t o = 0; o < outer; ++o) {
                std::copy_n(g.raw() + o * len, len, gx.data() + (o * s[axis] + e.attrs.begin) * inner);
            }
            grads[0] = Tensor(s, std::move(gx));
            break;
        }
        case OpKind::reshape: {
            grads[0] = g.reshaped(e.attrs.input_shapes[0]);
            break;
        }
        case OpKind::scale: {
            std::vector<double> gx(g.size());
            k.mul_scalar(g.raw(), e.attrs.scalar, gx.data(), gx.size());
            grads[0] = Tensor(g.shape(), std::move(gx));
            break;
        }
        case OpKind::gather_rows: {
            const Shape& s = e.attrs.input_shapes[0];
            const std::size_t width = s[0] == 0 ? 0 : numel(s) / s[0];
            std::vector<double> gx(numel(s), 0.0);
            for (std::size_t i = 0; i < e.attrs.indices.size(); ++i) {
                double* dst = gx.data() + e.attrs.indices[i] * width;
                k.add(dst, g.raw() + i * width, dst, width);
            }
            grads[0] = Tensor(s, std::move(gx));
            break;
        }
        case OpKind::log_softmax: {
            const Tensor& y = e.saved[0];
            const std::size_t width = y.shape().back();
            const std::size_t rows = y.size() / width;
            std::vector<double> gx(y.size());
            for (std::size_t r = 0; r < rows; ++r) {
                const double gsum = k.sum(g.raw() + r * width, width);
                for (std::size_t j = 0; j < width; ++j) {
                    const std::size_t i = r * width + j;
                    gx[i] = g[i] - std::exp(y[i]) * gsum;
                }
            }
            grads[0] = Tensor(y.shape(), std::move(gx));
            break;
        }
        case OpKind::softmax: {
            const Tensor& y = e.saved[0];
            const std::size_t width = y.shape().back();
            const std::size_t rows = y.size() / width;
            std::vector<double> gx(y.size());
            for (std::size_t r = 0; r < rows; ++r) {
                const double gy = k.dot(g.raw() + r * width, y.raw() + r * width, width);
                for (std::size_t j = 0; j < width; ++j) {
                    const std::size_t i = r * width + j;
                    gx[i] = y[i] * (g[i] - gy);
                }
            }
            grads[0] = Tensor(y.shape(), std::move(gx));
            break;
        }
        case OpKind::l2_normalize: {
            const Tensor& y = e.saved[0];
            const Tensor& norms = e.saved[1];
            const Shape& s = y.shape();
            const std::size_t axis = e.attrs.axis;
            const double eps = e.attrs.scalar;
            const std::size_t len = s[axis];
            const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
            const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
            std::vector<double> gx(y.size());
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    const double norm = norms[o * inner + in];
                    if (norm > eps) {
                        double yg = 0.0;
                        for (std::size_t l = 0; l < len; ++l) yg += y[base + l * inner] * g[base + l * inner];
                        for (std::size_t l = 0; l < len; ++l) {
                            const std::size_t i = base + l * inner;
                            gx[i] = (g[i] - y[i] * yg) / norm;
                        }
                    } else {
                        for (std::size_t l = 0; l < len; ++l) gx[base + l * inner] = g[base + l * inner] / eps;
                    }
                }
            }
            grads[0] = Tensor(s, std::move(gx));
            break;
        }
    }
    return grads;
}

}  // namespace detail

}  // namespace eman
