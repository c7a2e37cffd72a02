#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eman/tensor.hpp"

namespace eman {

enum class OpKind {
    matmul,
    add,
    sub,
    mul,
    relu,
    mean,
    variance,
    rsqrt,
    concat,
    slice,
    reshape,
    sum,
    scale,
    gather_rows,
    log_softmax,
    softmax,
    l2_normalize,
};

std::string_view to_string(OpKind kind);

struct OpAttrs {
    std::vector<std::size_t> axes;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
    std::vector<Shape> input_shapes;
};

inline constexpr NodeId kConstant = std::numeric_limits<NodeId>::max();

/// One recorded primitive application. Inputs that are constants carry
/// `kConstant` in place of a node id.
struct TapeEntry {
    OpKind kind;
    std::vector<NodeId> inputs;
    NodeId output;
    OpAttrs attrs;
    std::vector<Tensor> saved;
};

/// Result of a backward pass: gradients keyed by node and by leaf name.
class GradientMap {
public:
    /// Gradient of a tensor recorded on the tape that produced this map.
    const Tensor& of(const Tensor& t) const;
    const Tensor* find(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return named_.count(name) != 0; }

    const std::map<std::string, Tensor>& named() const { return named_; }
    std::size_t size() const { return named_.size(); }

private:
    friend class Tape;

    std::map<std::string, Tensor> named_;
    std::vector<std::optional<Tensor>> by_node_;
    const Tape* tape_ = nullptr;
    std::uint64_t generation_ = 0;
};

/// Differentiation record. Entries are appended in execution order, so the
/// record is topologically sorted by construction. `backward` consumes it;
/// tensors attached to a consumed record can no longer be used in ops.
///
/// Tensors keep a raw pointer to their tape: the tape must outlive every
/// tensor attached to it. Single-threaded.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a differentiable input. Named leaves appear in
    /// `GradientMap::named()`; names must be unique per record.
    Tensor leaf(const Tensor& value, std::string name = {});

    GradientMap backward(const Tensor& loss);

    std::span<const TapeEntry> entries() const { return entries_; }
    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t generation() const { return generation_; }

    /// Smallest |input| over every recorded relu; finite-difference checks
    /// are only meaningful when this exceeds the step size.
    double min_relu_margin() const;

    /// Append an entry. `output` must be a constant tensor holding the
    /// forward value; the returned tensor is attached to this tape.
    Tensor record(OpKind kind, std::span<const Tensor* const> inputs, const Tensor& output, OpAttrs attrs,
                  std::vector<Tensor> saved);

    /// Checks `t` is attached to this tape and its record is still live.
    void check_attached(const Tensor& t, std::string_view what) const;

private:
    struct Node {
        Shape shape;
        std::string name;
    };

    Tensor attach(const Tensor& value, NodeId id) const;

    std::vector<Node> nodes_;
    std::vector<TapeEntry> entries_;
    std::map<std::string, NodeId> leaf_names_;
    std::uint64_t generation_ = 0;
};

namespace detail {
/// Gradients of an entry's inputs given the gradient of its output. Entries
/// for constant inputs are left empty.
std::vector<std::optional<Tensor>> entry_backward(const TapeEntry& entry, const Tensor& grad_out);
}  // namespace detail

}  // namespace eman
