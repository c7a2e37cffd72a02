#include "eman/autograd.hpp"

#include <cmath>

#include <fmt/format.h>

#include "eman/simd/kernels.hpp"

namespace eman {

std::string_view to_string(OpKind kind) {
    switch (kind) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::relu: return "relu";
        case OpKind::mean: return "mean";
        case OpKind::variance: return "variance";
        case OpKind::rsqrt: return "rsqrt";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::reshape: return "reshape";
        case OpKind::sum: return "sum";
        case OpKind::scale: return "scale";
        case OpKind::gather_rows: return "gather_rows";
        case OpKind::log_softmax: return "log_softmax";
        case OpKind::softmax: return "softmax";
        case OpKind::l2_normalize: return "l2_normalize";
    }
    return "unknown";
}

const Tensor& GradientMap::of(const Tensor& t) const {
    if (t.tape() != tape_ || t.generation() != generation_ || t.node() >= by_node_.size() || !by_node_[t.node()]) {
        throw AutogradError("gradient map: tensor was not part of this backward pass");
    }
    return *by_node_[t.node()];
}

const Tensor* GradientMap::find(const std::string& name) const {
    auto it = named_.find(name);
    return it == named_.end() ? nullptr : &it->second;
}

const Tensor& GradientMap::at(const std::string& name) const {
    if (const Tensor* g = find(name)) return *g;
    throw AutogradError(fmt::format("gradient map: no leaf named '{}'", name));
}

Tensor Tape::attach(const Tensor& value, NodeId id) const {
    Tensor out = value.detach();
    out.tape_ = const_cast<Tape*>(this);
    out.node_ = id;
    out.generation_ = generation_;
    return out;
}

void Tape::check_attached(const Tensor& t, std::string_view what) const {
    if (t.tape() != this) throw AutogradError(fmt::format("{}: tensor belongs to a different record", what));
    if (t.generation() != generation_ || t.node() >= nodes_.size()) {
        throw AutogradError(fmt::format("{}: tensor belongs to a consumed record", what));
    }
}

Tensor Tape::leaf(const Tensor& value, std::string name) {
    if (!name.empty()) {
        if (!leaf_names_.emplace(name, nodes_.size()).second) {
            throw AutogradError(fmt::format("tape: duplicate leaf name '{}'", name));
        }
    }
    nodes_.push_back(Node{value.shape(), std::move(name)});
    return attach(value, nodes_.size() - 1);
}

Tensor Tape::record(OpKind kind, std::span<const Tensor* const> inputs, const Tensor& output, OpAttrs attrs,
                    std::vector<Tensor> saved) {
    TapeEntry entry{kind, {}, 0, std::move(attrs), std::move(saved)};
    entry.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) {
        if (in->requires_grad()) {
            check_attached(*in, to_string(kind));
            entry.inputs.push_back(in->node());
        } else {
            entry.inputs.push_back(kConstant);
        }
    }
    nodes_.push_back(Node{output.shape(), {}});
    entry.output = nodes_.size() - 1;
    entries_.push_back(std::move(entry));
    return attach(output, entries_.back().output);
}

double Tape::min_relu_margin() const {
    double margin = std::numeric_limits<double>::infinity();
    for (const TapeEntry& e : entries_) {
        if (e.kind != OpKind::relu) continue;
        for (double v : e.saved.front().data()) margin = std::min(margin, std::abs(v));
    }
    return margin;
}

GradientMap Tape::backward(const Tensor& loss) {
    if (loss.tape() != this || loss.generation() != generation_ || loss.node() >= nodes_.size()) {
        throw AutogradError("backward: loss is not attached to this differentiation record");
    }
    if (loss.size() != 1) {
        throw AutogradError(fmt::format("backward: loss must be scalar, got shape {}", to_string(loss.shape())));
    }

    const auto& k = simd::kernels();
    std::vector<std::optional<std::vector<double>>> grads(nodes_.size());
    grads[loss.node()] = std::vector<double>{1.0};

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        const TapeEntry& entry = *it;
        auto& gout = grads[entry.output];
        if (!gout) continue;
        const Tensor grad_out(nodes_[entry.output].shape, std::move(*gout));
        gout.reset();
        std::vector<std::optional<Tensor>> input_grads = detail::entry_backward(entry, grad_out);
        for (std::size_t i = 0; i < entry.inputs.size(); ++i) {
            const NodeId id = entry.inputs[i];
            if (id == kConstant || !input_grads[i]) continue;
            const Tensor& g = *input_grads[i];
            if (g.shape() != nodes_[id].shape) {
                throw AutogradError(fmt::format("backward: {} produced gradient of shape {} for input of shape {}",
                                                to_string(entry.kind), to_string(g.shape()),
                                                to_string(nodes_[id].shape)));
            }
            auto& acc = grads[id];
            if (!acc) {
                acc = g.to_vector();
            } else {
                k.add(acc->data(), g.raw(), acc->data(), acc->size());
            }
        }
        grads[entry.output] = grad_out.to_vector();
    }

    GradientMap result;
    result.tape_ = this;
    result.generation_ = generation_;
    result.by_node_.resize(nodes_.size());
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (grads[id]) {
            result.by_node_[id] = Tensor(nodes_[id].shape, std::move(*grads[id]));
        } else {
            // Unreached nodes have zero gradient.
            result.by_node_[id] = Tensor::zeros(nodes_[id].shape);
        }
    }
    for (const auto& [name, id] : leaf_names_) result.named_.emplace(name, *result.by_node_[id]);

    nodes_.clear();
    entries_.clear();
    leaf_names_.clear();
    ++generation_;
    return result;
}

}  // namespace eman
