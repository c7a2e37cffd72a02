#include "eman/model.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

#include "eman/ops.hpp"
#include "eman/simd/kernels.hpp"

namespace eman {

using norm::NormKind;
using norm::NormStats;
using norm::StatsFlavor;

bool is_batch_norm_family(NormKind kind) {
    return kind == NormKind::bn || kind == NormKind::sync_bn || kind == NormKind::shuffle_bn;
}

void Architecture::validate() const {
    if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("architecture: zero input or output width");
    if (norm == NormKind::eman) {
        throw std::invalid_argument("architecture: EMAN is a teacher-side normalization, not a layer kind");
    }
    if (spatial == 0) throw std::invalid_argument("architecture: spatial must be >= 1");
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        if (hidden[l] == 0 || hidden[l] % spatial != 0) {
            throw std::invalid_argument(
                fmt::format("architecture: hidden width {} is not a multiple of spatial {}", hidden[l], spatial));
        }
        if (norm != NormKind::none) {
            norm::NormConfig cfg{norm, eps, alpha, groups, shard_count};
            cfg.validate(channels(l));
        }
    }
}

bool Architecture::has_running_stats() const { return is_batch_norm_family(norm); }

ModelState ModelState::init(const Architecture& arch, Rng& rng, std::string scope) {
    arch.validate();
    ModelState m;
    m.arch_ = arch;
    m.scope_ = std::move(scope);
    auto linear = [&](std::size_t layer, std::size_t in, std::size_t out, double gain) {
        std::vector<double> w(in * out);
        const double sd = std::sqrt(gain / static_cast<double>(in));
        for (double& v : w) v = rng.normal(0.0, sd);
        m.params_.push_back({fmt::format("fc{}.weight", layer), Tensor({in, out}, std::move(w))});
        m.params_.push_back({fmt::format("fc{}.bias", layer), Tensor::zeros({out})});
    };
    std::size_t width = arch.input_dim;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
        linear(l, width, arch.hidden[l], 2.0);
        if (arch.norm != NormKind::none) {
            const auto affine = norm::AffineParams::identity(arch.channels(l));
            m.params_.push_back({fmt::format("norm{}.gamma", l), affine.gamma});
            m.params_.push_back({fmt::format("norm{}.beta", l), affine.beta});
            if (arch.has_running_stats()) {
                m.buffers_.push_back({fmt::format("norm{}", l), NormStats::initial_proxy(arch.channels(l))});
            }
        }
        width = arch.hidden[l];
    }
    linear(arch.hidden.size(), width, arch.output_dim, 1e-4);
    return m;
}

const Parameter& ModelState::param(const std::string& name) const { return params_[param_index(name)]; }

std::size_t ModelState::param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) return i;
    }
    throw std::out_of_range(fmt::format("model '{}' has no parameter '{}'", scope_, name));
}

void ModelState::set_param(std::size_t index, Tensor value) {
    Parameter& p = params_.at(index);
    if (value.shape() != p.value.shape()) {
        throw ShapeError(fmt::format("set_param {}: shape {} vs {}", p.name, to_string(value.shape()),
                                     to_string(p.value.shape())));
    }
    p.value = value.detach();
}

void ModelState::set_buffer(std::size_t index, NormStats stats) {
    Buffer& b = buffers_.at(index);
    if (stats.channels() != b.stats.channels()) {
        throw ShapeError(fmt::format("set_buffer {}: {} channels vs {}", b.name, stats.channels(), b.stats.channels()));
    }
    stats.validate();
    b.stats = std::move(stats);
}

std::string ModelState::leaf_name(std::size_t index) const {
    return fmt::format("{}.{}", scope_, params_.at(index).name);
}

std::vector<Tensor> ModelState::bind(Tape& tape) const {
    if (teacher_) {
        throw AutogradError(fmt::format("model '{}' is a teacher: it receives no gradients", scope_));
    }
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) out.push_back(tape.leaf(params_[i].value, leaf_name(i)));
    return out;
}

std::vector<Tensor> ModelState::constants() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const Parameter& p : params_) out.push_back(p.value);
    return out;
}

bool ModelState::congruent(const ModelState& other) const {
    if (params_.size() != other.params_.size() || buffers_.size() != other.buffers_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name != other.params_[i].name || params_[i].value.shape() != other.params_[i].value.shape()) {
            return false;
        }
    }
    for (std::size_t i = 0; i < buffers_.size(); ++i) {
        if (buffers_[i].name != other.buffers_[i].name ||
            buffers_[i].stats.channels() != other.buffers_[i].stats.channels()) {
            return false;
        }
    }
    return true;
}

void ModelState::check_congruent(const ModelState& other, std::string_view op) const {
    if (!congruent(other)) {
        throw std::invalid_argument(
            fmt::format("{}: models '{}' and '{}' are not structurally congruent", op, scope_, other.scope_));
    }
}

ModelState ModelState::as_teacher(std::string scope) const {
    ModelState t = *this;
    t.scope_ = std::move(scope);
    t.teacher_ = true;
    for (Buffer& b : t.buffers_) b.stats.flavor = StatsFlavor::teacher;
    return t;
}

std::vector<double> ModelState::flatten() const {
    std::vector<double> out;
    for (const Parameter& p : params_) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
    for (const Buffer& b : buffers_) {
        out.insert(out.end(), b.stats.mu.begin(), b.stats.mu.end());
        out.insert(out.end(), b.stats.sigma2.begin(), b.stats.sigma2.end());
    }
    return out;
}

ForwardResult forward(const ModelState& model, std::span<const Tensor> params, const Tensor& x,
                      const ForwardOptions& options) {
    const Architecture& arch = model.arch();
    if (params.size() != model.params().size()) {
        throw std::invalid_argument(
            fmt::format("forward: {} parameter tensors for {} parameters", params.size(), model.params().size()));
    }
    if (x.rank() != 2 || x.extent(1) != arch.input_dim) {
        throw ShapeError(fmt::format("forward: expected [n, {}], got {}", arch.input_dim, to_string(x.shape())));
    }
    const std::size_t n = x.extent(0);
    ForwardResult result;
    std::size_t p = 0;
    std::size_t site = 0;
    Tensor h = x;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
        const std::size_t width = arch.hidden[l];
        h = add(matmul(h, params[p]), params[p + 1]);
        p += 2;
        if (arch.norm != NormKind::none) {
            const norm::AffineParams affine{params[p], params[p + 1]};
            p += 2;
            const Tensor h3 = reshape(h, {n, arch.channels(l), arch.spatial});
            Tensor y;
            if (is_batch_norm_family(arch.norm)) {
                if (options.stats == StatsSource::batch) {
                    const NormKind kind = options.batch_kind.value_or(arch.norm);
                    norm::NormOutput out;
                    if (kind == NormKind::bn) {
                        out = norm::bn_train_forward(h3, affine, arch.eps);
                    } else if (kind == NormKind::sync_bn || kind == NormKind::shuffle_bn) {
                        Rng rng = Rng(options.shuffle_seed).split(site);
                        out = norm::sharded_forward(
                            h3, kind == NormKind::sync_bn ? norm::ShardMode::sync : norm::ShardMode::shuffle,
                            arch.shard_count, rng, affine, arch.eps);
                    } else {
                        throw std::invalid_argument(
                            fmt::format("forward: {} cannot replace batch normalization", norm::to_string(kind)));
                    }
                    y = out.y;
                    result.batch_stats.push_back(std::move(out.stats));
                } else {
                    const NormStats& stats = model.buffers()[site].stats;
                    y = stats.flavor == StatsFlavor::teacher ? norm::eman_forward(h3, affine, stats, arch.eps)
                                                             : norm::bn_eval_forward(h3, affine, stats, arch.eps);
                    if (options.collect_batch_stats) result.batch_stats.push_back(norm::batch_stats(h3));
                }
                ++site;
            } else {
                y = norm::grouped_stats_forward(h3, arch.norm, arch.groups, affine, arch.eps);
            }
            h = reshape(y, {n, width});
        }
        h = relu(h);
    }
    result.features = h;
    result.output = add(matmul(h, params[p]), params[p + 1]);
    return result;
}

ForwardResult eval_forward(const ModelState& model, const Tensor& x) {
    ForwardOptions opts;
    opts.stats = StatsSource::running;
    return forward(model, model.constants(), x.detach(), opts);
}

void update_proxies(ModelState& model, std::span<const NormStats> batch_stats) {
    if (batch_stats.size() != model.buffers().size()) {
        throw std::invalid_argument(fmt::format("update_proxies: {} batch statistics for {} buffers",
                                                batch_stats.size(), model.buffers().size()));
    }
    for (std::size_t i = 0; i < batch_stats.size(); ++i) {
        model.set_buffer(i, norm::proxy_update(model.buffers()[i].stats, batch_stats[i], model.arch().alpha));
    }
}

void Sgd::step(ModelState& model, const GradientMap& grads, double lr) {
    if (model.is_teacher()) throw AutogradError("Sgd::step: teachers are not optimized");
    const auto& k = simd::kernels();
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        const std::string name = model.leaf_name(i);
        const Tensor& value = model.params()[i].value;
        const std::size_t n = value.size();
        std::vector<double> g(n, 0.0);
        if (const Tensor* grad = grads.find(name)) {
            if (grad->shape() != value.shape()) throw ShapeError(fmt::format("Sgd::step: gradient shape for {}", name));
            std::copy(grad->data().begin(), grad->data().end(), g.begin());
        }
        // g += wd * w; v = mu * v + g; w -= lr * v
        k.axpby(config_.weight_decay, value.raw(), 1.0, g.data(), g.data(), n);
        auto [it, fresh] = velocity_.try_emplace(name, std::vector<double>(n, 0.0));
        std::vector<double>& v = it->second;
        if (v.size() != n) throw ShapeError(fmt::format("Sgd::step: velocity for {} has a different size", name));
        k.axpby(config_.momentum, v.data(), 1.0, g.data(), v.data(), n);
        std::vector<double> w(n);
        k.axpby(1.0, value.raw(), -lr, v.data(), w.data(), n);
        model.set_param(i, Tensor(value.shape(), std::move(w)));
    }
}

}  // namespace eman
