#include "eman/norm.hpp"

#include <stdexcept>

#include <fmt/format.h>

#include "eman/autograd.hpp"
#include "eman/ops.hpp"
#include "eman/simd/kernels.hpp"

namespace eman::norm {
namespace {

struct ChannelView {
    std::size_t n;
    std::size_t c;
    std::size_t spatial;
};

ChannelView channel_view(const Tensor& x, std::string_view op) {
    if (x.rank() < 2) {
        throw ShapeError(fmt::format("{}: expected [n, c, ...], got {}", op, eman::to_string(x.shape())));
    }
    ChannelView v{x.shape()[0], x.shape()[1], 1};
    for (std::size_t d = 2; d < x.rank(); ++d) v.spatial *= x.shape()[d];
    if (v.n == 0) throw ShapeError(fmt::format("{}: empty batch", op));
    return v;
}

void check_affine(const AffineParams& affine, std::size_t channels, std::string_view op) {
    if (affine.gamma.size() != channels || affine.beta.size() != channels) {
        throw ShapeError(fmt::format("{}: affine params of length {}/{} for {} channels", op, affine.gamma.size(),
                                     affine.beta.size(), channels));
    }
}

/// Per-channel tensor [c] viewed as [1, c, 1] for broadcasting.
Tensor per_channel(const Tensor& t, std::size_t c) { return reshape(t, {1, c, 1}); }

Tensor apply_affine(const Tensor& normalized3, const AffineParams& affine, std::size_t c) {
    return add(mul(normalized3, per_channel(affine.gamma, c)), per_channel(affine.beta, c));
}

/// ((x - mu) * rsqrt(var + eps)) * gamma + beta with constant statistics.
Tensor normalize_with(const Tensor& x, const AffineParams& affine, const NormStats& stats, double eps,
                      std::string_view op) {
    const ChannelView v = channel_view(x, op);
    check_affine(affine, v.c, op);
    if (stats.channels() != v.c || stats.sigma2.size() != v.c) {
        throw ShapeError(fmt::format("{}: statistics for {} channels, input has {}", op, stats.channels(), v.c));
    }
    const Tensor x3 = reshape(x, {v.n, v.c, v.spatial});
    const Tensor mu({1, v.c, 1}, stats.mu);
    const Tensor inv = rsqrt(Tensor({1, v.c, 1}, stats.sigma2), eps);
    return reshape(apply_affine(mul(sub(x3, mu), inv), affine, v.c), x.shape());
}

NormStats stats_from(const Tensor& mu, const Tensor& var) {
    NormStats s{mu.to_vector(), var.to_vector(), StatsFlavor::batch};
    s.validate();
    return s;
}

}  // namespace

std::string_view to_string(NormKind kind) {
    switch (kind) {
        case NormKind::none: return "none";
        case NormKind::bn: return "BN";
        case NormKind::eman: return "EMAN";
        case NormKind::ln: return "LN";
        case NormKind::in: return "IN";
        case NormKind::gn: return "GN";
        case NormKind::sync_bn: return "SyncBN";
        case NormKind::shuffle_bn: return "ShuffleBN";
    }
    return "unknown";
}

NormKind parse_norm_kind(std::string_view name) {
    for (NormKind k : {NormKind::none, NormKind::bn, NormKind::eman, NormKind::ln, NormKind::in, NormKind::gn,
                       NormKind::sync_bn, NormKind::shuffle_bn}) {
        if (name == to_string(k)) return k;
    }
    throw std::invalid_argument(fmt::format(
        "unknown normalization '{}' (expected none|BN|EMAN|LN|IN|GN|SyncBN|ShuffleBN)", name));
}

std::string_view to_string(StatsFlavor flavor) {
    switch (flavor) {
        case StatsFlavor::batch: return "batch";
        case StatsFlavor::proxy: return "proxy";
        case StatsFlavor::teacher: return "teacher";
    }
    return "unknown";
}

NormStats NormStats::initial_proxy(std::size_t channels) {
    return NormStats{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), StatsFlavor::proxy};
}

void NormStats::validate() {
    if (mu.size() != sigma2.size()) {
        throw std::invalid_argument(fmt::format("norm stats: {} means but {} variances", mu.size(), sigma2.size()));
    }
    for (double& v : sigma2) {
        if (v < -1e-12) throw std::invalid_argument(fmt::format("norm stats: negative variance {}", v));
        if (v < 0.0) v = 0.0;
    }
}

AffineParams AffineParams::identity(std::size_t channels) {
    return AffineParams{Tensor::full({channels}, 1.0), Tensor::zeros({channels})};
}

void NormConfig::validate(std::size_t channels) const {
    if (!(eps > 0.0)) throw std::invalid_argument(fmt::format("norm config: eps must be > 0, got {}", eps));
    if (!(alpha >= 0.0 && alpha < 1.0)) {
        throw std::invalid_argument(fmt::format("norm config: alpha must lie in [0, 1), got {}", alpha));
    }
    if (kind == NormKind::gn && (groups == 0 || channels % groups != 0)) {
        throw std::invalid_argument(fmt::format("norm config: {} groups do not divide {} channels", groups, channels));
    }
    if ((kind == NormKind::sync_bn || kind == NormKind::shuffle_bn) && shard_count == 0) {
        throw std::invalid_argument("norm config: shard_count must be >= 1");
    }
}

NormStats batch_stats(const Tensor& x) {
    const ChannelView v = channel_view(x, "batch_stats");
    const Tensor x3 = x.detach().reshaped({v.n, v.c, v.spatial});
    return stats_from(mean(x3, {0, 2}), variance(x3, {0, 2}));
}

NormOutput bn_train_forward(const Tensor& x, const AffineParams& affine, double eps) {
    const ChannelView v = channel_view(x, "bn_train_forward");
    check_affine(affine, v.c, "bn_train_forward");
    const Tensor x3 = reshape(x, {v.n, v.c, v.spatial});
    const Tensor mu = mean(x3, {0, 2});
    const Tensor var = variance(x3, {0, 2});
    const Tensor y = apply_affine(mul(sub(x3, mu), rsqrt(var, eps)), affine, v.c);
    return NormOutput{reshape(y, x.shape()), stats_from(mu, var)};
}

NormStats proxy_update(const NormStats& proxy, const NormStats& batch, double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0)) {
        throw std::invalid_argument(fmt::format("proxy_update: alpha must lie in [0, 1), got {}", alpha));
    }
    if (proxy.channels() != batch.channels()) {
        throw ShapeError(fmt::format("proxy_update: {} proxy channels vs {} batch channels", proxy.channels(),
                                     batch.channels()));
    }
    const auto& k = simd::kernels();
    NormStats out = proxy;
    k.axpby(alpha, proxy.mu.data(), 1.0 - alpha, batch.mu.data(), out.mu.data(), out.mu.size());
    k.axpby(alpha, proxy.sigma2.data(), 1.0 - alpha, batch.sigma2.data(), out.sigma2.data(), out.sigma2.size());
    out.validate();
    return out;
}

Tensor bn_eval_forward(const Tensor& x, const AffineParams& affine, const NormStats& proxy, double eps) {
    if (proxy.flavor == StatsFlavor::batch) {
        throw std::invalid_argument("bn_eval_forward: requires proxy statistics, got batch statistics");
    }
    return normalize_with(x, affine, proxy, eps, "bn_eval_forward");
}

Tensor eman_forward(const Tensor& x, const AffineParams& affine, const NormStats& teacher_stats, double eps) {
    if (teacher_stats.flavor != StatsFlavor::teacher) {
        throw std::invalid_argument(fmt::format("eman_forward: requires teacher statistics, got {}",
                                                to_string(teacher_stats.flavor)));
    }
    return normalize_with(x, affine, teacher_stats, eps, "eman_forward");
}

Tensor grouped_stats_forward(const Tensor& x, NormKind kind, std::size_t groups, const AffineParams& affine,
                             double eps) {
    const ChannelView v = channel_view(x, "grouped_stats_forward");
    check_affine(affine, v.c, "grouped_stats_forward");
    const Tensor x3 = reshape(x, {v.n, v.c, v.spatial});
    Tensor normalized;
    switch (kind) {
        case NormKind::ln: {
            const Tensor mu = mean(x3, {1, 2});
            normalized = mul(sub(x3, mu), rsqrt(variance(x3, {1, 2}), eps));
            break;
        }
        case NormKind::in: {
            const Tensor mu = mean(x3, {2});
            normalized = mul(sub(x3, mu), rsqrt(variance(x3, {2}), eps));
            break;
        }
        case NormKind::gn: {
            if (groups == 0 || v.c % groups != 0) {
                throw std::invalid_argument(fmt::format("group norm: {} groups do not divide {} channels", groups, v.c));
            }
            const Tensor xg = reshape(x3, {v.n, groups, (v.c / groups) * v.spatial});
            const Tensor mu = mean(xg, {2});
            normalized = reshape(mul(sub(xg, mu), rsqrt(variance(xg, {2}), eps)), {v.n, v.c, v.spatial});
            break;
        }
        default:
            throw std::invalid_argument(
                fmt::format("grouped_stats_forward: {} is not a per-sample normalization", to_string(kind)));
    }
    return reshape(apply_affine(normalized, affine, v.c), x.shape());
}

NormOutput sharded_forward(const Tensor& x, ShardMode mode, std::size_t shard_count, Rng& rng,
                           const AffineParams& affine, double eps) {
    const ChannelView v = channel_view(x, "sharded_forward");
    check_affine(affine, v.c, "sharded_forward");
    if (shard_count == 0 || v.n % shard_count != 0) {
        throw std::invalid_argument(
            fmt::format("sharded_forward: batch of {} does not split into {} shards", v.n, shard_count));
    }
    const std::size_t per = v.n / shard_count;

    if (mode == ShardMode::shuffle) {
        if (shard_count == 1) return bn_train_forward(x, affine, eps);
        const std::vector<std::size_t> perm = rng.permutation(v.n);
        std::vector<std::size_t> inverse(v.n);
        for (std::size_t i = 0; i < v.n; ++i) inverse[perm[i]] = i;
        const Tensor shuffled = gather_rows(x, perm);
        std::vector<Tensor> outputs;
        NormStats avg{std::vector<double>(v.c, 0.0), std::vector<double>(v.c, 0.0), StatsFlavor::batch};
        for (std::size_t s = 0; s < shard_count; ++s) {
            NormOutput shard = bn_train_forward(slice(shuffled, 0, s * per, (s + 1) * per), affine, eps);
            for (std::size_t ch = 0; ch < v.c; ++ch) {
                avg.mu[ch] += shard.stats.mu[ch] / static_cast<double>(shard_count);
                avg.sigma2[ch] += shard.stats.sigma2[ch] / static_cast<double>(shard_count);
            }
            outputs.push_back(std::move(shard.y));
        }
        avg.validate();
        return NormOutput{gather_rows(concat(outputs, 0), inverse), std::move(avg)};
    }

    // Sync: each shard contributes partial sums; the "all-reduce" adds them.
    const double total = static_cast<double>(v.n * v.spatial);
    std::vector<Tensor> shards;
    for (std::size_t s = 0; s < shard_count; ++s) {
        shards.push_back(reshape(slice(x, 0, s * per, (s + 1) * per), {per, v.c, v.spatial}));
    }
    Tensor sum_x = sum(shards[0], {0, 2});
    for (std::size_t s = 1; s < shard_count; ++s) sum_x = add(sum_x, sum(shards[s], {0, 2}));
    const Tensor mu = scale(sum_x, 1.0 / total);
    Tensor sum_sq;
    for (std::size_t s = 0; s < shard_count; ++s) {
        const Tensor centered = sub(shards[s], mu);
        const Tensor part = sum(mul(centered, centered), {0, 2});
        sum_sq = s == 0 ? part : add(sum_sq, part);
    }
    const Tensor var = scale(sum_sq, 1.0 / total);
    const Tensor inv = rsqrt(var, eps);
    std::vector<Tensor> outputs;
    for (const Tensor& shard : shards) outputs.push_back(apply_affine(mul(sub(shard, mu), inv), affine, v.c));
    return NormOutput{reshape(concat(outputs, 0), x.shape()), stats_from(mu, var)};
}

NormGradients norm_backward(const NormForward& forward, const Tensor& x, const AffineParams& affine,
                            const Tensor& upstream) {
    Tape tape;
    const Tensor xv = tape.leaf(x.detach(), "x");
    const AffineParams params{tape.leaf(affine.gamma.detach(), "gamma"), tape.leaf(affine.beta.detach(), "beta")};
    const Tensor y = forward(xv, params);
    if (y.shape() != upstream.shape()) {
        throw ShapeError(fmt::format("norm_backward: upstream {} vs output {}", eman::to_string(upstream.shape()),
                                     eman::to_string(y.shape())));
    }
    const GradientMap grads = tape.backward(reshape(sum(mul(y, upstream)), {1}));
    return NormGradients{grads.at("x"), grads.at("gamma"), grads.at("beta")};
}

}  // namespace eman::norm
