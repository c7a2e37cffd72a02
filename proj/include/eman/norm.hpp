#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "eman/rng.hpp"
#include "eman/tensor.hpp"

// Normalization layers. Inputs are [n, c] or [n, c, spatial...]; statistics
// are per channel and every spatial position counts as a sample. All layers
// are composed from the differentiable primitives, so gradients follow from
// the tape: train-mode BN differentiates through its batch statistics, the
// eval/EMAN forms treat their statistics as constants.

namespace eman::norm {

inline constexpr double kDefaultEps = 1e-5;
inline constexpr double kDefaultProxyMomentum = 0.9;

enum class NormKind { none, bn, eman, ln, in, gn, sync_bn, shuffle_bn };

std::string_view to_string(NormKind kind);
NormKind parse_norm_kind(std::string_view name);

/// Batch statistics (mu_B, sigma2_B), running proxy statistics (mu, sigma2),
/// or teacher statistics EMA'd from the student's proxies (mu', sigma2').
enum class StatsFlavor { batch, proxy, teacher };

std::string_view to_string(StatsFlavor flavor);

struct NormStats {
    std::vector<double> mu;
    std::vector<double> sigma2;
    StatsFlavor flavor = StatsFlavor::batch;

    std::size_t channels() const { return mu.size(); }

    /// mu = 0, sigma2 = 1.
    static NormStats initial_proxy(std::size_t channels);

    /// Throws when lengths differ or a variance is below -1e-12; clamps
    /// round-off negatives to 0.
    void validate();

    bool operator==(const NormStats&) const = default;
};

struct AffineParams {
    Tensor gamma;  // [c]
    Tensor beta;   // [c]

    std::size_t channels() const { return gamma.size(); }
    static AffineParams identity(std::size_t channels);
};

struct NormConfig {
    NormKind kind = NormKind::bn;
    double eps = kDefaultEps;
    double alpha = kDefaultProxyMomentum;
    std::size_t groups = 1;
    std::size_t shard_count = 1;

    void validate(std::size_t channels) const;
};

struct NormOutput {
    Tensor y;
    NormStats stats;
};

/// Per-channel mean and biased variance over every non-channel axis.
NormStats batch_stats(const Tensor& x);

/// gamma * (x - mu_B) / sqrt(sigma2_B + eps) + beta.
NormOutput bn_train_forward(const Tensor& x, const AffineParams& affine, double eps = kDefaultEps);

/// proxy := alpha * proxy + (1 - alpha) * batch, on both moments.
NormStats proxy_update(const NormStats& proxy, const NormStats& batch, double alpha);

/// Inference-form BN with running proxies. Per-sample: no batch statistics.
Tensor bn_eval_forward(const Tensor& x, const AffineParams& affine, const NormStats& proxy, double eps = kDefaultEps);

/// Teacher-side normalization with EMA statistics. Same linear map as
/// `bn_eval_forward`; never computes or writes statistics.
Tensor eman_forward(const Tensor& x, const AffineParams& affine, const NormStats& teacher_stats,
                    double eps = kDefaultEps);

/// LN, IN or GN: statistics per sample, so rows never interact.
Tensor grouped_stats_forward(const Tensor& x, NormKind kind, std::size_t groups, const AffineParams& affine,
                             double eps = kDefaultEps);

enum class ShardMode { sync, shuffle };

/// Simulated multi-device BN. `sync` all-reduces moments across shards;
/// `shuffle` permutes rows into shards, normalizes each shard with its own
/// moments, and restores the original row order. Returned stats are the
/// global moments (sync) or the shard average (shuffle).
NormOutput sharded_forward(const Tensor& x, ShardMode mode, std::size_t shard_count, Rng& rng,
                           const AffineParams& affine, double eps = kDefaultEps);

using NormForward = std::function<Tensor(const Tensor& x, const AffineParams& affine)>;

struct NormGradients {
    Tensor dx;
    Tensor dgamma;
    Tensor dbeta;
};

/// Gradients of sum(forward(x) * upstream) with respect to x, gamma and beta.
NormGradients norm_backward(const NormForward& forward, const Tensor& x, const AffineParams& affine,
                            const Tensor& upstream);

}  // namespace eman::norm
