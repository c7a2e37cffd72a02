#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eman/autograd.hpp"
#include "eman/norm.hpp"
#include "eman/rng.hpp"
#include "eman/tensor.hpp"

namespace eman {

/// MLP: input -> [linear -> norm -> relu] x hidden -> linear -> output.
///
/// Each hidden activation of width h is viewed as [n, h / spatial, spatial]
/// for normalization, so per-sample kinds (IN, GN) have something to average
/// over inside a channel.
struct Architecture {
    std::size_t input_dim = 2;
    std::vector<std::size_t> hidden{32};
    std::size_t output_dim = 2;
    norm::NormKind norm = norm::NormKind::bn;
    std::size_t spatial = 4;
    std::size_t groups = 2;
    std::size_t shard_count = 2;
    double eps = norm::kDefaultEps;
    double alpha = norm::kDefaultProxyMomentum;

    void validate() const;
    std::size_t channels(std::size_t layer) const { return hidden.at(layer) / spatial; }
    /// BN-family kinds keep running statistics.
    bool has_running_stats() const;
    bool operator==(const Architecture&) const = default;
};

bool is_batch_norm_family(norm::NormKind kind);

struct Parameter {
    std::string name;
    Tensor value;
};

struct Buffer {
    std::string name;
    norm::NormStats stats;
};

/// Parameters plus normalization buffers of one network.
///
/// `scope` prefixes tape leaf names ("student.fc0.weight"), which keeps the
/// student, predictor and teacher distinguishable in a gradient map.
class ModelState {
public:
    static ModelState init(const Architecture& arch, Rng& rng, std::string scope = "student");

    const Architecture& arch() const { return arch_; }
    const std::string& scope() const { return scope_; }
    bool is_teacher() const { return teacher_; }

    std::span<const Parameter> params() const { return params_; }
    std::span<const Buffer> buffers() const { return buffers_; }

    const Parameter& param(const std::string& name) const;
    std::size_t param_index(const std::string& name) const;
    void set_param(std::size_t index, Tensor value);
    void set_buffer(std::size_t index, norm::NormStats stats);

    /// Leaf names on a tape, in parameter order.
    std::string leaf_name(std::size_t index) const;

    /// Attach every parameter to `tape` as a named leaf. Teachers refuse.
    std::vector<Tensor> bind(Tape& tape) const;
    /// Parameter values as constants.
    std::vector<Tensor> constants() const;

    bool congruent(const ModelState& other) const;
    void check_congruent(const ModelState& other, std::string_view op) const;

    /// Copy with teacher marking and teacher-flavored buffers.
    ModelState as_teacher(std::string scope = "teacher") const;

    /// Flattened parameter values followed by buffer moments.
    std::vector<double> flatten() const;

private:
    Architecture arch_;
    std::string scope_;
    bool teacher_ = false;
    std::vector<Parameter> params_;
    std::vector<Buffer> buffers_;
};

enum class StatsSource {
    batch,    ///< BN-family sites normalize with live batch statistics
    running,  ///< BN-family sites use stored buffers (proxy or teacher flavor)
};

struct ForwardOptions {
    StatsSource stats = StatsSource::batch;
    /// Replaces the architecture's BN-family kind at batch-statistics sites.
    std::optional<norm::NormKind> batch_kind;
    /// Seeds ShuffleBN permutations (one stream per site).
    std::uint64_t shuffle_seed = 0;
    /// In running mode, also report each site's input batch statistics.
    bool collect_batch_stats = false;
};

struct ForwardResult {
    Tensor output;
    /// Post-activation output of the last hidden layer.
    Tensor features;
    /// One entry per BN-family site when batch statistics were computed.
    std::vector<norm::NormStats> batch_stats;
};

ForwardResult forward(const ModelState& model, std::span<const Tensor> params, const Tensor& x,
                      const ForwardOptions& options = {});

/// Running-statistics forward on constants.
ForwardResult eval_forward(const ModelState& model, const Tensor& x);

/// proxy := alpha * proxy + (1 - alpha) * batch at every BN-family site.
void update_proxies(ModelState& model, std::span<const norm::NormStats> batch_stats);

struct SgdConfig {
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

/// Heavy-ball SGD with L2 weight decay. Velocity is tracked per leaf name.
class Sgd {
public:
    explicit Sgd(SgdConfig config = {}) : config_(config) {}

    /// Parameters absent from `grads` receive only weight decay.
    void step(ModelState& model, const GradientMap& grads, double lr);

    const SgdConfig& config() const { return config_; }

private:
    SgdConfig config_;
    std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace eman
