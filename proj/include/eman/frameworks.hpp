#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "eman/autograd.hpp"
#include "eman/data.hpp"
#include "eman/model.hpp"
#include "eman/moco_queue.hpp"
#include "eman/teacher.hpp"

namespace eman {

enum class Framework { supervised, mean_teacher, fixmatch, moco, byol };

std::string_view to_string(Framework f);
Framework parse_framework(std::string_view name);
bool uses_ema_teacher(Framework f);

/// Student, its EMA teacher, and (BYOL) the student-only predictor.
struct Networks {
    ModelState student;
    ModelState teacher;
    std::optional<ModelState> predictor;
    TeacherConfig teacher_config;

    static Networks create(const Architecture& arch, const TeacherConfig& teacher_config, Rng& rng,
                           std::optional<Architecture> predictor = std::nullopt);
};

struct StepHooks {
    /// Gradient map of the step, before the optimizer consumes it.
    std::function<void(const GradientMap&)> on_gradients;
    /// After the optimizer and proxy updates, before the teacher update.
    std::function<void()> before_teacher_update;
    std::function<void()> after_teacher_update;
};

struct StepContext {
    double lr = 0.1;
    std::size_t step = 0;
    std::size_t total_steps = 1;
    /// Seeds ShuffleBN permutations for this step.
    std::uint64_t seed = 0;
    const StepHooks* hooks = nullptr;
};

struct StepStats {
    double loss = 0.0;
    double sup_loss = 0.0;
    double unsup_loss = 0.0;
    /// Accept fraction (FixMatch) or instance-discrimination top-1 (MoCo); NaN otherwise.
    double metric = 0.0;
    double momentum = 0.0;
};

/// Differentiable loss plus everything the update needs afterwards.
struct LossTerms {
    Tensor total;
    double sup = 0.0;
    double unsup = 0.0;
    double metric = 0.0;
    /// Batch statistics of each student forward, concatenated in call order.
    std::vector<norm::NormStats> student_stats;
    std::vector<norm::NormStats> predictor_stats;
    /// Teacher-side batch statistics (teacher_pn / batch_bn variants).
    std::vector<norm::NormStats> teacher_stats;
    /// MoCo keys to enqueue after the step.
    Tensor keys;
};

// Supervised baseline.

LossTerms supervised_loss(const ModelState& student, std::span<const Tensor> params, const Batch& batch,
                          std::uint64_t seed = 0);
StepStats supervised_step(ModelState& student, Sgd& sgd, const Batch& batch, const StepContext& ctx);

// Mean teacher: CE on labeled rows + weight * mean squared softmax distance
// between student(view a) and teacher(view b) on unlabeled rows.

LossTerms mean_teacher_loss(const Networks& net, std::span<const Tensor> params, const Batch& labeled,
                            const ViewPair& unlabeled, double consistency_weight, std::uint64_t seed = 0);
StepStats mean_teacher_step(Networks& net, Sgd& sgd, const Batch& labeled, const ViewPair& unlabeled,
                            double consistency_weight, const StepContext& ctx);

// FixMatch.

enum class FixMatchMode {
    eman_teacher,  ///< teacher labels weak views, student sees labeled + strong
    concat,        ///< one student forward over labeled + weak + strong, self-labeling
};

std::string_view to_string(FixMatchMode m);
FixMatchMode parse_fixmatch_mode(std::string_view name);

struct FixMatchConfig {
    double tau = 0.95;
    double lambda_sup = 1.0;
    double lambda_unsup = 10.0;
    std::size_t labeled_batch = 16;
    std::size_t unlabeled_batch = 80;
    FixMatchMode mode = FixMatchMode::eman_teacher;

    void validate() const;
};

struct PseudoLabels {
    std::vector<int> labels;
    std::vector<double> weights;  // 1 accepted, 0 rejected
    std::size_t accepted = 0;
    double accept_fraction = 0.0;
};

/// Argmax labels of probability rows; accepted where max prob >= tau.
PseudoLabels pseudo_label(const Tensor& probs, double tau);

/// `unlabeled.a` is the weak view, `unlabeled.b` the strong view.
LossTerms fixmatch_loss(const Networks& net, std::span<const Tensor> params, const Batch& labeled,
                        const ViewPair& unlabeled, const FixMatchConfig& config, std::uint64_t seed = 0);
StepStats fixmatch_step(Networks& net, Sgd& sgd, const Batch& labeled, const ViewPair& unlabeled,
                        const FixMatchConfig& config, const StepContext& ctx);

// MoCo: query from student(view a), key from teacher(view b).

struct InfoNce {
    Tensor loss;
    double top1 = 0.0;
};

/// CE at index 0 over [q.k, q.queue] / temperature; q, k are unit rows.
InfoNce info_nce(const Tensor& q, const Tensor& k, const Tensor& queue, double temperature);

LossTerms moco_loss(const Networks& net, std::span<const Tensor> params, const ViewPair& views,
                    const MoCoState& state, std::uint64_t seed = 0);
StepStats moco_step(Networks& net, Sgd& sgd, const ViewPair& views, MoCoState& state, const StepContext& ctx);

/// Fill the queue with teacher keys of random rows of `data`.
void warm_fill(MoCoState& state, const Networks& net, const Tensor& data, Rng& rng);

// BYOL: symmetric normalized L2 between predictor(student) and teacher.

/// Mean over rows of ||p/|p| - z/|z|||^2.
Tensor byol_pair_loss(const Tensor& prediction, const Tensor& target);

LossTerms byol_loss(const Networks& net, std::span<const Tensor> student_params,
                    std::span<const Tensor> predictor_params, const ViewPair& views, std::uint64_t seed = 0);
StepStats byol_step(Networks& net, Sgd& sgd, const ViewPair& views, const StepContext& ctx);

}  // namespace eman
