#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "eman/model.hpp"

namespace eman {

/// Where the teacher's normalization statistics come from.
enum class StatsVariant {
    eman,        ///< EMA of the student's proxy statistics
    teacher_pn,  ///< teacher's own running proxies of its batch statistics
    student_pn,  ///< copy of the student's proxies every step
    batch_bn,    ///< live batch statistics in the teacher forward
};

std::string_view to_string(StatsVariant v);
StatsVariant parse_stats_variant(std::string_view name);

enum class MomentumSchedule { constant, cosine_to_one };

std::string_view to_string(MomentumSchedule s);
MomentumSchedule parse_momentum_schedule(std::string_view name);

struct TeacherConfig {
    double param_momentum = 0.999;
    double buffer_momentum = 0.999;
    MomentumSchedule schedule = MomentumSchedule::constant;
    StatsVariant variant = StatsVariant::eman;
    /// Proxy momentum for the teacher_pn variant.
    double proxy_alpha = 0.9;
    /// BN-family kind used by the batch_bn variant (defaults to the architecture's).
    std::optional<norm::NormKind> batch_kind;

    void validate() const;
};

/// Deep copy marked as a teacher; buffers take the teacher flavor.
ModelState clone_into_teacher(const ModelState& student);

/// t := m * t + (1 - m) * s on parameters and buffers.
void ema_update(ModelState& teacher, const ModelState& student, double m);
void ema_update(ModelState& teacher, const ModelState& student, double param_m, double buffer_m);
void ema_update_params(ModelState& teacher, const ModelState& student, double m);
void ema_update_buffers(ModelState& teacher, const ModelState& student, double m);

/// `initial` held constant, or raised to 1 along a half cosine over `total_steps`.
double scheduled_momentum(double initial, MomentumSchedule schedule, std::size_t step, std::size_t total_steps);

/// Parameter momentum at `step`.
double momentum_schedule(const TeacherConfig& config, std::size_t step, std::size_t total_steps);

/// teacher_pn: teacher buffers <- proxy_update(teacher buffers, teacher batch stats, alpha).
/// student_pn: teacher buffers <- student buffers.
void proxy_variant_update(ModelState& teacher, const ModelState& student, StatsVariant variant, double alpha,
                          const std::vector<norm::NormStats>* teacher_batch_stats);

struct TeacherOutput {
    Tensor output;
    Tensor features;
    /// Input batch statistics of every BN-family site (teacher_pn, batch_bn).
    std::vector<norm::NormStats> batch_stats;
};

/// Forward on constants; never attaches to a tape and never writes state.
TeacherOutput teacher_forward(const ModelState& teacher, const Tensor& x, const TeacherConfig& config = {},
                              std::uint64_t shuffle_seed = 0);

/// Full post-optimizer teacher update for one step, per `config.variant`.
/// `teacher_batch_stats` concatenates the site statistics of every teacher
/// forward in the step (teacher_pn only).
void teacher_update(ModelState& teacher, const ModelState& student, const TeacherConfig& config, std::size_t step,
                    std::size_t total_steps, const std::vector<norm::NormStats>& teacher_batch_stats);

}  // namespace eman
