#include "eman/teacher.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/format.h>

#include "eman/simd/kernels.hpp"

namespace eman {

std::string_view to_string(StatsVariant v) {
    switch (v) {
        case StatsVariant::eman: return "eman";
        case StatsVariant::teacher_pn: return "teacher_pn";
        case StatsVariant::student_pn: return "student_pn";
        case StatsVariant::batch_bn: return "batch_bn";
    }
    return "unknown";
}

StatsVariant parse_stats_variant(std::string_view name) {
    for (StatsVariant v :
         {StatsVariant::eman, StatsVariant::teacher_pn, StatsVariant::student_pn, StatsVariant::batch_bn}) {
        if (name == to_string(v)) return v;
    }
    throw std::invalid_argument(
        fmt::format("unknown stats variant '{}' (expected eman|teacher_pn|student_pn|batch_bn)", name));
}

std::string_view to_string(MomentumSchedule s) {
    return s == MomentumSchedule::constant ? "constant" : "cosine_to_one";
}

MomentumSchedule parse_momentum_schedule(std::string_view name) {
    if (name == "constant") return MomentumSchedule::constant;
    if (name == "cosine_to_one") return MomentumSchedule::cosine_to_one;
    throw std::invalid_argument(fmt::format("unknown momentum schedule '{}' (expected constant|cosine_to_one)", name));
}

void TeacherConfig::validate() const {
    auto in_unit = [](double m, std::string_view what) {
        if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument(fmt::format("teacher: {} {} outside [0, 1]", what, m));
    };
    in_unit(param_momentum, "param_momentum");
    in_unit(buffer_momentum, "buffer_momentum");
    if (!(proxy_alpha >= 0.0 && proxy_alpha < 1.0)) {
        throw std::invalid_argument(fmt::format("teacher: proxy_alpha {} outside [0, 1)", proxy_alpha));
    }
    if (batch_kind && !is_batch_norm_family(*batch_kind)) {
        throw std::invalid_argument(
            fmt::format("teacher: batch kind must be BN, SyncBN or ShuffleBN, got {}", norm::to_string(*batch_kind)));
    }
}

ModelState clone_into_teacher(const ModelState& student) { return student.as_teacher(); }

namespace {

void blend(std::vector<double>& t, const std::vector<double>& s, double m) {
    simd::kernels().axpby(m, t.data(), 1.0 - m, s.data(), t.data(), t.size());
}

void require_teacher(const ModelState& teacher, std::string_view op) {
    if (!teacher.is_teacher()) throw std::invalid_argument(fmt::format("{}: target is not a teacher", op));
}

}  // namespace

void ema_update_params(ModelState& teacher, const ModelState& student, double m) {
    require_teacher(teacher, "ema_update");
    teacher.check_congruent(student, "ema_update");
    if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument(fmt::format("ema_update: momentum {} outside [0, 1]", m));
    for (std::size_t i = 0; i < teacher.params().size(); ++i) {
        const Tensor& t = teacher.params()[i].value;
        std::vector<double> v = t.to_vector();
        blend(v, student.params()[i].value.to_vector(), m);
        teacher.set_param(i, Tensor(t.shape(), std::move(v)));
    }
}

void ema_update_buffers(ModelState& teacher, const ModelState& student, double m) {
    require_teacher(teacher, "ema_update");
    teacher.check_congruent(student, "ema_update");
    if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument(fmt::format("ema_update: momentum {} outside [0, 1]", m));
    for (std::size_t i = 0; i < teacher.buffers().size(); ++i) {
        norm::NormStats stats = teacher.buffers()[i].stats;
        const norm::NormStats& s = student.buffers()[i].stats;
        blend(stats.mu, s.mu, m);
        blend(stats.sigma2, s.sigma2, m);
        teacher.set_buffer(i, std::move(stats));
    }
}

void ema_update(ModelState& teacher, const ModelState& student, double param_m, double buffer_m) {
    ema_update_params(teacher, student, param_m);
    ema_update_buffers(teacher, student, buffer_m);
}

void ema_update(ModelState& teacher, const ModelState& student, double m) { ema_update(teacher, student, m, m); }

double scheduled_momentum(double initial, MomentumSchedule schedule, std::size_t step, std::size_t total_steps) {
    if (schedule == MomentumSchedule::constant || total_steps == 0) return initial;
    if (step > total_steps) throw std::invalid_argument("momentum_schedule: step beyond total_steps");
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    return 1.0 - (1.0 - initial) * (std::cos(std::numbers::pi * progress) + 1.0) / 2.0;
}

double momentum_schedule(const TeacherConfig& config, std::size_t step, std::size_t total_steps) {
    return scheduled_momentum(config.param_momentum, config.schedule, step, total_steps);
}

void proxy_variant_update(ModelState& teacher, const ModelState& student, StatsVariant variant, double alpha,
                          const std::vector<norm::NormStats>* teacher_batch_stats) {
    require_teacher(teacher, "proxy_variant_update");
    teacher.check_congruent(student, "proxy_variant_update");
    switch (variant) {
        case StatsVariant::student_pn:
            ema_update_buffers(teacher, student, 0.0);
            return;
        case StatsVariant::teacher_pn: {
            if (teacher_batch_stats == nullptr || teacher_batch_stats->size() != teacher.buffers().size()) {
                throw std::invalid_argument("proxy_variant_update: teacher_pn needs the teacher's batch statistics");
            }
            for (std::size_t i = 0; i < teacher.buffers().size(); ++i) {
                teacher.set_buffer(i, norm::proxy_update(teacher.buffers()[i].stats, (*teacher_batch_stats)[i], alpha));
            }
            return;
        }
        default:
            throw std::invalid_argument(
                fmt::format("proxy_variant_update: {} is not a proxy-norm variant", to_string(variant)));
    }
}

TeacherOutput teacher_forward(const ModelState& teacher, const Tensor& x, const TeacherConfig& config,
                              std::uint64_t shuffle_seed) {
    require_teacher(teacher, "teacher_forward");
    for (const Buffer& b : teacher.buffers()) {
        if (b.stats.flavor != norm::StatsFlavor::teacher) {
            throw std::invalid_argument(fmt::format("teacher_forward: buffer {} does not hold teacher statistics", b.name));
        }
    }
    ForwardOptions opts;
    opts.shuffle_seed = shuffle_seed;
    if (config.variant == StatsVariant::batch_bn) {
        opts.stats = StatsSource::batch;
        opts.batch_kind = config.batch_kind;
    } else {
        opts.stats = StatsSource::running;
        opts.collect_batch_stats = config.variant == StatsVariant::teacher_pn;
    }
    ForwardResult r = forward(teacher, teacher.constants(), x.detach(), opts);
    return TeacherOutput{std::move(r.output), std::move(r.features), std::move(r.batch_stats)};
}

void teacher_update(ModelState& teacher, const ModelState& student, const TeacherConfig& config, std::size_t step,
                    std::size_t total_steps, const std::vector<norm::NormStats>& teacher_batch_stats) {
    ema_update_params(teacher, student, momentum_schedule(config, step, total_steps));
    switch (config.variant) {
        case StatsVariant::eman:
        case StatsVariant::batch_bn:
            ema_update_buffers(teacher, student,
                               scheduled_momentum(config.buffer_momentum, config.schedule, step, total_steps));
            break;
        case StatsVariant::student_pn:
            proxy_variant_update(teacher, student, config.variant, config.proxy_alpha, nullptr);
            break;
        case StatsVariant::teacher_pn: {
            // One chunk of statistics per teacher forward this step, applied in order.
            const std::size_t sites = teacher.buffers().size();
            if (sites == 0) break;
            if (teacher_batch_stats.empty() || teacher_batch_stats.size() % sites != 0) {
                throw std::invalid_argument("teacher_update: teacher_pn needs the teacher's batch statistics");
            }
            for (std::size_t at = 0; at < teacher_batch_stats.size(); at += sites) {
                const std::vector<norm::NormStats> chunk(teacher_batch_stats.begin() + static_cast<std::ptrdiff_t>(at),
                                                         teacher_batch_stats.begin() +
                                                             static_cast<std::ptrdiff_t>(at + sites));
                proxy_variant_update(teacher, student, config.variant, config.proxy_alpha, &chunk);
            }
            break;
        }
    }
}

}  // namespace eman
