#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eman/data.hpp"
#include "eman/frameworks.hpp"
#include "eman/model.hpp"
#include "eman/teacher.hpp"

namespace eman {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class LrSchedule { cosine, step };

std::string_view to_string(LrSchedule s);

struct OptimConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double warmup_fraction = 0.05;
    LrSchedule schedule = LrSchedule::cosine;
};

/// Linear warm-up over the first warmup_fraction of steps, then cosine decay
/// to 0 or x0.1 steps at 60% and 80%.
double learning_rate(const OptimConfig& optim, std::size_t step, std::size_t total_steps);

struct DataConfig {
    SyntheticSpec synthetic;
    /// Seed of the dataset itself; shared by every run seed.
    std::uint64_t seed = 0;
    double val_fraction = 0.2;
    double label_fraction = 0.1;
    std::string idx_images;
    std::string idx_labels;
};

struct AugmentConfig {
    double weak_jitter = 0.1;
    double strong_jitter = 0.3;
    double strong_mask = 0.2;
};

struct EvalConfig {
    std::size_t knn_k = 20;
    std::size_t top_n = 100;
    /// 0 skips the linear probe.
    std::size_t probe_epochs = 0;
    std::size_t dependency_trials = 20;
};

struct ExperimentConfig {
    std::string name = "experiment";
    Framework framework = Framework::fixmatch;
    std::size_t epochs = 100;
    std::size_t steps_per_epoch = 10;
    /// Batch size for supervised, MoCo and BYOL.
    std::size_t batch_size = 64;
    std::vector<std::uint64_t> seeds{0};

    /// input_dim and output_dim are filled in from the data at run time.
    Architecture arch;
    /// Output width for MoCo and BYOL.
    std::size_t embed_dim = 32;
    /// EMAN, a BN-family kind (teacher normalizes with batch statistics), the
    /// student's per-sample kind, or "default" (the framework's usual design).
    std::string teacher_norm = "EMAN";
    TeacherConfig teacher;

    FixMatchConfig fixmatch;
    double consistency_weight = 10.0;
    std::size_t moco_queue = 1024;
    double moco_temperature = 0.2;
    std::size_t predictor_hidden = 32;

    DataConfig data;
    OptimConfig optim;
    AugmentConfig augment;
    EvalConfig eval;

    // compare-norms / ablate grids.
    std::vector<std::pair<std::string, std::string>> compare_pairs;
    std::vector<Framework> compare_frameworks;
    std::vector<double> ablate_momenta{0.9, 0.999, 0.99999};
    std::vector<std::pair<StatsVariant, double>> ablate_variants{{StatsVariant::teacher_pn, 0.9},
                                                                 {StatsVariant::student_pn, 0.9},
                                                                 {StatsVariant::teacher_pn, 0.999},
                                                                 {StatsVariant::student_pn, 0.999}};

    /// Named diagnostics for every inconsistent field.
    void validate() const;
    /// Every field as INI text in a fixed order; parses back to an equal config.
    std::string canonical() const;
    /// FNV-1a of `canonical()`, hex.
    std::string hash() const;
};

/// INI with [sections] and `key = value`; unknown sections or keys are errors.
ExperimentConfig parse_config(std::string_view text, std::string_view origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Apply one `section.key = value` setting.
void set_config_value(ExperimentConfig& config, std::string_view section, std::string_view key,
                      std::string_view value);

/// Teacher setup implied by `teacher_norm` (variant, batch kind, FixMatch mode).
struct ResolvedTeacher {
    TeacherConfig teacher;
    FixMatchMode fixmatch_mode = FixMatchMode::eman_teacher;
    std::string label;
};

ResolvedTeacher resolve_teacher(const ExperimentConfig& config);

}  // namespace eman
