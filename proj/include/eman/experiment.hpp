#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eman/config.hpp"
#include "eman/data.hpp"
#include "eman/eval.hpp"
#include "eman/frameworks.hpp"

namespace eman {

struct PreparedData {
    Dataset train;
    Dataset val;
    LabelSplit split;  // indices into train
};

/// Dataset from `config.data` (seeded by data.seed) with a label split drawn
/// with the run seed.
PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed);

/// Architecture with input/output widths filled in for `data`.
Architecture resolve_architecture(const ExperimentConfig& config, const Dataset& train);

struct CurveRow {
    std::size_t epoch = 0;
    double student_acc = 0.0;
    double teacher_acc = 0.0;
    double sup_loss = 0.0;
    double unsup_loss = 0.0;
    double metric = 0.0;
};

struct SeedResult {
    std::uint64_t seed = 0;
    std::vector<CurveRow> curve;
    std::vector<EvalReport> reports;
    /// Teacher accuracy (EMA frameworks), student accuracy (supervised), or
    /// teacher-feature kNN accuracy (MoCo, BYOL).
    double headline = 0.0;
    bool failed = false;
    std::string failure;
};

struct RunResult {
    std::string config_hash;
    std::vector<SeedResult> seeds;
    double wall_seconds = 0.0;
};

/// Train and evaluate one seed. With `dir`, writes steps.csv, curve.csv,
/// eval.jsonl, data.manifest and checkpoints there.
SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed,
                    const std::optional<std::filesystem::path>& dir = std::nullopt);

/// Every seed of `config`; with `out_dir`, also config.ini and summary.csv.
RunResult run_experiment(const ExperimentConfig& config,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

/// One curve.csv per seed under `out_dir`/seed_<seed>/.
void emit_curves(const RunResult& result, const std::filesystem::path& out_dir);

struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t runs = 0;
    std::size_t failed = 0;

    bool all_failed() const { return runs > 0 && failed == runs; }
};

/// Mean and population standard deviation of the headline over non-failed seeds.
Aggregate aggregate(const RunResult& result);

/// "failed" when every seed failed, else the mean with 17 significant digits.
std::string format_cell(const Aggregate& a);

struct ComparisonRow {
    std::string student_norm;
    std::string teacher_norm;
    std::vector<Aggregate> cells;  // one per framework
};

struct ComparisonTable {
    std::vector<Framework> frameworks;
    std::vector<ComparisonRow> rows;
};

/// Default grid when the config lists no pairs.
std::vector<std::pair<std::string, std::string>> default_norm_pairs();

ComparisonTable compare_norms(const ExperimentConfig& base, const std::vector<std::pair<std::string, std::string>>& pairs,
                              const std::vector<Framework>& frameworks,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt);
void write_comparison(const std::filesystem::path& path, const ComparisonTable& table);

struct AblationRow {
    std::string label;
    StatsVariant variant = StatsVariant::eman;
    double buffer_momentum = 0.0;
    double proxy_alpha = 0.0;
    Aggregate result;
};

/// EMAN rows per buffer momentum (parameter momentum fixed), then
/// proxy-norm rows. teacher_pn alpha is the teacher's proxy momentum;
/// student_pn alpha is the student's.
std::vector<AblationRow> ablate_momentum(const ExperimentConfig& base, const std::vector<double>& momenta,
                                         const std::vector<std::pair<StatsVariant, double>>& variants,
                                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);
void write_ablation(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

}  // namespace eman
