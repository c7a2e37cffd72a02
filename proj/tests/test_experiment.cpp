#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "doctest.h"
#include "eman/checkpoint.hpp"
#include "eman/csv.hpp"
#include "eman/experiment.hpp"

using namespace eman;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(Framework fw) {
    ExperimentConfig c = parse_config(R"(
[experiment]
epochs = 3
steps_per_epoch = 10
batch_size = 32
seeds = 0

[model]
hidden = 16
norm = BN
spatial = 4
embed_dim = 8

[teacher]
momentum = 0.9
buffer_momentum = 0.9

[fixmatch]
labeled_batch = 8
unlabeled_batch = 16

[moco]
queue = 64

[data]
kind = blobs
n = 400
classes = 4
dim = 8
noise = 0.5
separation = 3.0
label_fraction = 0.25

[optim]
lr = 0.05
)");
    c.framework = fw;
    if (fw == Framework::supervised) c.teacher_norm = "default";
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("eman_exp_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("same seed, same bytes") {
    for (Framework fw : {Framework::fixmatch, Framework::moco, Framework::byol}) {
        CAPTURE(to_string(fw));
        const ExperimentConfig c = tiny(fw);
        const fs::path a = scratch("repro_a"), b = scratch("repro_b");
        run_experiment(c, a);
        run_experiment(c, b);
        for (const char* f : {"steps.csv", "curve.csv", "eval.jsonl", "student.ckpt", "teacher.ckpt"}) {
            CAPTURE(f);
            const std::string x = slurp(a / "seed_0" / f);
            CHECK_FALSE(x.empty());
            CHECK(x == slurp(b / "seed_0" / f));
        }
        CHECK(slurp(a / "summary.csv") == slurp(b / "summary.csv"));
        CHECK(parse_config(slurp(a / "config.ini")).hash() == c.hash());
    }
}

TEST_CASE("run outputs follow their formats") {
    const ExperimentConfig c = tiny(Framework::fixmatch);
    const fs::path out = scratch("formats");
    const RunResult r = run_experiment(c, out);
    const CsvTable steps = read_csv(out / "seed_0" / "steps.csv");
    CHECK(steps.header == std::vector<std::string>{"step", "epoch", "sup_loss", "unsup_loss", "accept_fraction",
                                                   "lr", "m"});
    CHECK(steps.rows.size() == 30);
    CHECK(steps.number(29, "m") == 0.9);
    CHECK(read_csv(out / "seed_0" / "curve.csv").rows.size() == 3);
    const auto reports = read_eval_reports(out / "seed_0" / "eval.jsonl");
    REQUIRE_FALSE(reports.empty());
    for (const EvalReport& e : reports) CHECK_NOTHROW(e.validate());
    CHECK_FALSE(read_records(out / "seed_0" / "teacher.ckpt").empty());
    const Manifest m = read_manifest(out / "seed_0" / "data.manifest");
    CHECK(std::find(m.begin(), m.end(), std::pair<std::string, std::string>{"classes", "4"}) != m.end());
    CHECK(r.config_hash == c.hash());
}

TEST_CASE("supervised training separates easy blobs") {
    ExperimentConfig c = tiny(Framework::supervised);
    c.epochs = 5;
    c.data.label_fraction = 1.0;
    const RunResult r = run_experiment(c);
    REQUIRE(r.seeds.size() == 1);
    CHECK_FALSE(r.seeds[0].failed);
    CHECK(r.seeds[0].headline > 0.95);
}

TEST_CASE("diverging seeds are marked failed and excluded") {
    ExperimentConfig c = tiny(Framework::supervised);
    c.arch.norm = norm::NormKind::none;
    c.optim.lr = 1e30;
    c.optim.warmup_fraction = 0.0;
    const RunResult r = run_experiment(c);
    REQUIRE(r.seeds.size() == 1);
    CHECK(r.seeds[0].failed);
    CHECK_FALSE(r.seeds[0].failure.empty());
    const Aggregate a = aggregate(r);
    CHECK(a.all_failed());
    CHECK(format_cell(a) == "failed");

    RunResult mixed = r;
    SeedResult ok;
    ok.headline = 0.5;
    mixed.seeds.push_back(ok);
    ok.headline = 0.7;
    mixed.seeds.push_back(ok);
    const Aggregate m = aggregate(mixed);
    CHECK(m.runs == 3);
    CHECK(m.failed == 1);
    CHECK(m.mean == doctest::Approx(0.6));
    CHECK(m.stddev == doctest::Approx(0.1));
    CHECK(format_cell(m) == format_double(m.mean));
}

TEST_CASE("comparison and ablation grids") {
    ExperimentConfig c = tiny(Framework::fixmatch);
    c.epochs = 1;
    const ComparisonTable t =
        compare_norms(c, {{"BN", "EMAN"}, {"BN", "BN"}, {"LN", "LN"}}, {Framework::fixmatch, Framework::moco});
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0].cells.size() == 2);
    const fs::path out = scratch("grid");
    fs::create_directories(out);
    write_comparison(out / "compare.csv", t);
    CHECK(read_csv(out / "compare.csv").rows.size() == 3);

    const std::vector<AblationRow> rows = ablate_momentum(c, {0.9, 0.99}, {{StatsVariant::teacher_pn, 0.9}});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].variant == StatsVariant::eman);
    CHECK(rows[2].variant == StatsVariant::teacher_pn);
    write_ablation(out / "ablate.csv", rows);
    CHECK(read_csv(out / "ablate.csv").rows.size() == 3);
    CHECK_FALSE(default_norm_pairs().empty());
}
