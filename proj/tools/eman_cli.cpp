#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "eman/checkpoint.hpp"
#include "eman/config.hpp"
#include "eman/csv.hpp"
#include "eman/experiment.hpp"

namespace fs = std::filesystem;
using namespace eman;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::uint64_t> seeds;
    std::string out;
};

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = load_config(c.config);
    if (c.seed) cfg.seeds = {*c.seed};
    if (!c.seeds.empty()) cfg.seeds = c.seeds;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", c.config, "Experiment config (INI)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    auto* seed = cmd->add_option("--seed", c.seed, "Single seed, overrides the config");
    cmd->add_option("--seeds", c.seeds, "Seed list, overrides the config")->delimiter(',')->excludes(seed);
    cmd->add_option("--out", c.out, "Output directory")->required();
}

void print_table(const CsvTable& t) {
    std::vector<std::size_t> width(t.header.size());
    for (std::size_t i = 0; i < t.header.size(); ++i) width[i] = t.header[i].size();
    for (const auto& row : t.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) fmt::print("{:<{}}  ", cells[i], width[i]);
        fmt::print("\n");
    };
    line(t.header);
    for (const auto& row : t.rows) line(row);
}

int run_verb(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const RunResult r = run_experiment(cfg, fs::path(c.out));
    for (const SeedResult& s : r.seeds) {
        fmt::print("seed {}: headline {}{}\n", s.seed, format_double(s.headline), s.failed ? " (failed: " + s.failure + ")" : "");
    }
    const Aggregate a = aggregate(r);
    fmt::print("mean {} std {} over {} seed(s), {} failed; config {}; {:.1f} s\n", format_cell(a),
               format_double(a.stddev), a.runs, a.failed, r.config_hash, r.wall_seconds);
    return 0;
}

int compare_verb(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const auto pairs = cfg.compare_pairs.empty() ? default_norm_pairs() : cfg.compare_pairs;
    const auto fws = cfg.compare_frameworks.empty()
                         ? std::vector<Framework>{Framework::mean_teacher, Framework::fixmatch}
                         : cfg.compare_frameworks;
    compare_norms(cfg, pairs, fws, fs::path(c.out));
    print_table(read_csv(fs::path(c.out) / "comparison.csv"));
    return 0;
}

int ablate_verb(const Common& c) {
    const ExperimentConfig cfg = load(c);
    ablate_momentum(cfg, cfg.ablate_momenta, cfg.ablate_variants, fs::path(c.out));
    print_table(read_csv(fs::path(c.out) / "ablation.csv"));
    return 0;
}

int eval_verb(const Common& c, const std::string& checkpoint) {
    const ExperimentConfig cfg = load(c);
    const std::uint64_t seed = cfg.seeds.front();
    const PreparedData data = prepare_data(cfg, seed);
    Rng rng(seed);
    ModelState model = ModelState::init(resolve_architecture(cfg, data.train), rng, "student");
    load_checkpoint(checkpoint, model);
    const EmbeddingTable train = extract_embeddings(model, data.train);
    const EmbeddingTable val = extract_embeddings(model, data.val);
    const std::size_t k = std::min(cfg.eval.knn_k, train.size());
    std::vector<EvalReport> reports;
    reports.push_back({"knn_top1_accuracy", knn_classify(train, val, k), {{"k", std::to_string(k)}}, "train->val", seed});
    const RetrievalResult rr = retrieval_metrics(train, val, cfg.eval.top_n);
    const std::map<std::string, std::string> rp{{"top_n", std::to_string(cfg.eval.top_n)},
                                                {"skipped", std::to_string(rr.skipped)}};
    reports.push_back({"retrieval_map", rr.map, rp, "train->val", seed});
    reports.push_back({"retrieval_recall", rr.recall, rp, "train->val", seed});
    LinearProbeConfig pc;
    pc.epochs = cfg.eval.probe_epochs > 0 ? cfg.eval.probe_epochs : 30;
    pc.seed = seed;
    const LinearProbeResult lp = linear_probe(train, val, pc);
    reports.push_back({"linear_probe_accuracy", lp.best_accuracy, {{"lr", format_double(lp.best_lr)}}, "train->val", seed});
    fs::create_directories(c.out);
    write_eval_reports(fs::path(c.out) / "eval.jsonl", reports);
    for (const EvalReport& r : reports) fmt::print("{:<24} {}\n", r.metric, format_double(r.value));
    return 0;
}

int report_verb(const Common& c) {
    const fs::path dir(c.out);
    bool any = false;
    for (const char* name : {"comparison.csv", "ablation.csv", "summary.csv"}) {
        if (fs::exists(dir / name)) {
            fmt::print("== {}\n", name);
            print_table(read_csv(dir / name));
            any = true;
        }
    }
    if (!any) {
        fmt::print(stderr, "no comparison.csv, ablation.csv or summary.csv in {}\n", dir.string());
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EMAN desk-scale lab"};
    app.require_subcommand(1);
    Common run_c, cmp_c, abl_c, eval_c, rep_c;
    std::string checkpoint;
    auto* run = app.add_subcommand("run", "Train and evaluate one config over its seeds");
    add_common(run, run_c);
    auto* cmp = app.add_subcommand("compare-norms", "Student/teacher normalization grid");
    add_common(cmp, cmp_c);
    auto* abl = app.add_subcommand("ablate", "Teacher statistics momentum and proxy-norm ablation");
    add_common(abl, abl_c);
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint: kNN, retrieval, linear probe");
    add_common(ev, eval_c);
    ev->add_option("--checkpoint", checkpoint, "ModelState checkpoint")->required()->check(CLI::ExistingFile);
    auto* rep = app.add_subcommand("report", "Print the tables found in an output directory");
    add_common(rep, rep_c, false);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) return run_verb(run_c);
        if (*cmp) return compare_verb(cmp_c);
        if (*abl) return ablate_verb(abl_c);
        if (*ev) return eval_verb(eval_c, checkpoint);
        if (*rep) return report_verb(rep_c);
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
    return 0;
}
