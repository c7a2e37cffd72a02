#include "eman/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "eman/checkpoint.hpp"
#include "eman/csv.hpp"
#include "eman/ops.hpp"

namespace eman {
namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

bool is_self_supervised(Framework f) { return f == Framework::moco || f == Framework::byol; }

double accuracy(const ModelState& model, const Dataset& data) {
    const Tensor logits = eval_forward(model, data.x).output;
    const std::size_t c = logits.extent(1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double* row = logits.raw() + i * c;
        hits += static_cast<int>(std::max_element(row, row + c) - row) == data.y[i];
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

double knn_accuracy(const ModelState& model, const PreparedData& data, std::size_t k) {
    const EmbeddingTable train = extract_embeddings(model, data.train);
    const EmbeddingTable val = extract_embeddings(model, data.val);
    return knn_classify(train, val, std::min(k, train.size()));
}

std::vector<std::size_t> draw(const std::vector<std::size_t>& pool, std::size_t n, Rng& rng) {
    std::vector<std::size_t> out(n);
    for (std::size_t& i : out) i = pool[rng.index(pool.size())];
    return out;
}

std::string metric_column(Framework f) {
    switch (f) {
        case Framework::fixmatch: return "accept_fraction";
        case Framework::moco: return "inst_disc_top1";
        default: return "aux";
    }
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t seed) {
    Dataset full;
    if (!config.data.idx_images.empty()) {
        full = load_idx(config.data.idx_images, config.data.idx_labels);
    } else {
        full = make_synthetic(config.data.synthetic, config.data.seed);
    }
    full.validate();
    TrainVal tv = split_train_val(full, config.data.val_fraction, config.data.seed + 1);
    LabelSplit split = subsample_labels(tv.train, SplitSpec{config.data.label_fraction, true, seed});
    return PreparedData{std::move(tv.train), std::move(tv.val), std::move(split)};
}

Architecture resolve_architecture(const ExperimentConfig& config, const Dataset& train) {
    Architecture arch = config.arch;
    arch.input_dim = train.dim();
    arch.output_dim = is_self_supervised(config.framework) ? config.embed_dim : train.classes;
    arch.validate();
    return arch;
}

SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed,
                    const std::optional<std::filesystem::path>& dir) {
    config.validate();
    const ResolvedTeacher rt = resolve_teacher(config);
    const PreparedData data = prepare_data(config, seed);
    const Architecture arch = resolve_architecture(config, data.train);
    const Framework fw = config.framework;

    Rng root(seed);
    Rng init = root.split(1);
    Rng sampler = root.split(2);
    Rng aug = root.split(3);
    Rng step_seeds = root.split(4);
    Rng probe_rng = root.split(5);

    std::optional<Architecture> predictor;
    if (fw == Framework::byol) {
        Architecture p = arch;
        p.input_dim = arch.output_dim;
        p.output_dim = arch.output_dim;
        p.hidden = {config.predictor_hidden};
        p.validate();
        predictor = p;
    }
    Networks net = Networks::create(arch, rt.teacher, init, predictor);
    Sgd sgd(SgdConfig{config.optim.momentum, config.optim.weight_decay});
    FixMatchConfig fixmatch = config.fixmatch;
    fixmatch.mode = rt.fixmatch_mode;
    const AugmentationSpec weak = AugmentationSpec::weak(config.augment.weak_jitter);
    const AugmentationSpec strong = AugmentationSpec::strong(config.augment.strong_jitter, config.augment.strong_mask);

    MoCoState queue(config.moco_queue, arch.output_dim, config.moco_temperature);
    if (fw == Framework::moco) warm_fill(queue, net, data.train.x, sampler);

    std::vector<std::size_t> all(data.train.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const std::vector<std::size_t>& labeled = data.split.labeled;

    std::optional<CsvWriter> steps_csv;
    if (dir) {
        std::filesystem::create_directories(*dir);
        steps_csv.emplace(*dir / "steps.csv", std::vector<std::string>{"step", "epoch", "sup_loss", "unsup_loss",
                                                                        metric_column(fw), "lr", "m"});
    }

    SeedResult result;
    result.seed = seed;
    const std::size_t total = config.epochs * config.steps_per_epoch;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        double sup_sum = 0.0, unsup_sum = 0.0, metric_sum = 0.0;
        if (!result.failed) {
            for (std::size_t s = 0; s < config.steps_per_epoch; ++s) {
                const std::size_t step = epoch * config.steps_per_epoch + s;
                StepContext ctx;
                ctx.lr = learning_rate(config.optim, step, total);
                ctx.step = step;
                ctx.total_steps = total;
                ctx.seed = step_seeds.next_u64();
                StepStats st;
                switch (fw) {
                    case Framework::supervised: {
                        Batch b = data.train.batch(draw(labeled, config.batch_size, sampler));
                        b.x = augment(b.x, weak, aug);
                        st = supervised_step(net.student, sgd, b, ctx);
                        teacher_update(net.teacher, net.student, net.teacher_config, step, total, {});
                        st.momentum = momentum_schedule(net.teacher_config, step, total);
                        break;
                    }
                    case Framework::mean_teacher:
                    case Framework::fixmatch: {
                        Batch b = data.train.batch(draw(labeled, fixmatch.labeled_batch, sampler));
                        b.x = augment(b.x, weak, aug);
                        const Tensor u = data.train.batch(draw(all, fixmatch.unlabeled_batch, sampler)).x;
                        if (fw == Framework::fixmatch) {
                            const ViewPair views{augment(u, weak, aug), augment(u, strong, aug)};
                            st = fixmatch_step(net, sgd, b, views, fixmatch, ctx);
                        } else {
                            const ViewPair views{augment(u, weak, aug), augment(u, weak, aug)};
                            st = mean_teacher_step(net, sgd, b, views, config.consistency_weight, ctx);
                        }
                        break;
                    }
                    case Framework::moco:
                    case Framework::byol: {
                        const Tensor x = data.train.batch(draw(all, config.batch_size, sampler)).x;
                        const ViewPair views{augment(x, strong, aug), augment(x, strong, aug)};
                        st = fw == Framework::moco ? moco_step(net, sgd, views, queue, ctx)
                                                   : byol_step(net, sgd, views, ctx);
                        break;
                    }
                }
                if (steps_csv) {
                    steps_csv->cell(step).cell(epoch).cell(st.sup_loss).cell(st.unsup_loss).cell(st.metric);
                    steps_csv->cell(ctx.lr).cell(st.momentum).end_row();
                }
                sup_sum += st.sup_loss;
                unsup_sum += st.unsup_loss;
                metric_sum += st.metric;
                if (!std::isfinite(st.loss)) {
                    result.failed = true;
                    result.failure = fmt::format("non-finite loss at step {}", step);
                    break;
                }
            }
        }
        CurveRow row{epoch, kNan, kNan, kNan, kNan, kNan};
        if (!result.failed) {
            const auto spe = static_cast<double>(config.steps_per_epoch);
            row.sup_loss = sup_sum / spe;
            row.unsup_loss = unsup_sum / spe;
            row.metric = metric_sum / spe;
            if (is_self_supervised(fw)) {
                row.student_acc = knn_accuracy(net.student, data, config.eval.knn_k);
                row.teacher_acc = knn_accuracy(net.teacher, data, config.eval.knn_k);
            } else {
                row.student_acc = accuracy(net.student, data.val);
                row.teacher_acc = accuracy(net.teacher, data.val);
            }
        }
        result.curve.push_back(row);
    }

    const double chance = 1.0 / static_cast<double>(data.train.classes);
    if (!result.failed) {
        const CurveRow& last = result.curve.back();
        result.headline = fw == Framework::supervised ? last.student_acc : last.teacher_acc;
        if (result.headline < chance - 0.10) {
            result.failed = true;
            result.failure = fmt::format("final accuracy {} below chance - 10 points", result.headline);
        }
    } else {
        result.headline = kNan;
    }

    if (!std::isnan(result.headline)) {
        auto report = [&](std::string metric, double value, std::map<std::string, std::string> params) {
            result.reports.push_back(EvalReport{std::move(metric), value, std::move(params), "train->val", seed});
        };
        const ModelState& evaluated = fw == Framework::supervised ? net.student : net.teacher;
        if (!is_self_supervised(fw)) {
            report("student_accuracy", result.curve.back().student_acc, {});
            report("teacher_accuracy", result.curve.back().teacher_acc, {});
        }
        const EmbeddingTable train_emb = extract_embeddings(evaluated, data.train);
        const EmbeddingTable val_emb = extract_embeddings(evaluated, data.val);
        const std::size_t k = std::min(config.eval.knn_k, train_emb.size());
        report("knn_top1_accuracy", knn_classify(train_emb, val_emb, k), {{"k", std::to_string(k)}});
        const RetrievalResult rr = retrieval_metrics(train_emb, val_emb, config.eval.top_n);
        const std::map<std::string, std::string> rparams{{"top_n", std::to_string(config.eval.top_n)},
                                                         {"skipped", std::to_string(rr.skipped)}};
        report("retrieval_map", rr.map, rparams);
        report("retrieval_recall", rr.recall, rparams);
        if (config.eval.probe_epochs > 0) {
            LinearProbeConfig pc;
            pc.epochs = config.eval.probe_epochs;
            pc.seed = seed;
            const LinearProbeResult lp = linear_probe(train_emb, val_emb, pc);
            report("linear_probe_accuracy", lp.best_accuracy, {{"lr", format_double(lp.best_lr)},
                                                               {"epochs", std::to_string(pc.epochs)}});
        }
        const std::size_t probe_n = std::min<std::size_t>(16, data.val.size());
        const Tensor probe = slice(data.val.x, 0, 0, probe_n);
        report("dependency_teacher", dependency_probe(net.teacher, probe, config.eval.dependency_trials, probe_rng,
                                                       StatsSource::running),
               {{"trials", std::to_string(config.eval.dependency_trials)}, {"batch", std::to_string(probe_n)}});
        if (arch.norm != norm::NormKind::sync_bn && arch.norm != norm::NormKind::shuffle_bn) {
            report("dependency_student_train",
                   dependency_probe(net.student, probe, config.eval.dependency_trials, probe_rng, StatsSource::batch),
                   {{"trials", std::to_string(config.eval.dependency_trials)}, {"batch", std::to_string(probe_n)}});
        }
    }

    if (dir) {
        write_eval_reports(*dir / "eval.jsonl", result.reports);
        save_checkpoint(*dir / "student.ckpt", net.student);
        save_checkpoint(*dir / "teacher.ckpt", net.teacher);
        if (net.predictor) save_checkpoint(*dir / "predictor.ckpt", *net.predictor);
        write_manifest(*dir / "data.manifest",
                       {{"source", config.data.idx_images.empty() ? std::string(to_string(config.data.synthetic.kind))
                                                                  : config.data.idx_images},
                        {"train", std::to_string(data.train.size())},
                        {"val", std::to_string(data.val.size())},
                        {"labeled", std::to_string(data.split.labeled.size())},
                        {"unlabeled", std::to_string(data.split.unlabeled.size())},
                        {"classes", std::to_string(data.train.classes)},
                        {"dim", std::to_string(data.train.dim())},
                        {"data_seed", std::to_string(config.data.seed)},
                        {"split_seed", std::to_string(seed)}});
        CsvWriter curve(*dir / "curve.csv",
                        {"epoch", "student_acc", "teacher_acc", "sup_loss", "unsup_loss", metric_column(fw)});
        for (const CurveRow& r : result.curve) {
            curve.cell(r.epoch).cell(r.student_acc).cell(r.teacher_acc).cell(r.sup_loss).cell(r.unsup_loss);
            curve.cell(r.metric).end_row();
        }
    }
    return result;
}

RunResult run_experiment(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out_dir) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    RunResult result;
    result.config_hash = config.hash();
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        std::ofstream(*out_dir / "config.ini", std::ios::trunc) << config.canonical();
    }
    for (std::uint64_t seed : config.seeds) {
        std::optional<std::filesystem::path> dir;
        if (out_dir) dir = *out_dir / fmt::format("seed_{}", seed);
        result.seeds.push_back(run_seed(config, seed, dir));
    }
    if (out_dir) {
        CsvWriter summary(*out_dir / "summary.csv", {"seed", "headline", "failed"});
        for (const SeedResult& s : result.seeds) {
            summary.cell(static_cast<std::int64_t>(s.seed)).cell(s.headline).cell(s.failed ? "1" : "0");
            summary.end_row();
        }
    }
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

void emit_curves(const RunResult& result, const std::filesystem::path& out_dir) {
    for (const SeedResult& s : result.seeds) {
        const auto dir = out_dir / fmt::format("seed_{}", s.seed);
        std::filesystem::create_directories(dir);
        CsvWriter curve(dir / "curve.csv", {"epoch", "student_acc", "teacher_acc", "sup_loss", "unsup_loss", "metric"});
        for (const CurveRow& r : s.curve) {
            curve.cell(r.epoch).cell(r.student_acc).cell(r.teacher_acc).cell(r.sup_loss).cell(r.unsup_loss);
            curve.cell(r.metric).end_row();
        }
    }
}

Aggregate aggregate(const RunResult& result) {
    Aggregate a;
    a.runs = result.seeds.size();
    std::vector<double> values;
    for (const SeedResult& s : result.seeds) {
        if (s.failed) {
            ++a.failed;
        } else {
            values.push_back(s.headline);
        }
    }
    if (values.empty()) {
        a.mean = a.stddev = kNan;
        return a;
    }
    double sum = 0.0;
    for (double v : values) sum += v;
    a.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(sq / static_cast<double>(values.size()));
    return a;
}

std::string format_cell(const Aggregate& a) { return a.all_failed() ? "failed" : format_double(a.mean); }

std::vector<std::pair<std::string, std::string>> default_norm_pairs() {
    return {{"BN", "default"}, {"BN", "BN"},  {"BN", "EMAN"},     {"SyncBN", "SyncBN"},
            {"SyncBN", "EMAN"}, {"ShuffleBN", "ShuffleBN"}, {"GN", "GN"}, {"IN", "IN"}};
}

ComparisonTable compare_norms(const ExperimentConfig& base, const std::vector<std::pair<std::string, std::string>>& pairs,
                              const std::vector<Framework>& frameworks,
                              const std::optional<std::filesystem::path>& out_dir) {
    ComparisonTable table;
    table.frameworks = frameworks;
    for (const auto& [student, teacher] : pairs) {
        ComparisonRow row{student, teacher, {}};
        for (Framework fw : frameworks) {
            ExperimentConfig cfg = base;
            cfg.framework = fw;
            cfg.arch.norm = norm::parse_norm_kind(student);
            cfg.teacher_norm = teacher;
            cfg.validate();
            std::optional<std::filesystem::path> dir;
            if (out_dir) dir = *out_dir / std::string(to_string(fw)) / fmt::format("{}_{}", student, teacher);
            row.cells.push_back(aggregate(run_experiment(cfg, dir)));
        }
        table.rows.push_back(std::move(row));
    }
    if (out_dir) write_comparison(*out_dir / "comparison.csv", table);
    return table;
}

void write_comparison(const std::filesystem::path& path, const ComparisonTable& table) {
    std::vector<std::string> header{"student_norm", "teacher_norm"};
    for (Framework fw : table.frameworks) {
        header.push_back(fmt::format("{}_mean", to_string(fw)));
        header.push_back(fmt::format("{}_std", to_string(fw)));
        header.push_back(fmt::format("{}_failed", to_string(fw)));
    }
    CsvWriter out(path, header);
    for (const ComparisonRow& row : table.rows) {
        out.cell(row.student_norm).cell(row.teacher_norm);
        for (const Aggregate& a : row.cells) {
            out.cell(format_cell(a)).cell(a.stddev).cell(a.failed);
        }
        out.end_row();
    }
}

std::vector<AblationRow> ablate_momentum(const ExperimentConfig& base, const std::vector<double>& momenta,
                                         const std::vector<std::pair<StatsVariant, double>>& variants,
                                         const std::optional<std::filesystem::path>& out_dir) {
    std::vector<AblationRow> rows;
    auto run = [&](AblationRow row, ExperimentConfig cfg, const std::string& tag) {
        cfg.validate();
        std::optional<std::filesystem::path> dir;
        if (out_dir) dir = *out_dir / tag;
        row.result = aggregate(run_experiment(cfg, dir));
        rows.push_back(std::move(row));
    };
    for (double m : momenta) {
        ExperimentConfig cfg = base;
        cfg.teacher_norm = "EMAN";
        cfg.teacher.variant = StatsVariant::eman;
        cfg.teacher.buffer_momentum = m;
        run(AblationRow{fmt::format("EMAN (m={})", format_double(m)), StatsVariant::eman, m, cfg.arch.alpha, {}}, cfg,
            fmt::format("eman_m{}", format_double(m)));
    }
    for (const auto& [variant, alpha] : variants) {
        ExperimentConfig cfg = base;
        cfg.teacher_norm = "EMAN";
        cfg.teacher.variant = variant;
        std::string name;
        if (variant == StatsVariant::teacher_pn) {
            cfg.teacher.proxy_alpha = alpha;
            name = "teacher PN";
        } else {
            cfg.arch.alpha = alpha;
            name = "student PN";
        }
        run(AblationRow{fmt::format("{} (alpha={})", name, format_double(alpha)), variant,
                        cfg.teacher.buffer_momentum, alpha, {}},
            cfg, fmt::format("{}_a{}", to_string(variant), format_double(alpha)));
    }
    if (out_dir) write_ablation(*out_dir / "ablation.csv", rows);
    return rows;
}

void write_ablation(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    CsvWriter out(path, {"variant", "stats_variant", "buffer_momentum", "proxy_alpha", "mean", "std", "failed"});
    for (const AblationRow& r : rows) {
        out.cell(r.label).cell(to_string(r.variant)).cell(r.buffer_momentum).cell(r.proxy_alpha);
        out.cell(format_cell(r.result)).cell(r.result.stddev).cell(r.result.failed).end_row();
    }
}

}  // namespace eman
