#include "eman/frameworks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "eman/ops.hpp"

namespace eman {

std::string_view to_string(Framework f) {
    switch (f) {
        case Framework::supervised: return "supervised";
        case Framework::mean_teacher: return "mean_teacher";
        case Framework::fixmatch: return "fixmatch";
        case Framework::moco: return "moco";
        case Framework::byol: return "byol";
    }
    return "unknown";
}

Framework parse_framework(std::string_view name) {
    for (Framework f :
         {Framework::supervised, Framework::mean_teacher, Framework::fixmatch, Framework::moco, Framework::byol}) {
        if (name == to_string(f)) return f;
    }
    throw std::invalid_argument(
        fmt::format("unknown framework '{}' (expected supervised|mean_teacher|fixmatch|moco|byol)", name));
}

bool uses_ema_teacher(Framework f) { return f != Framework::supervised; }

Networks Networks::create(const Architecture& arch, const TeacherConfig& teacher_config, Rng& rng,
                          std::optional<Architecture> predictor) {
    teacher_config.validate();
    ModelState student = ModelState::init(arch, rng, "student");
    ModelState teacher = clone_into_teacher(student);
    std::optional<ModelState> pred;
    if (predictor) pred = ModelState::init(*predictor, rng, "predictor");
    return Networks{std::move(student), std::move(teacher), std::move(pred), teacher_config};
}

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return Rng(seed).split(stream).next_u64(); }

Tensor student_forward(const ModelState& model, std::span<const Tensor> params, const Tensor& x, std::uint64_t seed,
                       std::vector<norm::NormStats>& stats) {
    ForwardOptions opts;
    opts.stats = StatsSource::batch;
    opts.shuffle_seed = seed;
    ForwardResult r = forward(model, params, x, opts);
    stats.insert(stats.end(), r.batch_stats.begin(), r.batch_stats.end());
    return r.output;
}

Tensor teacher_output(const Networks& net, const Tensor& x, std::uint64_t seed, std::vector<norm::NormStats>& stats) {
    TeacherOutput r = teacher_forward(net.teacher, x, net.teacher_config, seed);
    stats.insert(stats.end(), r.batch_stats.begin(), r.batch_stats.end());
    return r.output;
}

void apply_proxy_chunks(ModelState& model, const std::vector<norm::NormStats>& stats) {
    const std::size_t sites = model.buffers().size();
    if (sites == 0) return;
    if (stats.size() % sites != 0) throw std::logic_error("proxy statistics do not match the model's sites");
    for (std::size_t at = 0; at < stats.size(); at += sites) {
        update_proxies(model, std::span<const norm::NormStats>(stats.data() + at, sites));
    }
}

Tensor as_scalar(const Tensor& t) { return reshape(t, {1}); }

StepStats finish_step(Networks* net, ModelState& student, ModelState* predictor, Sgd& sgd, Tape& tape,
                      LossTerms& terms, const StepContext& ctx) {
    const GradientMap grads = tape.backward(terms.total);
    if (ctx.hooks && ctx.hooks->on_gradients) ctx.hooks->on_gradients(grads);
    sgd.step(student, grads, ctx.lr);
    if (predictor) sgd.step(*predictor, grads, ctx.lr);
    apply_proxy_chunks(student, terms.student_stats);
    if (predictor) apply_proxy_chunks(*predictor, terms.predictor_stats);
    if (ctx.hooks && ctx.hooks->before_teacher_update) ctx.hooks->before_teacher_update();
    StepStats out{terms.total.item(), terms.sup, terms.unsup, terms.metric, kNan};
    if (net) {
        teacher_update(net->teacher, net->student, net->teacher_config, ctx.step, ctx.total_steps, terms.teacher_stats);
        out.momentum = momentum_schedule(net->teacher_config, ctx.step, ctx.total_steps);
    }
    if (ctx.hooks && ctx.hooks->after_teacher_update) ctx.hooks->after_teacher_update();
    return out;
}

void require_rows(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(0) != b.extent(0)) {
        throw ShapeError(fmt::format("{}: views {} and {} differ in batch size", op, to_string(a.shape()),
                                     to_string(b.shape())));
    }
}

}  // namespace

LossTerms supervised_loss(const ModelState& student, std::span<const Tensor> params, const Batch& batch,
                          std::uint64_t seed) {
    LossTerms terms;
    terms.total = cross_entropy(student_forward(student, params, batch.x, stream_seed(seed, 1), terms.student_stats),
                                batch.y);
    terms.sup = terms.total.item();
    terms.metric = kNan;
    return terms;
}

StepStats supervised_step(ModelState& student, Sgd& sgd, const Batch& batch, const StepContext& ctx) {
    Tape tape;
    const std::vector<Tensor> params = student.bind(tape);
    LossTerms terms = supervised_loss(student, params, batch, ctx.seed);
    return finish_step(nullptr, student, nullptr, sgd, tape, terms, ctx);
}

LossTerms mean_teacher_loss(const Networks& net, std::span<const Tensor> params, const Batch& labeled,
                            const ViewPair& unlabeled, double consistency_weight, std::uint64_t seed) {
    if (!(consistency_weight >= 0.0)) throw std::invalid_argument("mean_teacher: consistency weight must be >= 0");
    LossTerms terms = supervised_loss(net.student, params, labeled, seed);
    if (consistency_weight == 0.0) return terms;
    require_rows(unlabeled.a, unlabeled.b, "mean_teacher");
    const Tensor ps =
        softmax(student_forward(net.student, params, unlabeled.a, stream_seed(seed, 2), terms.student_stats));
    const Tensor pt = softmax_values(teacher_output(net, unlabeled.b, stream_seed(seed, 101), terms.teacher_stats));
    const Tensor diff = sub(ps, pt);
    const Tensor consistency =
        as_scalar(scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(unlabeled.a.extent(0))));
    terms.unsup = consistency.item();
    terms.total = add(terms.total, scale(consistency, consistency_weight));
    return terms;
}

StepStats mean_teacher_step(Networks& net, Sgd& sgd, const Batch& labeled, const ViewPair& unlabeled,
                            double consistency_weight, const StepContext& ctx) {
    Tape tape;
    const std::vector<Tensor> params = net.student.bind(tape);
    LossTerms terms = mean_teacher_loss(net, params, labeled, unlabeled, consistency_weight, ctx.seed);
    return finish_step(&net, net.student, nullptr, sgd, tape, terms, ctx);
}

std::string_view to_string(FixMatchMode m) { return m == FixMatchMode::eman_teacher ? "eman_teacher" : "concat"; }

FixMatchMode parse_fixmatch_mode(std::string_view name) {
    if (name == "eman_teacher") return FixMatchMode::eman_teacher;
    if (name == "concat") return FixMatchMode::concat;
    throw std::invalid_argument(fmt::format("unknown fixmatch mode '{}' (expected eman_teacher|concat)", name));
}

void FixMatchConfig::validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument(fmt::format("fixmatch: tau {} outside (0, 1)", tau));
    if (!(lambda_sup >= 0.0 && lambda_unsup >= 0.0)) throw std::invalid_argument("fixmatch: loss weights must be >= 0");
    if (labeled_batch == 0 || unlabeled_batch == 0) throw std::invalid_argument("fixmatch: batch sizes must be >= 1");
}

PseudoLabels pseudo_label(const Tensor& probs, double tau) {
    if (probs.rank() != 2 || probs.extent(1) == 0) {
        throw ShapeError(fmt::format("pseudo_label: expected [n, c], got {}", to_string(probs.shape())));
    }
    const std::size_t n = probs.extent(0), c = probs.extent(1);
    PseudoLabels out;
    out.labels.resize(n);
    out.weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = probs.raw() + i * c;
        const double* best = std::max_element(row, row + c);
        out.labels[i] = static_cast<int>(best - row);
        const bool accept = *best >= tau;
        out.weights[i] = accept ? 1.0 : 0.0;
        out.accepted += accept;
    }
    out.accept_fraction = n == 0 ? 0.0 : static_cast<double>(out.accepted) / static_cast<double>(n);
    return out;
}

LossTerms fixmatch_loss(const Networks& net, std::span<const Tensor> params, const Batch& labeled,
                        const ViewPair& unlabeled, const FixMatchConfig& config, std::uint64_t seed) {
    config.validate();
    require_rows(unlabeled.a, unlabeled.b, "fixmatch");
    const std::size_t nl = labeled.x.extent(0);
    const std::size_t nu = unlabeled.a.extent(0);
    LossTerms terms;
    Tensor labeled_logits, strong_logits;
    Tensor weak_probs;
    if (config.mode == FixMatchMode::eman_teacher) {
        const std::vector<Tensor> parts{labeled.x, unlabeled.b};
        const Tensor logits =
            student_forward(net.student, params, concat(parts, 0), stream_seed(seed, 1), terms.student_stats);
        labeled_logits = slice(logits, 0, 0, nl);
        strong_logits = slice(logits, 0, nl, nl + nu);
        weak_probs = softmax_values(teacher_output(net, unlabeled.a, stream_seed(seed, 101), terms.teacher_stats));
    } else {
        const std::vector<Tensor> parts{labeled.x, unlabeled.a, unlabeled.b};
        const Tensor logits =
            student_forward(net.student, params, concat(parts, 0), stream_seed(seed, 1), terms.student_stats);
        labeled_logits = slice(logits, 0, 0, nl);
        weak_probs = softmax_values(slice(logits, 0, nl, nl + nu));
        strong_logits = slice(logits, 0, nl + nu, nl + 2 * nu);
    }
    const PseudoLabels pl = pseudo_label(weak_probs, config.tau);
    const Tensor sup = cross_entropy(labeled_logits, labeled.y);
    terms.sup = sup.item();
    terms.metric = pl.accept_fraction;
    terms.total = scale(sup, config.lambda_sup);
    if (pl.accepted > 0) {
        const Tensor unsup = cross_entropy(strong_logits, pl.labels, pl.weights, static_cast<double>(pl.accepted));
        terms.unsup = unsup.item();
        terms.total = add(terms.total, scale(unsup, config.lambda_unsup));
    }
    return terms;
}

StepStats fixmatch_step(Networks& net, Sgd& sgd, const Batch& labeled, const ViewPair& unlabeled,
                        const FixMatchConfig& config, const StepContext& ctx) {
    Tape tape;
    const std::vector<Tensor> params = net.student.bind(tape);
    LossTerms terms = fixmatch_loss(net, params, labeled, unlabeled, config, ctx.seed);
    return finish_step(&net, net.student, nullptr, sgd, tape, terms, ctx);
}

InfoNce info_nce(const Tensor& q, const Tensor& k, const Tensor& queue, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("info_nce: temperature must be > 0");
    require_rows(q, k, "info_nce");
    const std::size_t n = q.extent(0), d = q.extent(1);
    Tensor logits = row_dot(q, k);
    if (queue.rank() == 2 && queue.extent(0) > 0) {
        if (queue.extent(1) != d) throw ShapeError("info_nce: queue width differs from embedding width");
        const std::size_t kq = queue.extent(0);
        std::vector<double> t(d * kq);
        for (std::size_t i = 0; i < kq; ++i) {
            for (std::size_t j = 0; j < d; ++j) t[j * kq + i] = queue.at(i, j);
        }
        const std::vector<Tensor> parts{logits, matmul(q, Tensor({d, kq}, std::move(t)))};
        logits = concat(parts, 1);
    }
    logits = scale(logits, 1.0 / temperature);
    const std::size_t width = logits.extent(1);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.raw() + i * width;
        hits += *std::max_element(row, row + width) == row[0];
    }
    return InfoNce{cross_entropy(logits, std::vector<int>(n, 0)), static_cast<double>(hits) / static_cast<double>(n)};
}

LossTerms moco_loss(const Networks& net, std::span<const Tensor> params, const ViewPair& views,
                    const MoCoState& state, std::uint64_t seed) {
    require_rows(views.a, views.b, "moco");
    LossTerms terms;
    const Tensor q =
        l2_normalize(student_forward(net.student, params, views.a, stream_seed(seed, 1), terms.student_stats), 1);
    terms.keys = l2_normalize(teacher_output(net, views.b, stream_seed(seed, 101), terms.teacher_stats), 1);
    InfoNce nce = info_nce(q, terms.keys, state.keys(), state.temperature());
    terms.total = nce.loss;
    terms.unsup = nce.loss.item();
    terms.metric = nce.top1;
    return terms;
}

StepStats moco_step(Networks& net, Sgd& sgd, const ViewPair& views, MoCoState& state, const StepContext& ctx) {
    Tape tape;
    const std::vector<Tensor> params = net.student.bind(tape);
    LossTerms terms = moco_loss(net, params, views, state, ctx.seed);
    StepStats out = finish_step(&net, net.student, nullptr, sgd, tape, terms, ctx);
    state.push(terms.keys);
    return out;
}

void warm_fill(MoCoState& state, const Networks& net, const Tensor& data, Rng& rng) {
    constexpr std::size_t kChunk = 64;
    const std::size_t n = data.extent(0);
    std::uint64_t round = 0;
    while (!state.full()) {
        std::vector<std::size_t> rows(kChunk);
        for (std::size_t& r : rows) r = rng.index(n);
        std::vector<norm::NormStats> unused;
        const Tensor keys = l2_normalize(teacher_output(net, gather_rows(data, rows), ++round, unused), 1);
        const std::size_t take = std::min(kChunk, state.capacity() - state.size());
        state.push(slice(keys, 0, 0, take));
    }
}

Tensor byol_pair_loss(const Tensor& prediction, const Tensor& target) {
    require_rows(prediction, target, "byol");
    const Tensor diff = sub(l2_normalize(prediction, 1), l2_normalize(target, 1));
    return as_scalar(scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(prediction.extent(0))));
}

LossTerms byol_loss(const Networks& net, std::span<const Tensor> student_params,
                    std::span<const Tensor> predictor_params, const ViewPair& views, std::uint64_t seed) {
    if (!net.predictor) throw std::invalid_argument("byol: networks have no predictor");
    require_rows(views.a, views.b, "byol");
    LossTerms terms;
    auto online = [&](const Tensor& x, std::uint64_t stream) {
        const Tensor z = student_forward(net.student, student_params, x, stream_seed(seed, stream), terms.student_stats);
        return student_forward(*net.predictor, predictor_params, z, stream_seed(seed, stream + 50),
                               terms.predictor_stats);
    };
    const Tensor pa = online(views.a, 1);
    const Tensor pb = online(views.b, 2);
    const Tensor tb = teacher_output(net, views.b, stream_seed(seed, 101), terms.teacher_stats);
    const Tensor ta = teacher_output(net, views.a, stream_seed(seed, 102), terms.teacher_stats);
    terms.total = add(byol_pair_loss(pa, tb), byol_pair_loss(pb, ta));
    terms.unsup = terms.total.item();
    terms.metric = kNan;
    return terms;
}

StepStats byol_step(Networks& net, Sgd& sgd, const ViewPair& views, const StepContext& ctx) {
    if (!net.predictor) throw std::invalid_argument("byol: networks have no predictor");
    Tape tape;
    const std::vector<Tensor> sp = net.student.bind(tape);
    const std::vector<Tensor> pp = net.predictor->bind(tape);
    LossTerms terms = byol_loss(net, sp, pp, views, ctx.seed);
    return finish_step(&net, net.student, &*net.predictor, sgd, tape, terms, ctx);
}

}  // namespace eman
