#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "eman/frameworks.hpp"
#include "eman/gradcheck.hpp"
#include "eman/ops.hpp"
#include "support.hpp"

using namespace eman;

namespace {

Tensor unit_rows(const Tensor& t) { return l2_normalize(t, 1); }

/// Parameters of `model` as constants with entry `index` replaced by `value`.
std::vector<Tensor> with_param(const ModelState& model, std::size_t index, const Tensor& value) {
    std::vector<Tensor> p = model.constants();
    p[index] = value;
    return p;
}

Networks make_nets(norm::NormKind kind, std::size_t in, std::size_t out, std::uint64_t seed) {
    Rng rng(seed);
    TeacherConfig tc;
    tc.param_momentum = 0.9;
    tc.buffer_momentum = 0.9;
    return Networks::create(test::small_arch(kind, in, out), tc, rng);
}

Batch labeled_batch(std::size_t n, std::size_t dim, std::size_t classes, Rng& rng) {
    Batch b{test::random_tensor({n, dim}, rng), std::vector<int>(n)};
    for (int& y : b.y) y = static_cast<int>(rng.index(classes));
    return b;
}

}  // namespace

TEST_CASE("framework names") {
    CHECK(parse_framework("fixmatch") == Framework::fixmatch);
    CHECK(to_string(Framework::mean_teacher) == "mean_teacher");
    CHECK_THROWS_AS(parse_framework("simclr"), std::invalid_argument);
    CHECK_FALSE(uses_ema_teacher(Framework::supervised));
    CHECK(uses_ema_teacher(Framework::byol));
    CHECK(parse_fixmatch_mode("concat") == FixMatchMode::concat);
    CHECK_THROWS_AS(parse_fixmatch_mode("mixed"), std::invalid_argument);
}

TEST_CASE("InfoNCE closed form") {
    // q = k, and every queue key at cosine c with q: loss = ln(1 + K exp((c - 1) / t)).
    const double t = 0.2;
    const Tensor q({1, 2}, {1.0, 0.0});
    for (auto [c, k] : {std::pair{0.0, 3u}, {-1.0, 5u}, {0.5, 1u}}) {
        std::vector<double> rows;
        const double s = std::sqrt(1.0 - c * c);
        for (std::size_t i = 0; i < k; ++i) {
            rows.push_back(c);
            rows.push_back(i % 2 ? s : -s);
        }
        const InfoNce r = info_nce(q, q, Tensor({k, 2}, rows), t);
        CHECK(r.loss.item() == doctest::Approx(std::log1p(static_cast<double>(k) * std::exp((c - 1.0) / t))));
    }
    // No queue: single logit, zero loss, perfect top-1.
    const InfoNce alone = info_nce(q, q, Tensor::zeros({0, 2}), t);
    CHECK(alone.loss.item() == doctest::Approx(0.0));
    CHECK(alone.top1 == 1.0);
    CHECK_THROWS_AS(info_nce(q, q, Tensor::zeros({0, 2}), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(info_nce(q, q, Tensor({1, 3}, {1.0, 0.0, 0.0}), t), ShapeError);
}

TEST_CASE("InfoNCE never drops below its antipodal bound") {
    Rng rng(7);
    const double t = 0.2;
    const std::size_t k = 6;
    const double bound = std::log1p(static_cast<double>(k) * std::exp(-2.0 / t));
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor q = unit_rows(test::random_tensor({4, 3}, rng));
        const Tensor key = unit_rows(test::random_tensor({4, 3}, rng));
        const Tensor queue = unit_rows(test::random_tensor({k, 3}, rng));
        const InfoNce r = info_nce(q, key, queue, t);
        CHECK(r.loss.item() >= bound);
        CHECK(r.top1 >= 0.0);
        CHECK(r.top1 <= 1.0);
    }
}

TEST_CASE("BYOL pair loss") {
    const Tensor p({1, 2}, {3.0, 0.0});
    const Tensor z({1, 2}, {1.0, 1.0});
    CHECK(byol_pair_loss(p, z).item() == doctest::Approx(2.0 - 2.0 * std::cos(M_PI / 4)));
    CHECK(byol_pair_loss(p, p).item() == doctest::Approx(0.0));
    CHECK(byol_pair_loss(p, scale(p, -2.0)).item() == doctest::Approx(4.0));
    CHECK_THROWS_AS(byol_pair_loss(p, Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0})), ShapeError);
}

TEST_CASE("pseudo labels") {
    const Tensor probs({3, 3}, {0.96, 0.02, 0.02, 0.3, 0.4, 0.3, 0.01, 0.01, 0.98});
    const PseudoLabels pl = pseudo_label(probs, 0.95);
    CHECK(pl.labels == std::vector<int>{0, 1, 2});
    CHECK(pl.weights == std::vector<double>{1.0, 0.0, 1.0});
    CHECK(pl.accepted == 2);
    CHECK(pl.accept_fraction == doctest::Approx(2.0 / 3.0));
    CHECK(pseudo_label(probs, 0.96).accepted == 2);
    CHECK(pseudo_label(probs, 0.97).accepted == 1);

    Rng rng(3);
    const Tensor random = softmax(test::random_tensor({200, 4}, rng, 3.0));
    std::size_t last = 201;
    for (double tau = 0.3; tau < 1.0; tau += 0.05) {
        const std::size_t a = pseudo_label(random, tau).accepted;
        CHECK(a <= last);
        last = a;
    }
    CHECK_THROWS_AS(pseudo_label(Tensor({3}, {0.2, 0.3, 0.5}), 0.5), ShapeError);
}

TEST_CASE("FixMatch config validation") {
    FixMatchConfig c;
    CHECK_NOTHROW(c.validate());
    c.tau = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.unlabeled_batch = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = {};
    c.lambda_unsup = -1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("FixMatch with nothing accepted reduces to the supervised term") {
    Networks net = make_nets(norm::NormKind::bn, 6, 3, 1);
    Rng rng(2);
    const Batch lb = labeled_batch(8, 6, 3, rng);
    const ViewPair u{test::random_tensor({10, 6}, rng), test::random_tensor({10, 6}, rng)};
    FixMatchConfig cfg;
    cfg.tau = 0.999999;
    const LossTerms t = fixmatch_loss(net, net.student.constants(), lb, u, cfg);
    CHECK(t.metric == 0.0);
    CHECK(t.unsup == 0.0);
    CHECK(t.total.item() == doctest::Approx(t.sup));

    cfg.tau = 0.01;
    cfg.mode = FixMatchMode::concat;
    const LossTerms all = fixmatch_loss(net, net.student.constants(), lb, u, cfg);
    CHECK(all.metric == 1.0);
    CHECK(all.total.item() == doctest::Approx(all.sup + cfg.lambda_unsup * all.unsup));
    CHECK_THROWS_AS(fixmatch_loss(net, net.student.constants(), lb, ViewPair{u.a, slice(u.b, 0, 0, 5)}, cfg),
                    ShapeError);
}

TEST_CASE("mean teacher at zero weight equals supervised") {
    Networks net = make_nets(norm::NormKind::bn, 6, 3, 4);
    Rng rng(5);
    const Batch lb = labeled_batch(8, 6, 3, rng);
    const ViewPair u{test::random_tensor({8, 6}, rng), test::random_tensor({8, 6}, rng)};

    Tape t1, t2;
    const LossTerms mt = mean_teacher_loss(net, net.student.bind(t1), lb, u, 0.0);
    const LossTerms sup = supervised_loss(net.student, net.student.bind(t2), lb);
    CHECK(mt.total.item() == sup.total.item());
    const GradientMap g1 = t1.backward(mt.total), g2 = t2.backward(sup.total);
    for (const auto& [name, g] : g1.named()) CHECK(g.bit_equal(g2.at(name)));
    CHECK_THROWS_AS(mean_teacher_loss(net, net.student.constants(), lb, u, -1.0), std::invalid_argument);
}

TEST_CASE("mean teacher consistency vanishes for a teacher identical to its student") {
    // LN has no batch dependence, so the fresh teacher computes the student's function.
    Networks net = make_nets(norm::NormKind::ln, 6, 3, 6);
    Rng rng(7);
    const Batch lb = labeled_batch(4, 6, 3, rng);
    const Tensor x = test::random_tensor({8, 6}, rng);
    const LossTerms t = mean_teacher_loss(net, net.student.constants(), lb, ViewPair{x, x}, 5.0);
    CHECK(t.unsup == doctest::Approx(0.0).epsilon(1e-24));
    CHECK(t.total.item() == doctest::Approx(t.sup));
}

TEST_CASE("MoCo queue is a FIFO of unit keys") {
    MoCoState q(4, 2, 0.2);
    CHECK(q.size() == 0);
    CHECK(q.keys().shape() == Shape{0, 2});
    const Tensor a({1, 2}, {1.0, 0.0}), b({1, 2}, {0.0, 1.0});
    q.push(a);
    q.push(b);
    CHECK(q.keys().bit_equal(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0})));
    // c, d, e, f evict a and b.
    const double s = std::sqrt(0.5);
    q.push(Tensor({4, 2}, {-1.0, 0.0, 0.0, -1.0, s, s, -s, s}));
    CHECK(q.full());
    CHECK(q.keys().bit_equal(Tensor({4, 2}, {-1.0, 0.0, 0.0, -1.0, s, s, -s, s})));
    q.push(Tensor({1, 2}, {3.0, 4.0}));
    CHECK(q.keys().at(3, 0) == doctest::Approx(0.6));
    CHECK(q.keys().at(3, 1) == doctest::Approx(0.8));
    CHECK(q.keys().at(0, 0) == 0.0);

    const MoCoState copy = queue_push(q, Tensor({1, 2}, {0.0, 1.0}));
    CHECK(copy.keys().at(3, 1) == 1.0);
    CHECK(q.keys().at(3, 1) == doctest::Approx(0.8));

    MoCoState strict(2, 2, 0.2, false);
    CHECK_THROWS_AS(strict.push(Tensor({1, 2}, {2.0, 0.0})), std::invalid_argument);
    CHECK_THROWS_AS(q.push(Tensor({1, 2}, {0.0, 0.0})), std::invalid_argument);
    CHECK_THROWS_AS(q.push(Tensor({1, 3}, {1.0, 0.0, 0.0})), ShapeError);
    CHECK_THROWS_AS(q.push(Tensor::zeros({5, 2})), std::invalid_argument);
    CHECK_THROWS_AS(MoCoState(0, 2), std::invalid_argument);
}

TEST_CASE("gradients never reach the teacher") {
    Rng rng(9);
    const Batch lb = labeled_batch(8, 6, 3, rng);
    const ViewPair u{test::random_tensor({8, 6}, rng), test::random_tensor({8, 6}, rng)};
    std::vector<std::string> names;
    StepHooks hooks;
    hooks.on_gradients = [&](const GradientMap& g) {
        for (const auto& [name, _] : g.named()) names.push_back(name);
    };
    StepContext ctx;
    ctx.lr = 0.05;
    ctx.hooks = &hooks;

    auto audit = [&](const std::string& expected_prefix_a, const std::string& expected_prefix_b = "student.") {
        REQUIRE_FALSE(names.empty());
        for (const std::string& n : names) {
            CAPTURE(n);
            CHECK(n.find("teacher") == std::string::npos);
            CHECK((n.rfind(expected_prefix_a, 0) == 0 || n.rfind(expected_prefix_b, 0) == 0));
        }
        names.clear();
    };

    Networks mt = make_nets(norm::NormKind::bn, 6, 3, 1);
    Sgd sgd_mt;
    mean_teacher_step(mt, sgd_mt, lb, u, 1.0, ctx);
    audit("student.");

    Networks fm = make_nets(norm::NormKind::bn, 6, 3, 2);
    FixMatchConfig fc;
    fc.tau = 0.2;
    Sgd sgd_fm;
    fixmatch_step(fm, sgd_fm, lb, u, fc, ctx);
    audit("student.");

    Networks mc = make_nets(norm::NormKind::bn, 6, 4, 3);
    MoCoState state(16, 4);
    Rng fill(1);
    warm_fill(state, mc, u.a, fill);
    CHECK(state.full());
    Sgd sgd_mc;
    moco_step(mc, sgd_mc, u, state, ctx);
    audit("student.");
    // One optimizer cannot serve two differently shaped students.
    CHECK_THROWS_AS(moco_step(mc, sgd_mt, u, state, ctx), ShapeError);
    names.clear();

    Rng init(4);
    Architecture pred = test::small_arch(norm::NormKind::bn, 3, 3);
    Networks by = Networks::create(test::small_arch(norm::NormKind::bn, 6, 3), TeacherConfig{}, init, pred);
    Sgd sgd_by;
    byol_step(by, sgd_by, u, ctx);
    audit("student.", "predictor.");
}

TEST_CASE("framework losses pass finite-difference checks") {
    Rng rng(12);
    const Batch lb = labeled_batch(6, 6, 3, rng);
    const ViewPair u{test::random_tensor({6, 6}, rng), test::random_tensor({6, 6}, rng)};
    Networks net = make_nets(norm::NormKind::ln, 6, 3, 13);
    const std::size_t w = net.student.param_index("fc1.weight");
    const Tensor w0 = net.student.params()[w].value;

    CHECK(finite_difference_check(
              [&](const Tensor& p) { return supervised_loss(net.student, with_param(net.student, w, p), lb).total; },
              w0) < 1e-4);
    CHECK(finite_difference_check(
              [&](const Tensor& p) {
                  return mean_teacher_loss(net, with_param(net.student, w, p), lb, u, 3.0).total;
              },
              w0) < 1e-4);
    FixMatchConfig fc;
    fc.tau = 0.3;
    CHECK(finite_difference_check(
              [&](const Tensor& p) { return fixmatch_loss(net, with_param(net.student, w, p), lb, u, fc).total; },
              w0) < 1e-4);

    MoCoState state(8, 3);
    state.push(unit_rows(test::random_tensor({8, 3}, rng)));
    CHECK(finite_difference_check(
              [&](const Tensor& p) { return moco_loss(net, with_param(net.student, w, p), u, state).total; }, w0) <
          1e-4);

    Rng init(14);
    Networks by = Networks::create(test::small_arch(norm::NormKind::ln, 6, 3), TeacherConfig{}, init,
                                   test::small_arch(norm::NormKind::ln, 3, 3));
    const ModelState& pred = *by.predictor;
    const std::size_t pw = pred.param_index("fc0.weight");
    CHECK(finite_difference_check(
              [&](const Tensor& p) {
                  return byol_loss(by, by.student.constants(), with_param(pred, pw, p), u).total;
              },
              pred.params()[pw].value) < 1e-4);
}

TEST_CASE("steps report their terms") {
    Networks net = make_nets(norm::NormKind::bn, 6, 3, 20);
    Rng rng(21);
    const Batch lb = labeled_batch(8, 6, 3, rng);
    Sgd sgd;
    StepContext ctx;
    ctx.total_steps = 10;
    const StepStats s = supervised_step(net.student, sgd, lb, ctx);
    CHECK(std::isnan(s.metric));
    CHECK(std::isnan(s.momentum));
    CHECK(s.loss == s.sup_loss);
    const ViewPair u{test::random_tensor({8, 6}, rng), test::random_tensor({8, 6}, rng)};
    const StepStats m = mean_teacher_step(net, sgd, lb, u, 2.0, ctx);
    CHECK(m.momentum == 0.9);
    CHECK(m.loss == doctest::Approx(m.sup_loss + 2.0 * m.unsup_loss));
}
