#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "eman/checkpoint.hpp"
#include "eman/ops.hpp"
#include "eman/teacher.hpp"
#include "support.hpp"

using namespace eman;
using eman::test::random_tensor;
using eman::test::small_arch;
using norm::NormKind;
using norm::NormStats;
using norm::StatsFlavor;

namespace {

ModelState fresh(NormKind kind = NormKind::bn, std::uint64_t seed = 1) {
    Rng rng(seed);
    return ModelState::init(small_arch(kind), rng);
}

/// Student whose buffers hold something other than the initial proxies.
ModelState trained_student(std::uint64_t seed = 1) {
    ModelState s = fresh(NormKind::bn, seed);
    Rng rng(seed + 100);
    for (int i = 0; i < 3; ++i) {
        ForwardResult r = forward(s, s.constants(), random_tensor({8, 6}, rng, 2.0));
        update_proxies(s, r.batch_stats);
    }
    return s;
}

std::filesystem::path temp_path(const char* name) {
    return std::filesystem::temp_directory_path() / (std::string("eman_test_") + name);
}

}  // namespace

TEST_CASE("model layout and naming") {
    const ModelState m = fresh();
    std::vector<std::string> names;
    for (const Parameter& p : m.params()) names.push_back(p.name);
    CHECK(names == std::vector<std::string>{"fc0.weight", "fc0.bias", "norm0.gamma", "norm0.beta", "fc1.weight",
                                            "fc1.bias"});
    CHECK(m.param("fc0.weight").value.shape() == Shape{6, 8});
    CHECK(m.buffers().size() == 1);
    CHECK(m.buffers()[0].stats == NormStats::initial_proxy(4));
    CHECK(m.leaf_name(0) == "student.fc0.weight");
    CHECK_THROWS_AS(m.param("nope"), std::out_of_range);

    const ModelState ln = fresh(NormKind::ln);
    CHECK(ln.buffers().empty());
    CHECK(fresh(NormKind::none).params().size() == 4);

    Architecture bad = small_arch();
    bad.hidden = {7};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = small_arch(NormKind::eman);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = small_arch(NormKind::gn);
    bad.groups = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("initialization is seeded") {
    CHECK(fresh(NormKind::bn, 4).flatten() == fresh(NormKind::bn, 4).flatten());
    CHECK(fresh(NormKind::bn, 4).flatten() != fresh(NormKind::bn, 5).flatten());
}

TEST_CASE("forward shapes and statistics") {
    const ModelState m = fresh();
    Rng rng(2);
    const Tensor x = random_tensor({5, 6}, rng);
    const ForwardResult train = forward(m, m.constants(), x);
    CHECK(train.output.shape() == Shape{5, 3});
    CHECK(train.features.shape() == Shape{5, 8});
    CHECK(train.batch_stats.size() == 1);
    const ForwardResult eval = eval_forward(m, x);
    CHECK(eval.batch_stats.empty());
    CHECK_THROWS_AS(forward(m, m.constants(), random_tensor({5, 4}, rng)), ShapeError);

    // Running-statistics forward treats every row independently.
    const ForwardResult first = eval_forward(m, slice(x, 0, 0, 1));
    CHECK(first.output.bit_equal(slice(eval.output, 0, 0, 1)));
}

TEST_CASE("update_proxies blends every site") {
    ModelState m = fresh();
    Rng rng(3);
    const ForwardResult r = forward(m, m.constants(), random_tensor({8, 6}, rng));
    update_proxies(m, r.batch_stats);
    const NormStats expect = norm::proxy_update(NormStats::initial_proxy(4), r.batch_stats[0], 0.9);
    CHECK(m.buffers()[0].stats == expect);
    CHECK_THROWS_AS(update_proxies(m, {}), std::invalid_argument);
}

TEST_CASE("SGD with momentum and weight decay") {
    ModelState m = fresh(NormKind::none);
    const std::vector<double> w0 = m.params()[0].value.to_vector();
    Tape tape;
    const std::vector<Tensor> p = m.bind(tape);
    Rng rng(6);
    const Tensor x = random_tensor({4, 6}, rng);
    const GradientMap g = tape.backward(reshape(sum(forward(m, p, x).output), {1}));
    const std::vector<double> g0 = g.at("student.fc0.weight").to_vector();

    Sgd sgd(SgdConfig{0.9, 0.01});
    sgd.step(m, g, 0.1);
    std::vector<double> v(w0.size());
    for (std::size_t i = 0; i < w0.size(); ++i) {
        v[i] = g0[i] + 0.01 * w0[i];
        CHECK(m.params()[0].value[i] == doctest::Approx(w0[i] - 0.1 * v[i]).epsilon(1e-14));
    }
    const std::vector<double> w1 = m.params()[0].value.to_vector();
    sgd.step(m, g, 0.1);
    for (std::size_t i = 0; i < w0.size(); ++i) {
        const double v2 = 0.9 * v[i] + g0[i] + 0.01 * w1[i];
        CHECK(m.params()[0].value[i] == doctest::Approx(w1[i] - 0.1 * v2).epsilon(1e-14));
    }
}

TEST_CASE("clone_into_teacher") {
    ModelState student = trained_student();
    const ModelState teacher = clone_into_teacher(student);
    CHECK(teacher.is_teacher());
    CHECK(teacher.flatten() == student.flatten());
    for (const Buffer& b : teacher.buffers()) CHECK(b.stats.flavor == StatsFlavor::teacher);

    Rng rng(8);
    const Tensor x = random_tensor({5, 6}, rng);
    CHECK(teacher_forward(teacher, x).output.bit_equal(eval_forward(student, x).output));

    // Deep copy.
    student.set_param(0, Tensor::zeros(student.params()[0].value.shape()));
    CHECK(teacher.params()[0].value.bit_equal(clone_into_teacher(trained_student()).params()[0].value));

    Tape tape;
    CHECK_THROWS_AS(teacher.bind(tape), AutogradError);
    Sgd sgd;
    ModelState t = teacher;
    CHECK_THROWS_AS(sgd.step(t, GradientMap{}, 0.1), AutogradError);
}

TEST_CASE("ema_update examples") {
    ModelState student = fresh(NormKind::none);
    ModelState teacher = clone_into_teacher(student);
    const std::size_t n = student.params()[1].value.size();
    student.set_param(1, Tensor::full({n}, 0.0));
    teacher.set_param(1, Tensor::full({n}, 1.0));
    ema_update(teacher, student, 0.999);
    for (double v : teacher.params()[1].value.data()) CHECK(v == doctest::Approx(0.999).epsilon(1e-15));

    ema_update(teacher, student, 0.0);
    CHECK(teacher.flatten() == student.flatten());

    // Constant student s = 1 from t0 = 0 with m = 0.9: 0.1, then 0.19.
    student.set_param(1, Tensor::full({n}, 1.0));
    teacher.set_param(1, Tensor::full({n}, 0.0));
    ema_update(teacher, student, 0.9);
    CHECK(teacher.params()[1].value[0] == doctest::Approx(0.1).epsilon(1e-15));
    ema_update(teacher, student, 0.9);
    CHECK(teacher.params()[1].value[0] == doctest::Approx(0.19).epsilon(1e-15));

    CHECK_THROWS_AS(ema_update(teacher, student, 1.5), std::invalid_argument);
    ModelState not_teacher = student;
    CHECK_THROWS_AS(ema_update(not_teacher, student, 0.5), std::invalid_argument);
    ModelState other = clone_into_teacher(fresh(NormKind::ln));
    CHECK_THROWS_AS(ema_update(other, student, 0.5), std::invalid_argument);
}

TEST_CASE("ema_update blends buffers from the student's proxies") {
    const ModelState student = trained_student();
    ModelState teacher = clone_into_teacher(fresh());
    const NormStats before = teacher.buffers()[0].stats;
    ema_update(teacher, student, 0.5, 0.8);
    const NormStats& s = student.buffers()[0].stats;
    for (std::size_t c = 0; c < s.channels(); ++c) {
        CHECK(teacher.buffers()[0].stats.mu[c] == doctest::Approx(0.8 * before.mu[c] + 0.2 * s.mu[c]));
        CHECK(teacher.buffers()[0].stats.sigma2[c] == doctest::Approx(0.8 * before.sigma2[c] + 0.2 * s.sigma2[c]));
    }
    CHECK(teacher.buffers()[0].stats.flavor == StatsFlavor::teacher);
}

TEST_CASE("convex combination per step") {
    const ModelState student = trained_student(2);
    ModelState teacher = clone_into_teacher(fresh(NormKind::bn, 9));
    const std::vector<double> t0 = teacher.flatten();
    const std::vector<double> s = student.flatten();
    ema_update(teacher, student, 0.99);
    const std::vector<double> t1 = teacher.flatten();
    for (std::size_t i = 0; i < t0.size(); ++i) CHECK(std::abs(t1[i] - (0.99 * t0[i] + 0.01 * s[i])) < 1e-14);
}

TEST_CASE("momentum schedule examples") {
    TeacherConfig c;
    c.param_momentum = 0.999;
    CHECK(momentum_schedule(c, 0, 100) == 0.999);
    CHECK(momentum_schedule(c, 73, 100) == 0.999);
    c.param_momentum = 0.98;
    c.schedule = MomentumSchedule::cosine_to_one;
    CHECK(momentum_schedule(c, 0, 100) == doctest::Approx(0.98).epsilon(1e-15));
    CHECK(momentum_schedule(c, 100, 100) == 1.0);
    CHECK(momentum_schedule(c, 50, 100) == doctest::Approx(0.99).epsilon(1e-14));
    double prev = 0.0;
    for (std::size_t s = 0; s <= 100; ++s) {
        const double m = momentum_schedule(c, s, 100);
        CHECK(m >= prev);
        prev = m;
    }
    CHECK_THROWS_AS(momentum_schedule(c, 101, 100), std::invalid_argument);
    CHECK(parse_momentum_schedule("cosine_to_one") == MomentumSchedule::cosine_to_one);
    CHECK_THROWS_AS(parse_momentum_schedule("linear"), std::invalid_argument);
}

TEST_CASE("proxy-norm variants") {
    const ModelState student = trained_student(3);
    ModelState teacher = clone_into_teacher(fresh(NormKind::bn, 4));

    ModelState copy = teacher;
    proxy_variant_update(copy, student, StatsVariant::student_pn, 0.9, nullptr);
    ModelState via_ema = teacher;
    ema_update_buffers(via_ema, student, 0.0);
    CHECK(copy.buffers()[0].stats.mu == student.buffers()[0].stats.mu);
    CHECK(copy.buffers()[0].stats.sigma2 == student.buffers()[0].stats.sigma2);
    CHECK(copy.buffers()[0].stats == via_ema.buffers()[0].stats);
    CHECK(copy.params()[0].value.bit_equal(teacher.params()[0].value));

    Rng rng(12);
    const Tensor x = random_tensor({8, 6}, rng);
    TeacherConfig pn;
    pn.variant = StatsVariant::teacher_pn;
    const TeacherOutput out = teacher_forward(teacher, x, pn);
    REQUIRE(out.batch_stats.size() == 1);
    ModelState own = teacher;
    proxy_variant_update(own, student, StatsVariant::teacher_pn, 0.999, &out.batch_stats);
    const NormStats expect = norm::proxy_update(teacher.buffers()[0].stats, out.batch_stats[0], 0.999);
    CHECK(own.buffers()[0].stats.mu == expect.mu);
    CHECK(own.buffers()[0].stats.sigma2 == expect.sigma2);

    CHECK_THROWS_AS(proxy_variant_update(own, student, StatsVariant::teacher_pn, 0.9, nullptr), std::invalid_argument);
    CHECK_THROWS_AS(proxy_variant_update(own, student, StatsVariant::eman, 0.9, nullptr), std::invalid_argument);
}

TEST_CASE("teacher_update per variant") {
    const ModelState student = trained_student(5);
    const ModelState base = clone_into_teacher(fresh(NormKind::bn, 6));
    Rng rng(13);
    const Tensor x = random_tensor({8, 6}, rng);

    TeacherConfig cfg;
    cfg.param_momentum = 0.9;
    cfg.buffer_momentum = 0.5;
    ModelState eman = base;
    teacher_update(eman, student, cfg, 0, 10, {});
    ModelState ref = base;
    ema_update(ref, student, 0.9, 0.5);
    CHECK(eman.flatten() == ref.flatten());

    cfg.variant = StatsVariant::student_pn;
    ModelState spn = base;
    teacher_update(spn, student, cfg, 0, 10, {});
    CHECK(spn.buffers()[0].stats.mu == student.buffers()[0].stats.mu);

    cfg.variant = StatsVariant::teacher_pn;
    cfg.proxy_alpha = 0.9;
    ModelState tpn = base;
    CHECK_THROWS_AS(teacher_update(tpn, student, cfg, 0, 10, {}), std::invalid_argument);
    const TeacherOutput o1 = teacher_forward(base, x, cfg);
    std::vector<NormStats> two = o1.batch_stats;
    two.insert(two.end(), o1.batch_stats.begin(), o1.batch_stats.end());
    teacher_update(tpn, student, cfg, 0, 10, two);
    NormStats expect = norm::proxy_update(base.buffers()[0].stats, o1.batch_stats[0], 0.9);
    expect = norm::proxy_update(expect, o1.batch_stats[0], 0.9);
    CHECK(tpn.buffers()[0].stats.mu == expect.mu);
}

TEST_CASE("teacher_forward contracts") {
    const ModelState student = trained_student(7);
    const ModelState teacher = clone_into_teacher(student);
    Rng rng(14);
    const Tensor x = random_tensor({8, 6}, rng);
    const TeacherOutput all = teacher_forward(teacher, x);
    CHECK_FALSE(all.output.requires_grad());
    CHECK(all.batch_stats.empty());
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(teacher_forward(teacher, slice(x, 0, i, i + 1)).output.bit_equal(slice(all.output, 0, i, i + 1)));
    }
    CHECK_THROWS_AS(teacher_forward(student, x), std::invalid_argument);

    // A loss through the teacher output leaves no gradient on the teacher.
    Tape tape;
    const std::vector<Tensor> p = student.bind(tape);
    const Tensor y = forward(student, p, x).output;
    const GradientMap g = tape.backward(reshape(sum(mul(y, teacher_forward(teacher, x).output)), {1}));
    for (const auto& [name, grad] : g.named()) CHECK(name.rfind("student.", 0) == 0);

    TeacherConfig batch;
    batch.variant = StatsVariant::batch_bn;
    CHECK(teacher_forward(teacher, x, batch).batch_stats.size() == 1);
    batch.batch_kind = NormKind::ln;
    CHECK_THROWS_AS(batch.validate(), std::invalid_argument);
}

TEST_CASE("variant names round-trip") {
    for (StatsVariant v : {StatsVariant::eman, StatsVariant::teacher_pn, StatsVariant::student_pn, StatsVariant::batch_bn}) {
        CHECK(parse_stats_variant(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_stats_variant("bn"), std::invalid_argument);
}

TEST_CASE("checkpoint round trip") {
    const ModelState student = trained_student(8);
    const ModelState teacher = clone_into_teacher(student);
    const auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(path, teacher);
    ModelState loaded = clone_into_teacher(fresh(NormKind::bn, 99));
    load_checkpoint(path, loaded);
    CHECK(loaded.flatten() == teacher.flatten());
    CHECK(loaded.buffers()[0].stats.flavor == StatsFlavor::teacher);

    const std::vector<CheckpointRecord> records = read_records(path);
    CHECK(records.front().name == "param.fc0.weight");
    CHECK(records.back().name == "buffer.norm0.sigma2");
    CHECK(records.size() == student.params().size() + 2 * student.buffers().size());

    ModelState wrong = fresh(NormKind::ln);
    CHECK_THROWS_AS(load_checkpoint(path, wrong), CheckpointError);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint byte layout") {
    const auto path = temp_path("layout.ckpt");
    write_records(path, {{"a", Tensor({2}, {1.0, -2.0})}});
    std::ifstream in(path, std::ios::binary);
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    // magic 4 + version 4 + count 8 + name len 4 + "a" 1 + rank 4 + extent 8 + payload 16
    REQUIRE(bytes.size() == 49);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "EMCK");
    CHECK(bytes[4] == 1);
    CHECK(bytes[8] == 1);
    CHECK(bytes[16] == 1);
    CHECK(bytes[20] == 'a');
    CHECK(bytes[21] == 1);
    CHECK(bytes[25] == 2);
    // 1.0 little-endian: 00 .. 00 f0 3f
    CHECK(bytes[33 + 6] == 0xf0);
    CHECK(bytes[33 + 7] == 0x3f);

    auto write = [&](std::size_t keep, const char* name) {
        const auto p = temp_path(name);
        std::ofstream out(p, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(keep));
        return p;
    };
    CHECK_THROWS_AS(read_records(write(40, "trunc.ckpt")), CheckpointError);
    std::vector<unsigned char> bad = bytes;
    bad[0] = 'X';
    {
        std::ofstream out(temp_path("magic.ckpt"), std::ios::binary);
        out.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
    }
    CHECK_THROWS_AS(read_records(temp_path("magic.ckpt")), CheckpointError);
    CHECK_THROWS_AS(read_records(temp_path("missing.ckpt")), CheckpointError);
    for (const char* f : {"layout.ckpt", "trunc.ckpt", "magic.ckpt"}) std::filesystem::remove(temp_path(f));
}
