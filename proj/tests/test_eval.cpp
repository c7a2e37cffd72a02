#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "eman/eval.hpp"
#include "eman/ops.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace eman;
using test::brute_knn;
using test::table;

namespace {

/// Householder reflection applied to every row.
Tensor reflect(const Tensor& e, Rng& rng) {
    const std::size_t d = e.extent(1);
    std::vector<double> v(d);
    double nv = 0.0;
    for (double& x : v) {
        x = rng.normal();
        nv += x * x;
    }
    std::vector<double> out = e.to_vector();
    for (std::size_t i = 0; i < e.extent(0); ++i) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += out[i * d + k] * v[k];
        for (std::size_t k = 0; k < d; ++k) out[i * d + k] -= 2.0 * dot / nv * v[k];
    }
    return Tensor(e.shape(), std::move(out));
}

}  // namespace

TEST_CASE("knn agrees with a brute-force oracle") {
    Rng rng(3);
    const Tensor db = test::random_tensor({60, 5}, rng);
    const Tensor q = test::random_tensor({25, 5}, rng);
    std::vector<int> dl(60), ql(25);
    for (int& l : dl) l = static_cast<int>(rng.index(4));
    for (int& l : ql) l = static_cast<int>(rng.index(4));
    const EmbeddingTable train = table(db, dl), queries = table(q, ql);
    for (std::size_t k : {1u, 3u, 7u, 20u, 60u}) {
        CAPTURE(k);
        CHECK(knn_predict(train, queries, k) == brute_knn(train, queries, k));
    }
}

TEST_CASE("knn examples") {
    // Three training rows on the axes; the query sits nearest row 1.
    const EmbeddingTable train = table(Tensor({3, 2}, {1.0, 0.0, 0.0, 1.0, -1.0, 0.0}), {0, 1, 0});
    const EmbeddingTable q = table(Tensor({1, 2}, {0.1, 1.0}), {1});
    CHECK(knn_predict(train, q, 1) == std::vector<int>{1});
    CHECK(knn_predict(train, q, 3) == std::vector<int>{0});
    CHECK(knn_classify(train, q, 1) == 1.0);
    CHECK(knn_classify(train, train, 1) == 1.0);
    // Vote tie at k=2 goes to the nearer neighbor.
    CHECK(knn_predict(train, q, 2) == std::vector<int>{1});
    CHECK_THROWS_AS(knn_predict(train, q, 0), std::invalid_argument);
    CHECK_THROWS_AS(knn_predict(train, q, 4), std::invalid_argument);
    CHECK_THROWS_AS(knn_predict(train, table(Tensor({1, 3}, {1.0, 2.0, 3.0}), {0}), 1), ShapeError);
}

TEST_CASE("retrieval metrics") {
    Rng rng(5);
    const Tensor db = test::random_tensor({40, 4}, rng);
    const Tensor q = test::random_tensor({12, 4}, rng);
    std::vector<int> dl(40), ql(12);
    for (int& l : dl) l = static_cast<int>(rng.index(3));
    for (int& l : ql) l = static_cast<int>(rng.index(3));
    for (std::size_t top : {1u, 5u, 40u}) {
        CAPTURE(top);
        const test::BruteRetrieval expect = test::brute_retrieval(table(db, dl), table(q, ql), top);
        const RetrievalResult got = retrieval_metrics(table(db, dl), table(q, ql), top);
        CHECK(got.recall == doctest::Approx(expect.recall));
        CHECK(got.map == doctest::Approx(expect.map));
    }

    // Perfect ranking: relevant items all lead.
    const EmbeddingTable perfect_db = table(Tensor({4, 2}, {1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9}), {0, 0, 1, 1});
    const EmbeddingTable perfect_q = table(Tensor({2, 2}, {1.0, 0.05, 0.05, 1.0}), {0, 1});
    const RetrievalResult perfect = retrieval_metrics(perfect_db, perfect_q, 4);
    CHECK(perfect.map == 1.0);
    CHECK(perfect.recall == 1.0);

    // Relevant item outside the cut-off scores zero.
    const RetrievalResult none = retrieval_metrics(perfect_db, table(Tensor({1, 2}, {1.0, 0.0}), {1}), 2);
    CHECK(none.map == 0.0);
    CHECK(none.recall == 0.0);

    // One hit at rank 2: AP = 1/2.
    const EmbeddingTable db2 = table(Tensor({3, 2}, {1.0, 0.0, 0.8, 0.6, 0.0, 1.0}), {0, 1, 0});
    const RetrievalResult half = retrieval_metrics(db2, table(Tensor({1, 2}, {1.0, 0.0}), {1}), 3);
    CHECK(half.map == doctest::Approx(0.5));

    const RetrievalResult skip = retrieval_metrics(db2, table(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), {0, 7}), 3);
    CHECK(skip.skipped == 1);
    CHECK(skip.evaluated == 1);
}

TEST_CASE("cosine metrics are rotation invariant") {
    Rng rng(9);
    const Tensor db = test::random_tensor({30, 6}, rng);
    const Tensor q = test::random_tensor({10, 6}, rng);
    std::vector<int> dl(30), ql(10);
    for (int& l : dl) l = static_cast<int>(rng.index(3));
    for (int& l : ql) l = static_cast<int>(rng.index(3));
    Rng r1(1), r2(1);
    const EmbeddingTable rdb = table(reflect(db, r1), dl), rq = table(reflect(q, r2), ql);
    CHECK(knn_predict(table(db, dl), table(q, ql), 5) == knn_predict(rdb, rq, 5));
    CHECK(retrieval_metrics(table(db, dl), table(q, ql), 10).map ==
          doctest::Approx(retrieval_metrics(rdb, rq, 10).map).epsilon(1e-12));
}

TEST_CASE("linear probe") {
    const TrainVal split = split_train_val(test::blobs(280, 4, 5, 0.3, 1), 0.3, 0);
    const Dataset &tr = split.train, &te = split.val;
    LinearProbeConfig cfg;
    cfg.epochs = 20;
    const LinearProbeResult sep = linear_probe(table(tr.x, tr.y), table(te.x, te.y), cfg);
    CHECK(sep.best_accuracy == 1.0);
    CHECK(sep.accuracy_per_lr.size() == 3);

    Rng rng(4);
    const Tensor noise_tr = test::random_tensor({400, 5}, rng), noise_te = test::random_tensor({400, 5}, rng);
    std::vector<int> ltr(400), lte(400);
    for (int& l : ltr) l = static_cast<int>(rng.index(4));
    for (int& l : lte) l = static_cast<int>(rng.index(4));
    const LinearProbeResult chance = linear_probe(table(noise_tr, ltr), table(noise_te, lte), cfg);
    CHECK(chance.best_accuracy < 0.35);

    cfg.lr_grid.clear();
    CHECK_THROWS_AS(linear_probe(table(tr.x, tr.y), table(te.x, te.y), cfg), std::invalid_argument);
}

TEST_CASE("dependency probe separates batch-coupled normalizations") {
    Rng init(2);
    Rng data(5);
    const Tensor batch = test::random_tensor({16, 6}, data);
    auto probe = [&](const ModelState& m, StatsSource s, const Tensor& b) {
        Rng rng(11);
        return dependency_probe(m, b, 8, rng, s);
    };
    for (auto kind : {norm::NormKind::ln, norm::NormKind::in, norm::NormKind::gn, norm::NormKind::none}) {
        CAPTURE(norm::to_string(kind));
        const ModelState m = ModelState::init(test::small_arch(kind), init);
        CHECK(probe(m, StatsSource::batch, batch) == 0.0);
    }
    const ModelState bn = ModelState::init(test::small_arch(norm::NormKind::bn), init);
    CHECK(probe(bn, StatsSource::batch, batch) > 1e-3);
    CHECK(probe(bn, StatsSource::running, batch) == 0.0);
    CHECK(probe(bn.as_teacher(), StatsSource::running, batch) == 0.0);
    CHECK(probe(bn, StatsSource::batch, slice(batch, 0, 0, 1)) == 0.0);
    CHECK_THROWS_AS(probe(bn, StatsSource::batch, Tensor({3}, {1.0, 2.0, 3.0})), ShapeError);
}

TEST_CASE("embeddings do not depend on extraction batch size") {
    Rng init(6);
    ModelState m = ModelState::init(test::small_arch(norm::NormKind::bn), init);
    const Dataset d = test::blobs(37, 3, 6, 1.0, 2);
    const EmbeddingTable a = extract_embeddings(m, d, EmbeddingSource::features, 1);
    const EmbeddingTable b = extract_embeddings(m, d, EmbeddingSource::features, 64);
    const EmbeddingTable c = extract_embeddings(m, d, EmbeddingSource::output, 5);
    CHECK(std::equal(a.embeddings.data().begin(), a.embeddings.data().end(), b.embeddings.data().begin(),
                     [](double x, double y) { return std::abs(x - y) <= 1e-12 * (1.0 + std::abs(x)); }));
    CHECK(a.embeddings.shape() == Shape{37, 8});
    CHECK(c.embeddings.shape() == Shape{37, 3});
    CHECK(a.labels == d.y);
    CHECK_THROWS_AS(extract_embeddings(m, d, EmbeddingSource::features, 0), std::invalid_argument);
}

TEST_CASE("eval reports") {
    EvalReport r{"knn_acc", 0.875, {{"k", "20"}}, "val", 3};
    CHECK_NOTHROW(r.validate());
    EvalReport bad = r;
    bad.value = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.value = std::nan("");
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = r;
    bad.metric.clear();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_NOTHROW(EvalReport{"loss", 3.2, {}, "train", 0}.validate());

    const auto p = std::filesystem::temp_directory_path() / "eman_eval_reports.jsonl";
    const std::vector<EvalReport> rs{r, EvalReport{"map", 0.1 + 0.2, {}, "test", 18446744073709551615ull}};
    write_eval_reports(p, rs);
    const auto back = read_eval_reports(p);
    REQUIRE(back.size() == 2);
    CHECK(back[0].metric == "knn_acc");
    CHECK(back[0].params == r.params);
    CHECK(back[1].value == 0.1 + 0.2);
    CHECK(back[1].seed == 18446744073709551615ull);
    std::ifstream in(p);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 2);
}
