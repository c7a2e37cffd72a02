#include "eman/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>
#include <json.hpp>

#include "eman/autograd.hpp"
#include "eman/ops.hpp"
#include "eman/simd/kernels.hpp"

namespace eman {

void EmbeddingTable::validate() const {
    if (embeddings.rank() != 2 || embeddings.extent(0) != labels.size()) {
        throw ShapeError(fmt::format("embedding table: {} rows for {} labels", to_string(embeddings.shape()),
                                     labels.size()));
    }
    if (!ids.empty() && ids.size() != labels.size()) throw ShapeError("embedding table: id count mismatch");
    for (double v : embeddings.data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("embedding table: non-finite embedding");
    }
    for (int l : labels) {
        if (l < 0) throw std::invalid_argument(fmt::format("embedding table: negative label {}", l));
    }
}

EmbeddingTable extract_embeddings(const ModelState& model, const Dataset& data, EmbeddingSource source,
                                  std::size_t batch_size) {
    if (batch_size == 0) throw std::invalid_argument("extract_embeddings: batch_size must be >= 1");
    std::vector<Tensor> parts;
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
        const std::size_t end = std::min(data.size(), begin + batch_size);
        const ForwardResult r = eval_forward(model, slice(data.x, 0, begin, end));
        parts.push_back(source == EmbeddingSource::features ? r.features : r.output);
    }
    EmbeddingTable t;
    t.embeddings = parts.empty() ? Tensor::zeros({0, 1}) : concat(parts, 0);
    t.labels = data.y;
    t.ids.resize(data.size());
    std::iota(t.ids.begin(), t.ids.end(), std::size_t{0});
    return t;
}

namespace {

void require_nonempty(const EmbeddingTable& t, std::string_view op, std::string_view which) {
    if (t.size() == 0) throw std::invalid_argument(fmt::format("{}: empty {} table", op, which));
    t.validate();
}

/// Cosine similarity matrix [queries, db].
std::vector<double> similarities(const EmbeddingTable& db, const EmbeddingTable& queries, std::string_view op) {
    if (db.embeddings.extent(1) != queries.embeddings.extent(1)) {
        throw ShapeError(fmt::format("{}: embedding widths {} vs {}", op, db.embeddings.extent(1),
                                     queries.embeddings.extent(1)));
    }
    const Tensor a = l2_normalize(queries.embeddings.detach(), 1);
    const Tensor b = l2_normalize(db.embeddings.detach(), 1);
    const std::size_t nq = a.extent(0), nd = b.extent(0), d = a.extent(1);
    std::vector<double> sims(nq * nd);
    simd::kernels().gemm_nt(a.raw(), b.raw(), sims.data(), nq, nd, d);
    return sims;
}

/// Database indices sorted by similarity (desc), lower index first on ties.
std::vector<std::size_t> ranking(const double* sims, std::size_t nd, std::size_t keep) {
    std::vector<std::size_t> order(nd);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto closer = [&](std::size_t i, std::size_t j) { return sims[i] > sims[j] || (sims[i] == sims[j] && i < j); };
    keep = std::min(keep, nd);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), closer);
    order.resize(keep);
    return order;
}

}  // namespace

std::vector<int> knn_predict(const EmbeddingTable& train, const EmbeddingTable& queries, std::size_t k) {
    require_nonempty(train, "knn_classify", "train");
    require_nonempty(queries, "knn_classify", "query");
    if (k == 0 || k > train.size()) {
        throw std::invalid_argument(fmt::format("knn_classify: k = {} outside [1, {}]", k, train.size()));
    }
    const std::size_t nd = train.size();
    const std::vector<double> sims = similarities(train, queries, "knn_classify");
    const int classes = *std::max_element(train.labels.begin(), train.labels.end()) + 1;
    std::vector<int> predictions(queries.size());
    std::vector<std::size_t> votes(static_cast<std::size_t>(classes));
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const std::vector<std::size_t> nearest = ranking(sims.data() + q * nd, nd, k);
        std::fill(votes.begin(), votes.end(), 0);
        for (std::size_t i : nearest) ++votes[static_cast<std::size_t>(train.labels[i])];
        const std::size_t top = *std::max_element(votes.begin(), votes.end());
        for (std::size_t i : nearest) {
            if (votes[static_cast<std::size_t>(train.labels[i])] == top) {
                predictions[q] = train.labels[i];
                break;
            }
        }
    }
    return predictions;
}

double knn_classify(const EmbeddingTable& train, const EmbeddingTable& queries, std::size_t k) {
    const std::vector<int> pred = knn_predict(train, queries, k);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == queries.labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

LinearProbeResult linear_probe(const EmbeddingTable& train, const EmbeddingTable& test,
                               const LinearProbeConfig& config) {
    require_nonempty(train, "linear_probe", "train");
    require_nonempty(test, "linear_probe", "test");
    if (config.lr_grid.empty() || config.batch_size == 0) {
        throw std::invalid_argument("linear_probe: empty lr grid or zero batch size");
    }
    const std::size_t d = train.embeddings.extent(1);
    if (test.embeddings.extent(1) != d) throw ShapeError("linear_probe: embedding widths differ");
    const int max_train = *std::max_element(train.labels.begin(), train.labels.end());
    const int max_test = *std::max_element(test.labels.begin(), test.labels.end());
    const auto classes = static_cast<std::size_t>(std::max(max_train, max_test) + 1);

    // Standardize with train moments so one lr grid suits any embedding scale.
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    const std::size_t n = train.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) mu[j] += train.embeddings.at(i, j) / static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = train.embeddings.at(i, j) - mu[j];
            sd[j] += c * c / static_cast<double>(n);
        }
    }
    for (double& s : sd) s = std::sqrt(s) + 1e-8;
    auto standardize = [&](const Tensor& e) {
        std::vector<double> out = e.to_vector();
        for (std::size_t i = 0; i < e.extent(0); ++i) {
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (out[i * d + j] - mu[j]) / sd[j];
        }
        return Tensor(e.shape(), std::move(out));
    };
    const Tensor xtr = standardize(train.embeddings);
    const Tensor xte = standardize(test.embeddings);

    LinearProbeResult result;
    for (double lr : config.lr_grid) {
        Rng rng(config.seed);
        Tensor w = Tensor::zeros({d, classes});
        Tensor b = Tensor::zeros({classes});
        std::vector<double> vw(d * classes, 0.0), vb(classes, 0.0);
        for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
            const std::vector<std::size_t> perm = rng.permutation(n);
            for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
                const std::size_t end = std::min(n, begin + config.batch_size);
                const std::span<const std::size_t> idx(perm.data() + begin, end - begin);
                std::vector<int> labels;
                for (std::size_t i : idx) labels.push_back(train.labels[i]);
                Tape tape;
                const Tensor wl = tape.leaf(w, "w");
                const Tensor bl = tape.leaf(b, "b");
                const Tensor loss = cross_entropy(add(matmul(gather_rows(xtr, idx), wl), bl), labels);
                const GradientMap g = tape.backward(loss);
                auto apply = [&](Tensor& p, std::vector<double>& v, const Tensor& grad) {
                    std::vector<double> next = p.to_vector();
                    for (std::size_t i = 0; i < next.size(); ++i) {
                        v[i] = 0.9 * v[i] + grad[i];
                        next[i] -= lr * v[i];
                    }
                    p = Tensor(p.shape(), std::move(next));
                };
                apply(w, vw, g.at("w"));
                apply(b, vb, g.at("b"));
            }
        }
        const Tensor logits = add(matmul(xte, w), b);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const double* row = logits.raw() + i * classes;
            const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
            hits += pred == test.labels[i];
        }
        const double acc = static_cast<double>(hits) / static_cast<double>(test.size());
        result.accuracy_per_lr.push_back(acc);
        if (result.accuracy_per_lr.size() == 1 || acc > result.best_accuracy) {
            result.best_accuracy = acc;
            result.best_lr = lr;
        }
    }
    return result;
}

RetrievalResult retrieval_metrics(const EmbeddingTable& db, const EmbeddingTable& queries, std::size_t top_n) {
    require_nonempty(db, "retrieval_metrics", "database");
    require_nonempty(queries, "retrieval_metrics", "query");
    if (top_n == 0) throw std::invalid_argument("retrieval_metrics: top_n must be >= 1");
    const std::size_t nd = db.size();
    const std::vector<double> sims = similarities(db, queries, "retrieval_metrics");
    RetrievalResult r;
    double ap_sum = 0.0, recall_sum = 0.0;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const int label = queries.labels[q];
        const auto relevant = static_cast<std::size_t>(std::count(db.labels.begin(), db.labels.end(), label));
        if (relevant == 0) {
            ++r.skipped;
            continue;
        }
        const std::vector<std::size_t> top = ranking(sims.data() + q * nd, nd, top_n);
        std::size_t hits = 0;
        double precision_sum = 0.0;
        for (std::size_t rank = 0; rank < top.size(); ++rank) {
            if (db.labels[top[rank]] == label) {
                ++hits;
                precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
            }
        }
        ap_sum += hits == 0 ? 0.0 : precision_sum / static_cast<double>(hits);
        recall_sum += static_cast<double>(hits) / static_cast<double>(relevant);
        ++r.evaluated;
    }
    if (r.evaluated > 0) {
        r.map = ap_sum / static_cast<double>(r.evaluated);
        r.recall = recall_sum / static_cast<double>(r.evaluated);
    }
    return r;
}

double dependency_probe(const BatchFunction& f, const Tensor& batch, std::size_t trials, Rng& rng) {
    if (batch.rank() != 2 || batch.extent(0) == 0) {
        throw ShapeError(fmt::format("dependency_probe: expected non-empty [n, d], got {}", to_string(batch.shape())));
    }
    const std::size_t n = batch.extent(0), d = batch.extent(1);
    const Tensor base = f(batch);
    const std::size_t width = base.size() / n;
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) mu[j] += batch.at(i, j) / static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(batch.at(i, j) - mu[j], 2) / static_cast<double>(n);
    }
    for (double& s : sd) s = s > 1e-12 ? std::sqrt(s) : 1.0;

    double worst = 0.0;
    if (n == 1) return worst;
    for (std::size_t t = 0; t < trials; ++t) {
        std::vector<double> probe = batch.to_vector();
        for (std::size_t i = 1; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) probe[i * d + j] = rng.normal(mu[j], sd[j]);
        }
        const Tensor out = f(Tensor(batch.shape(), std::move(probe)));
        for (std::size_t j = 0; j < width; ++j) worst = std::max(worst, std::abs(out[j] - base[j]));
    }
    return worst;
}

double dependency_probe(const ModelState& model, const Tensor& batch, std::size_t trials, Rng& rng,
                        StatsSource source) {
    ForwardOptions opts;
    opts.stats = source;
    return dependency_probe(
        [&](const Tensor& x) { return forward(model, model.constants(), x, opts).output; }, batch, trials, rng);
}

void EvalReport::validate() const {
    if (metric.empty()) throw std::invalid_argument("eval report: empty metric name");
    if (!std::isfinite(value)) throw std::invalid_argument(fmt::format("eval report {}: non-finite value", metric));
    const bool unit = metric.find("acc") != std::string::npos || metric.find("map") != std::string::npos ||
                      metric.find("recall") != std::string::npos;
    if (unit && (value < 0.0 || value > 1.0)) {
        throw std::invalid_argument(fmt::format("eval report {}: value {} outside [0, 1]", metric, value));
    }
}

void write_eval_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
    for (const EvalReport& r : reports) {
        r.validate();
        nlohmann::ordered_json j;
        j["metric"] = r.metric;
        j["value"] = r.value;
        j["params"] = r.params;
        j["split"] = r.split;
        j["seed"] = r.seed;
        out << j.dump() << '\n';
    }
}

std::vector<EvalReport> read_eval_reports(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(fmt::format("cannot open {}", path.string()));
    std::vector<EvalReport> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        EvalReport r;
        r.metric = j.at("metric").get<std::string>();
        r.value = j.at("value").get<double>();
        r.params = j.at("params").get<std::map<std::string, std::string>>();
        r.split = j.at("split").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace eman
