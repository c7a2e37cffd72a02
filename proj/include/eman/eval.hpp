#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "eman/data.hpp"
#include "eman/model.hpp"
#include "eman/rng.hpp"
#include "eman/tensor.hpp"

namespace eman {

struct EmbeddingTable {
    Tensor embeddings;  // [N, d]
    std::vector<int> labels;
    std::vector<std::size_t> ids;

    std::size_t size() const { return labels.size(); }
    void validate() const;
};

enum class EmbeddingSource { features, output };

/// Running-statistics forward in chunks of `batch_size`; the result does not
/// depend on the chunking.
EmbeddingTable extract_embeddings(const ModelState& model, const Dataset& data,
                                  EmbeddingSource source = EmbeddingSource::features, std::size_t batch_size = 64);

/// Majority vote over the k most cosine-similar training rows. Similarity
/// ties rank the lower index first; vote ties go to the class of the nearest
/// tied neighbor.
std::vector<int> knn_predict(const EmbeddingTable& train, const EmbeddingTable& queries, std::size_t k);
double knn_classify(const EmbeddingTable& train, const EmbeddingTable& queries, std::size_t k = 20);

struct LinearProbeConfig {
    std::size_t epochs = 50;
    std::vector<double> lr_grid{0.03, 0.1, 0.3};
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

struct LinearProbeResult {
    double best_accuracy = 0.0;
    double best_lr = 0.0;
    std::vector<double> accuracy_per_lr;
};

/// Softmax regression on frozen embeddings, one run per learning rate.
LinearProbeResult linear_probe(const EmbeddingTable& train, const EmbeddingTable& test,
                               const LinearProbeConfig& config = {});

struct RetrievalResult {
    double map = 0.0;
    double recall = 0.0;
    std::size_t evaluated = 0;
    /// Queries whose class never occurs in the database.
    std::size_t skipped = 0;
};

/// Cosine ranking of the database per query. AP averages precision at each
/// relevant hit within the top `top_n`, over the hits found there; recall is
/// hits over all relevant database rows.
RetrievalResult retrieval_metrics(const EmbeddingTable& db, const EmbeddingTable& queries, std::size_t top_n = 100);

using BatchFunction = std::function<Tensor(const Tensor&)>;

/// Holds row 0 of `batch` fixed, redraws rows 1..n-1 `trials` times from a
/// Gaussian matched to the batch's column moments, and returns the largest
/// L-infinity change in row 0 of the output.
double dependency_probe(const BatchFunction& f, const Tensor& batch, std::size_t trials, Rng& rng);

/// Same, through `model` with the given statistics source.
double dependency_probe(const ModelState& model, const Tensor& batch, std::size_t trials, Rng& rng,
                        StatsSource source);

struct EvalReport {
    std::string metric;
    double value = 0.0;
    std::map<std::string, std::string> params;
    std::string split;
    std::uint64_t seed = 0;

    /// Accuracy-like metrics must lie in [0, 1].
    void validate() const;
};

/// One JSON object per line.
void write_eval_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports);
std::vector<EvalReport> read_eval_reports(const std::filesystem::path& path);

}  // namespace eman
