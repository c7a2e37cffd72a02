#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "eman/eval.hpp"

namespace eman::test {

/// Brute-force references for the embedding metrics: plain loops, stable sorts.

inline EmbeddingTable table(const Tensor& e, std::vector<int> labels) {
    EmbeddingTable t;
    t.embeddings = e;
    t.labels = std::move(labels);
    return t;
}

inline double cosine(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    const std::size_t d = a.extent(1);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        dot += a.at(i, k) * b.at(j, k);
        na += a.at(i, k) * a.at(i, k);
        nb += b.at(j, k) * b.at(j, k);
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<std::size_t> brute_rank(const EmbeddingTable& db, const EmbeddingTable& q, std::size_t row) {
    std::vector<std::size_t> order(db.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> s(db.size());
    for (std::size_t i = 0; i < db.size(); ++i) s[i] = cosine(q.embeddings, row, db.embeddings, i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    return order;
}

inline std::vector<int> brute_knn(const EmbeddingTable& train, const EmbeddingTable& q, std::size_t k) {
    std::vector<int> out;
    for (std::size_t r = 0; r < q.size(); ++r) {
        const auto order = brute_rank(train, q, r);
        std::map<int, std::size_t> votes;
        for (std::size_t i = 0; i < k; ++i) ++votes[train.labels[order[i]]];
        std::size_t best = 0;
        for (auto& [c, v] : votes) best = std::max(best, v);
        for (std::size_t i = 0; i < k; ++i) {
            if (votes[train.labels[order[i]]] == best) {
                out.push_back(train.labels[order[i]]);
                break;
            }
        }
    }
    return out;
}

struct BruteRetrieval {
    double map = 0.0;
    double recall = 0.0;
};

inline BruteRetrieval brute_retrieval(const EmbeddingTable& db, const EmbeddingTable& q, std::size_t top) {
    BruteRetrieval r;
    std::size_t counted = 0;
    for (std::size_t row = 0; row < q.size(); ++row) {
        const auto relevant = std::count(db.labels.begin(), db.labels.end(), q.labels[row]);
        if (relevant == 0) continue;
        const auto order = brute_rank(db, q, row);
        double p = 0.0;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < std::min(top, order.size()); ++i) {
            if (db.labels[order[i]] == q.labels[row]) p += static_cast<double>(++hits) / static_cast<double>(i + 1);
        }
        r.map += hits ? p / static_cast<double>(hits) : 0.0;
        r.recall += static_cast<double>(hits) / static_cast<double>(relevant);
        ++counted;
    }
    if (counted > 0) {
        r.map /= static_cast<double>(counted);
        r.recall /= static_cast<double>(counted);
    }
    return r;
}

}  // namespace eman::test
