#pragma once

#include <cmath>
#include <vector>

#include "eman/data.hpp"
#include "eman/model.hpp"
#include "eman/rng.hpp"
#include "eman/tensor.hpp"

namespace eman::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.normal(0.0, sd);
    return Tensor(std::move(shape), std::move(v));
}

/// Entries bounded away from zero so relu kinks stay out of finite-difference reach.
inline Tensor kink_free(Shape shape, Rng& rng, double margin = 0.1) {
    std::vector<double> v(numel(shape));
    for (double& x : v) {
        const double m = margin + rng.uniform();
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return Tensor(std::move(shape), std::move(v));
}

inline Architecture small_arch(norm::NormKind kind = norm::NormKind::bn, std::size_t in = 6, std::size_t out = 3) {
    Architecture a;
    a.input_dim = in;
    a.hidden = {8};
    a.output_dim = out;
    a.norm = kind;
    a.spatial = 2;
    a.groups = 2;
    a.shard_count = 2;
    return a;
}

inline Dataset blobs(std::size_t n, std::size_t classes, std::size_t dim, double noise, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::blobs;
    spec.n = n;
    spec.classes = classes;
    spec.dim = dim;
    spec.noise = noise;
    spec.separation = 3.0;
    return make_synthetic(spec, seed);
}

}  // namespace eman::test
