#include "eman/moco_queue.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace eman {

MoCoState::MoCoState(std::size_t capacity, std::size_t dim, double temperature, bool renormalize)
    : capacity_(capacity), dim_(dim), temperature_(temperature), renormalize_(renormalize), ring_(capacity * dim) {
    if (capacity == 0 || dim == 0) throw std::invalid_argument("MoCoState: capacity and dim must be >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument(fmt::format("MoCoState: temperature {} <= 0", temperature));
}

void MoCoState::push(const Tensor& keys) {
    if (keys.rank() != 2 || keys.extent(1) != dim_) {
        throw ShapeError(fmt::format("queue_push: expected [n, {}], got {}", dim_, to_string(keys.shape())));
    }
    const std::size_t n = keys.extent(0);
    if (n > capacity_) throw std::invalid_argument(fmt::format("queue_push: {} keys exceed capacity {}", n, capacity_));
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = keys.raw() + i * dim_;
        double sq = 0.0;
        for (std::size_t j = 0; j < dim_; ++j) sq += row[j] * row[j];
        const double norm = std::sqrt(sq);
        if (!(norm > 0.0) || !std::isfinite(norm)) throw std::invalid_argument("queue_push: zero or non-finite key");
        const bool unit = std::abs(norm - 1.0) <= 1e-6;
        if (!unit && !renormalize_) throw std::invalid_argument(fmt::format("queue_push: key norm {} is not 1", norm));
        const std::size_t slot = (head_ + size_) % capacity_;
        double* dst = ring_.data() + slot * dim_;
        for (std::size_t j = 0; j < dim_; ++j) dst[j] = unit ? row[j] : row[j] / norm;
        if (size_ < capacity_) {
            ++size_;
        } else {
            head_ = (head_ + 1) % capacity_;
        }
    }
}

Tensor MoCoState::keys() const {
    std::vector<double> out(size_ * dim_);
    for (std::size_t i = 0; i < size_; ++i) {
        const double* src = ring_.data() + ((head_ + i) % capacity_) * dim_;
        std::copy(src, src + dim_, out.data() + i * dim_);
    }
    return Tensor({size_ == 0 ? 0 : size_, dim_}, std::move(out));
}

MoCoState queue_push(MoCoState state, const Tensor& keys) {
    state.push(keys);
    return state;
}

}  // namespace eman
