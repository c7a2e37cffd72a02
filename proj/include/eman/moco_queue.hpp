#pragma once

#include <cstddef>
#include <vector>

#include "eman/tensor.hpp"

namespace eman {

/// Fixed-capacity FIFO of unit-norm keys plus the InfoNCE temperature.
class MoCoState {
public:
    MoCoState(std::size_t capacity, std::size_t dim, double temperature = 0.2, bool renormalize = true);

    /// Append rows of `keys` [n, dim], evicting the oldest entries once full.
    /// Non-unit keys are renormalized, or rejected when renormalization is off.
    void push(const Tensor& keys);

    std::size_t size() const { return size_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t dim() const { return dim_; }
    double temperature() const { return temperature_; }
    bool full() const { return size_ == capacity_; }

    /// Stored keys [size, dim], oldest first.
    Tensor keys() const;

private:
    std::size_t capacity_;
    std::size_t dim_;
    double temperature_;
    bool renormalize_;
    std::vector<double> ring_;
    std::size_t head_ = 0;  // slot of the oldest key
    std::size_t size_ = 0;
};

MoCoState queue_push(MoCoState state, const Tensor& keys);

}  // namespace eman
