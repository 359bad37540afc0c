#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ifcd/numerics/linalg.hpp"

namespace ifcd::numerics {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment buffers for a parameter set given as a list of blocks.
struct AdamState {
    AdamConfig config;
    std::vector<Vec> first_moment;
    std::vector<Vec> second_moment;
    std::uint64_t step = 0;

    AdamState() = default;
    AdamState(AdamConfig cfg, const std::vector<std::span<const double>>& shape_of);
    AdamState(AdamConfig cfg, const std::vector<std::span<double>>& shape_of);
};

/// One bias-corrected Adam update. `params` and `grads` must list blocks in
/// the same order and with the shapes the state was built for.
void adam_step(const std::vector<std::span<double>>& params, const std::vector<std::span<double>>& grads,
               AdamState& state);

}  // namespace ifcd::numerics
