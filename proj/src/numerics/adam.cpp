#include "ifcd/numerics/adam.hpp"

#include <cmath>

namespace ifcd::numerics {

AdamState::AdamState(AdamConfig cfg, const std::vector<std::span<const double>>& shape_of) : config(cfg) {
    for (const auto& block : shape_of) {
        first_moment.emplace_back(block.size(), 0.0);
        second_moment.emplace_back(block.size(), 0.0);
    }
}

AdamState::AdamState(AdamConfig cfg, const std::vector<std::span<double>>& shape_of) : config(cfg) {
    for (const auto& block : shape_of) {
        first_moment.emplace_back(block.size(), 0.0);
        second_moment.emplace_back(block.size(), 0.0);
    }
}

void adam_step(const std::vector<std::span<double>>& params, const std::vector<std::span<double>>& grads,
               AdamState& state) {
    require(params.size() == grads.size(), "adam_step: params/grads block count mismatch");
    require(params.size() == state.first_moment.size(), "adam_step: state block count mismatch");
    for (std::size_t b = 0; b < params.size(); ++b) {
        require(params[b].size() == grads[b].size() && params[b].size() == state.first_moment[b].size(),
                "adam_step: block shape mismatch");
    }
    ++state.step;
    const auto& c = state.config;
    const double t = static_cast<double>(state.step);
    const double correct1 = 1.0 - std::pow(c.beta1, t);
    const double correct2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t b = 0; b < params.size(); ++b) {
        auto& m = state.first_moment[b];
        auto& v = state.second_moment[b];
        for (std::size_t i = 0; i < params[b].size(); ++i) {
            const double g = grads[b][i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            const double mhat = m[i] / correct1;
            const double vhat = v[i] / correct2;
            params[b][i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

}  // namespace ifcd::numerics
