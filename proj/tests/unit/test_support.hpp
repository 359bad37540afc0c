#pragma once

// Test-only oracles: central finite differences and small statistics helpers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace ifcd::testing {

/// Central-difference derivative of `loss` w.r.t. each entry of `x` (perturbed in place).
inline std::vector<double> central_difference(std::span<double> x, const std::function<double()>& loss,
                                              double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = loss();
        x[i] = saved - h;
        const double down = loss();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i| + |b_i|, floor). The floor keeps entries whose
/// true gradient is ~0 from dominating through round-off.
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max(std::abs(a[i]) + std::abs(b[i]), floor);
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

/// Mean silhouette of a 1-D two-cluster labelling.
inline double silhouette_1d(const std::vector<double>& xs, const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double same = 0.0;
        double other = 0.0;
        std::size_t ns = 0;
        std::size_t no = 0;
        for (std::size_t j = 0; j < xs.size(); ++j) {
            if (i == j) {
                continue;
            }
            const double d = std::abs(xs[i] - xs[j]);
            if (labels[i] == labels[j]) {
                same += d;
                ++ns;
            } else {
                other += d;
                ++no;
            }
        }
        const double a = ns ? same / static_cast<double>(ns) : 0.0;
        const double b = no ? other / static_cast<double>(no) : 0.0;
        const double m = std::max(a, b);
        total += m > 0 ? (b - a) / m : 0.0;
    }
    return total / static_cast<double>(xs.size());
}

}  // namespace ifcd::testing
