#include "ifcd/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ifcd::numerics {

Vec softmax(std::span<const double> logits) {
    require(!logits.empty(), "empty distribution");
    const double mx = *std::max_element(logits.begin(), logits.end());
    Vec out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        total += out[i];
    }
    for (auto& v : out) {
        v /= total;
    }
    return out;
}

Vec log_softmax(std::span<const double> logits) {
    require(!logits.empty(), "empty distribution");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double z : logits) {
        total += std::exp(z - mx);
    }
    const double lse = mx + std::log(total);
    Vec out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = logits[i] - lse;
    }
    return out;
}

std::size_t argmax(std::span<const double> values) {
    require(!values.empty(), "argmax of empty sequence");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return best;
}

Vec softmax_backward(std::span<const double> probs, std::span<const double> grad_probs) {
    const double inner = dot(probs, grad_probs);
    Vec g(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        g[i] = probs[i] * (grad_probs[i] - inner);
    }
    return g;
}

AttentionResult scaled_dot_attention(std::span<const double> query, const std::vector<Vec>& keys,
                                     const std::vector<Vec>& values) {
    require(!keys.empty(), "attention: no keys");
    require(keys.size() == values.size(), "attention: keys/values count mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
    Vec scores(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        require(keys[i].size() == query.size(), "attention: key dimension mismatch");
        scores[i] = dot(query, keys[i]) * scale;
    }
    AttentionResult res;
    res.weights = softmax(scores);
    const std::size_t dv = values.front().size();
    res.output.assign(dv, 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        require(values[i].size() == dv, "attention: value dimension mismatch");
        axpy(res.weights[i], values[i], res.output);
    }
    return res;
}

AttentionGrads scaled_dot_attention_backward(std::span<const double> query, const std::vector<Vec>& keys,
                                             const std::vector<Vec>& values, const AttentionResult& fwd,
                                             std::span<const double> grad_output) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(query.size()));
    AttentionGrads g;
    g.query.assign(query.size(), 0.0);
    g.keys.assign(keys.size(), Vec(query.size(), 0.0));
    g.values.resize(values.size());
    Vec grad_w(keys.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        grad_w[i] = dot(grad_output, values[i]);
        g.values[i] = scaled(grad_output, fwd.weights[i]);
    }
    const Vec grad_scores = softmax_backward(fwd.weights, grad_w);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        axpy(grad_scores[i] * scale, keys[i], g.query);
        axpy(grad_scores[i] * scale, query, g.keys[i]);
    }
    return g;
}

Vec layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
               LayerNormCache* cache, double eps) {
    require(x.size() == gain.size() && x.size() == bias.size(), "layer_norm: dimension mismatch");
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double var = 0.0;
    for (double v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    Vec normalized(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        normalized[i] = (x[i] - mean) * inv_std;
        y[i] = gain[i] * normalized[i] + bias[i];
    }
    if (cache != nullptr) {
        cache->normalized = std::move(normalized);
        cache->inv_std = inv_std;
    }
    return y;
}

Vec layer_norm_backward(const LayerNormCache& cache, std::span<const double> gain, std::span<const double> grad_y,
                        std::span<double> grad_gain, std::span<double> grad_bias) {
    const std::size_t d = grad_y.size();
    const double n = static_cast<double>(d);
    Vec g_hat(d);
    double mean_g = 0.0;
    double mean_g_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        grad_gain[i] += grad_y[i] * cache.normalized[i];
        grad_bias[i] += grad_y[i];
        g_hat[i] = grad_y[i] * gain[i];
        mean_g += g_hat[i];
        mean_g_xhat += g_hat[i] * cache.normalized[i];
    }
    mean_g /= n;
    mean_g_xhat /= n;
    Vec gx(d);
    for (std::size_t i = 0; i < d; ++i) {
        gx[i] = cache.inv_std * (g_hat[i] - mean_g - cache.normalized[i] * mean_g_xhat);
    }
    return gx;
}

SymmetricEigen jacobi_eigen(Matrix a, double tol, int max_sweeps) {
    const std::size_t n = a.rows();
    require(n == a.cols(), "jacobi_eigen: matrix not square");
    Matrix v(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        v(i, i) = 1.0;
    }
    auto off_norm = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                if (i != j) {
                    s += a(i, j) * a(i, j);
                }
            }
        }
        return std::sqrt(s);
    };
    for (int sweep = 0; sweep < max_sweeps && off_norm() > tol; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    SymmetricEigen out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t c = 0; c < n; ++c) {
        out.values[c] = a(order[c], order[c]);
        for (std::size_t r = 0; r < n; ++r) {
            out.vectors(r, c) = v(r, order[c]);
        }
    }
    return out;
}

std::vector<std::pair<double, double>> pca_2d(const std::vector<Vec>& points) {
    require(points.size() >= 3, "pca_2d: need at least 3 points");
    const std::size_t d = points.front().size();
    require(d >= 2, "pca_2d: need dimension >= 2");
    Vec mean(d, 0.0);
    for (const auto& p : points) {
        require(p.size() == d, "pca_2d: inconsistent dimensions");
        axpy(1.0, p, mean);
    }
    for (auto& m : mean) {
        m /= static_cast<double>(points.size());
    }
    Matrix cov(d, d);
    std::vector<Vec> centred;
    centred.reserve(points.size());
    for (const auto& p : points) {
        centred.push_back(sub(p, mean));
        add_outer(cov, centred.back(), centred.back(), 1.0 / static_cast<double>(points.size()));
    }
    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        trace += cov(i, i);
    }
    if (!(trace > 1e-24)) {
        throw NumericsError("degenerate point cloud");
    }
    const SymmetricEigen eig = jacobi_eigen(cov);
    Vec axis[2];
    for (int k = 0; k < 2; ++k) {
        axis[k].resize(d);
        std::size_t big = 0;
        for (std::size_t r = 0; r < d; ++r) {
            axis[k][r] = eig.vectors(r, static_cast<std::size_t>(k));
            if (std::abs(axis[k][r]) > std::abs(axis[k][big]) + 1e-12) {
                big = r;
            }
        }
        if (axis[k][big] < 0) {
            for (auto& x : axis[k]) {
                x = -x;
            }
        }
    }
    std::vector<std::pair<double, double>> out;
    out.reserve(points.size());
    for (const auto& c : centred) {
        out.emplace_back(dot(c, axis[0]), dot(c, axis[1]));
    }
    return out;
}

}  // namespace ifcd::numerics
