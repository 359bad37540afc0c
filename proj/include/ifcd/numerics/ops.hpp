#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "ifcd/numerics/linalg.hpp"

namespace ifcd::numerics {

/// Max-subtracted softmax. Throws NumericsError("empty distribution") on empty input.
Vec softmax(std::span<const double> logits);
Vec log_softmax(std::span<const double> logits);

/// Index of the largest element; the lowest index wins ties.
std::size_t argmax(std::span<const double> values);

// Softmax Jacobian-vector product: given p = softmax(z) and dL/dp, returns dL/dz.
Vec softmax_backward(std::span<const double> probs, std::span<const double> grad_probs);

struct AttentionResult {
    Vec output;
    Vec weights;  // softmax over keys
};

/// softmax(q.k_i / sqrt(d)) weighted sum of values.
AttentionResult scaled_dot_attention(std::span<const double> query, const std::vector<Vec>& keys,
                                     const std::vector<Vec>& values);

struct AttentionGrads {
    Vec query;
    std::vector<Vec> keys;
    std::vector<Vec> values;
};

AttentionGrads scaled_dot_attention_backward(std::span<const double> query, const std::vector<Vec>& keys,
                                             const std::vector<Vec>& values, const AttentionResult& fwd,
                                             std::span<const double> grad_output);

struct LayerNormCache {
    Vec normalized;  // (x - mean) / std
    double inv_std = 0.0;
};

/// y = gain * (x - mean)/sqrt(var + eps) + bias
Vec layer_norm(std::span<const double> x, std::span<const double> gain, std::span<const double> bias,
               LayerNormCache* cache, double eps = 1e-5);

/// Accumulates parameter gradients into grad_gain/grad_bias; returns dL/dx.
Vec layer_norm_backward(const LayerNormCache& cache, std::span<const double> gain, std::span<const double> grad_y,
                        std::span<double> grad_gain, std::span<double> grad_bias);

/// Projects mean-centred points onto their top two principal axes (cyclic
/// Jacobi on the covariance matrix). Each axis is oriented so that its
/// largest-magnitude loading is positive.
std::vector<std::pair<double, double>> pca_2d(const std::vector<Vec>& points);

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues are sorted descending; eigenvectors are the matching columns.
struct SymmetricEigen {
    Vec values;
    Matrix vectors;
};
SymmetricEigen jacobi_eigen(Matrix a, double tol = 1e-12, int max_sweeps = 100);

}  // namespace ifcd::numerics
