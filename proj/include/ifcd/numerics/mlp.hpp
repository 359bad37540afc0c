#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ifcd/numerics/linalg.hpp"

namespace ifcd::numerics {

class Rng;

enum class Activation { relu, tanh, identity };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

struct DenseLayer {
    Matrix weight;  // out x in
    Vec bias;       // out
    Activation activation = Activation::identity;

    bool operator==(const DenseLayer&) const = default;
};

/// Fully connected network; layer_sizes = {in, hidden..., out}.
struct MlpParams {
    std::vector<std::size_t> layer_sizes;
    std::vector<DenseLayer> layers;

    static MlpParams zeros(std::vector<std::size_t> sizes, std::vector<Activation> activations);
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    static MlpParams random(std::vector<std::size_t> sizes, std::vector<Activation> activations, Rng& rng);

    [[nodiscard]] std::size_t input_dim() const { return layer_sizes.front(); }
    [[nodiscard]] std::size_t output_dim() const { return layer_sizes.back(); }
    [[nodiscard]] std::size_t parameter_count() const;

    /// Same shapes, all zeros (used as a gradient accumulator).
    [[nodiscard]] MlpParams zeros_like() const;

    /// Mutable views over every parameter block in a fixed order
    /// (w0, b0, w1, b1, ...).
    std::vector<std::span<double>> spans();
    [[nodiscard]] std::vector<std::span<const double>> spans() const;

    void validate() const;

    bool operator==(const MlpParams&) const = default;
};

struct MlpCache {
    std::vector<Vec> inputs;       // input to each layer
    std::vector<Vec> activations;  // output of each layer (after activation)
};

struct MlpForward {
    Vec output;
    MlpCache cache;
};

MlpForward mlp_forward(const MlpParams& params, std::span<const double> input);
/// Forward pass without keeping the cache.
Vec mlp_apply(const MlpParams& params, std::span<const double> input);

struct MlpBackward {
    MlpParams grad_params;
    Vec grad_input;
};

MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, std::span<const double> grad_output);
/// Accumulating variant: adds parameter gradients into `grads`.
Vec mlp_backward_into(const MlpParams& params, const MlpCache& cache, std::span<const double> grad_output,
                      MlpParams& grads);

void to_json(nlohmann::json& j, const MlpParams& p);
void from_json(const nlohmann::json& j, MlpParams& p);

void to_json(nlohmann::json& j, const Matrix& m);
void from_json(const nlohmann::json& j, Matrix& m);

}  // namespace ifcd::numerics
