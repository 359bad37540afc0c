#include "ifcd/numerics/mlp.hpp"

#include <cmath>
#include <string>

#include "ifcd/numerics/rng.hpp"

namespace ifcd::numerics {

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(std::string_view name) {
    if (name == "relu") {
        return Activation::relu;
    }
    if (name == "tanh") {
        return Activation::tanh;
    }
    if (name == "identity") {
        return Activation::identity;
    }
    throw NumericsError("unknown activation: " + std::string(name));
}

namespace {

double activate(Activation a, double z) {
    switch (a) {
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::tanh: return std::tanh(z);
        case Activation::identity: return z;
    }
    return z;
}

// Derivative expressed through the activation output.
double activate_grad(Activation a, double out) {
    switch (a) {
        case Activation::relu: return out > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: return 1.0 - out * out;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

}  // namespace

MlpParams MlpParams::zeros(std::vector<std::size_t> sizes, std::vector<Activation> activations) {
    require(sizes.size() >= 2, "mlp: need at least input and output sizes");
    require(activations.size() == sizes.size() - 1, "mlp: one activation per layer required");
    MlpParams p;
    p.layer_sizes = std::move(sizes);
    for (std::size_t l = 0; l + 1 < p.layer_sizes.size(); ++l) {
        require(p.layer_sizes[l] > 0 && p.layer_sizes[l + 1] > 0, "mlp: layer sizes must be positive");
        p.layers.push_back({Matrix(p.layer_sizes[l + 1], p.layer_sizes[l]), Vec(p.layer_sizes[l + 1], 0.0),
                            activations[l]});
    }
    return p;
}

MlpParams MlpParams::random(std::vector<std::size_t> sizes, std::vector<Activation> activations, Rng& rng) {
    MlpParams p = zeros(std::move(sizes), std::move(activations));
    for (auto& layer : p.layers) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        for (auto& w : layer.weight.flat()) {
            w = rng.uniform(-bound, bound);
        }
    }
    return p;
}

std::size_t MlpParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.weight.size() + l.bias.size();
    }
    return n;
}

MlpParams MlpParams::zeros_like() const {
    MlpParams g = *this;
    for (auto& l : g.layers) {
        l.weight.fill(0.0);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return g;
}

std::vector<std::span<double>> MlpParams::spans() {
    std::vector<std::span<double>> out;
    for (auto& l : layers) {
        out.emplace_back(l.weight.flat());
        out.emplace_back(l.bias);
    }
    return out;
}

std::vector<std::span<const double>> MlpParams::spans() const {
    std::vector<std::span<const double>> out;
    for (const auto& l : layers) {
        out.emplace_back(l.weight.flat());
        out.emplace_back(l.bias);
    }
    return out;
}

void MlpParams::validate() const {
    require(layer_sizes.size() >= 2, "mlp: need at least input and output sizes");
    require(layers.size() + 1 == layer_sizes.size(), "mlp: layer count inconsistent with layer_sizes");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        require(layers[l].weight.rows() == layer_sizes[l + 1] && layers[l].weight.cols() == layer_sizes[l],
                "mlp: weight shape inconsistent with layer_sizes");
        require(layers[l].bias.size() == layer_sizes[l + 1], "mlp: bias shape inconsistent with layer_sizes");
    }
}

MlpForward mlp_forward(const MlpParams& params, std::span<const double> input) {
    if (input.size() != params.input_dim()) {
        throw NumericsError("mlp_forward: input dimension " + std::to_string(input.size()) + " != " +
                            std::to_string(params.input_dim()));
    }
    MlpForward f;
    Vec h(input.begin(), input.end());
    for (const auto& layer : params.layers) {
        f.cache.inputs.push_back(h);
        Vec z = matvec(layer.weight, h);
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = activate(layer.activation, z[i] + layer.bias[i]);
        }
        f.cache.activations.push_back(z);
        h = std::move(z);
    }
    f.output = std::move(h);
    return f;
}

Vec mlp_apply(const MlpParams& params, std::span<const double> input) {
    if (input.size() != params.input_dim()) {
        throw NumericsError("mlp_apply: input dimension " + std::to_string(input.size()) + " != " +
                            std::to_string(params.input_dim()));
    }
    Vec h(input.begin(), input.end());
    for (const auto& layer : params.layers) {
        Vec z = matvec(layer.weight, h);
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = activate(layer.activation, z[i] + layer.bias[i]);
        }
        h = std::move(z);
    }
    return h;
}

Vec mlp_backward_into(const MlpParams& params, const MlpCache& cache, std::span<const double> grad_output,
                      MlpParams& grads) {
    require(cache.inputs.size() == params.layers.size(), "mlp_backward: cache does not match parameters");
    require(grad_output.size() == params.output_dim(), "mlp_backward: grad_output dimension mismatch");
    Vec g(grad_output.begin(), grad_output.end());
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        const auto& layer = params.layers[l];
        const Vec& out = cache.activations[l];
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] *= activate_grad(layer.activation, out[i]);
        }
        add_outer(grads.layers[l].weight, g, cache.inputs[l]);
        axpy(1.0, g, grads.layers[l].bias);
        g = matvec_transposed(layer.weight, g);
    }
    return g;
}

MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, std::span<const double> grad_output) {
    MlpBackward b;
    b.grad_params = params.zeros_like();
    b.grad_input = mlp_backward_into(params, cache, grad_output, b.grad_params);
    return b;
}

void to_json(nlohmann::json& j, const Matrix& m) {
    j = nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.flat().begin(), m.flat().end())}};
}

void from_json(const nlohmann::json& j, Matrix& m) {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    const auto data = j.at("data").get<std::vector<double>>();
    require(data.size() == rows * cols, "matrix json: data length does not match rows*cols");
    m = Matrix(rows, cols);
    std::copy(data.begin(), data.end(), m.flat().begin());
}

void to_json(nlohmann::json& j, const MlpParams& p) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : p.layers) {
        layers.push_back({{"activation", std::string(to_string(l.activation))},
                          {"weight", l.weight},
                          {"bias", l.bias}});
    }
    j = nlohmann::json{{"layer_sizes", p.layer_sizes}, {"layers", layers}};
}

void from_json(const nlohmann::json& j, MlpParams& p) {
    p.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
    p.layers.clear();
    for (const auto& jl : j.at("layers")) {
        DenseLayer l;
        l.activation = activation_from_string(jl.at("activation").get<std::string>());
        l.weight = jl.at("weight").get<Matrix>();
        l.bias = jl.at("bias").get<Vec>();
        p.layers.push_back(std::move(l));
    }
    p.validate();
}

}  // namespace ifcd::numerics
