#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ifcd/numerics/adam.hpp"
#include "ifcd/numerics/linalg.hpp"
#include "ifcd/numerics/mlp.hpp"
#include "ifcd/numerics/ops.hpp"
#include "ifcd/numerics/rng.hpp"
#include "test_support.hpp"

using namespace ifcd::numerics;
using ifcd::testing::central_difference;
using ifcd::testing::max_relative_error;

namespace {

Vec random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    Vec v(n);
    for (auto& x : v) {
        x = rng.normal() * scale;
    }
    return v;
}

}  // namespace

TEST_CASE("softmax examples") {
    const Vec u = softmax(Vec{0.0, 0.0, 0.0});
    for (double p : u) {
        CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    const Vec two = softmax(Vec{0.0, std::log(2.0)});
    CHECK(two[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(two[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

    // 40-digit reference values for softmax([2.2, 1.0, -0.2]).
    const Vec p = softmax(Vec{2.2, 1.0, -0.2});
    CHECK(std::abs(p[0] - 0.7184361377107102052344186) < 1e-15);
    CHECK(std::abs(p[1] - 0.2163888063070236576404585) < 1e-15);
    CHECK(std::abs(p[2] - 0.06517505598226613712512295) < 1e-15);

    CHECK_THROWS_WITH_AS(softmax(Vec{}), "empty distribution", NumericsError);
}

TEST_CASE("softmax sums to one and keeps the argmax") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(trial < 190 ? 64 : 10000);
        Vec z = random_vec(rng, n, 1.0 + 50.0 * rng.uniform());
        if (trial % 7 == 0 && n > 2) {
            z[n - 1] = z[0] = *std::max_element(z.begin(), z.end());  // force a tie
        }
        const Vec p = softmax(z);
        CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-9);
        CHECK(argmax(p) == argmax(z));
    }
}

TEST_CASE("argmax breaks ties by lowest index") {
    CHECK(argmax(Vec{1.0, 3.0, 3.0, 2.0}) == 1);
    CHECK(argmax(Vec{5.0, 5.0}) == 0);
}

TEST_CASE("rng is deterministic and splits into distinct streams") {
    Rng a(42);
    Rng b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    Rng c = a.split();
    CHECK(c.next_u64() != a.next_u64());
    Rng d(9);
    double mean = 0.0;
    for (int i = 0; i < 20000; ++i) {
        mean += d.normal();
    }
    CHECK(std::abs(mean / 20000.0) < 0.05);
}

TEST_CASE("mlp identity layer backward is W^T g") {
    MlpParams p = MlpParams::zeros({3, 2}, {Activation::identity});
    p.layers[0].weight(0, 0) = 1.0;
    p.layers[0].weight(0, 1) = 2.0;
    p.layers[0].weight(0, 2) = -1.0;
    p.layers[0].weight(1, 0) = 0.5;
    p.layers[0].weight(1, 1) = -3.0;
    p.layers[0].weight(1, 2) = 4.0;
    const auto fwd = mlp_forward(p, Vec{1.0, 1.0, 1.0});
    const auto back = mlp_backward(p, fwd.cache, Vec{2.0, -1.0});
    CHECK(back.grad_input == Vec{2.0 - 0.5, 4.0 + 3.0, -2.0 - 4.0});
}

TEST_CASE("mlp zero upstream gradient gives zero gradients") {
    Rng rng(1);
    MlpParams p = MlpParams::random({4, 5, 3}, {Activation::tanh, Activation::identity}, rng);
    const auto fwd = mlp_forward(p, random_vec(rng, 4));
    const auto back = mlp_backward(p, fwd.cache, Vec(3, 0.0));
    for (double g : back.grad_input) {
        CHECK(g == 0.0);
    }
    for (const auto& s : back.grad_params.spans()) {
        for (double g : s) {
            CHECK(g == 0.0);
        }
    }
}

TEST_CASE("mlp forward rejects wrong input dimension") {
    Rng rng(1);
    MlpParams p = MlpParams::random({4, 3}, {Activation::relu}, rng);
    CHECK_THROWS_AS(mlp_forward(p, Vec(5, 0.0)), NumericsError);
}

namespace {

// L = sum_i c_i * out_i for a fixed random c, so dL/dout = c.
double check_mlp_gradients(MlpParams p, Rng& rng) {
    Vec x = random_vec(rng, p.input_dim());
    const Vec c = random_vec(rng, p.output_dim());
    const auto loss = [&] { return dot(mlp_apply(p, x), c); };
    const auto fwd = mlp_forward(p, x);
    auto back = mlp_backward(p, fwd.cache, c);
    double worst = max_relative_error(back.grad_input, central_difference(x, loss));
    auto ps = p.spans();
    auto gs = back.grad_params.spans();
    for (std::size_t b = 0; b < ps.size(); ++b) {
        worst = std::max(worst, max_relative_error(gs[b], central_difference(ps[b], loss)));
    }
    return worst;
}

}  // namespace

TEST_CASE("mlp two-layer relu gradients match finite differences (seed 7)") {
    Rng rng(7);
    MlpParams p = MlpParams::random({5, 8, 3}, {Activation::relu, Activation::identity}, rng);
    for (auto& b : p.layers[0].bias) {
        b = 0.1;
    }
    CHECK(check_mlp_gradients(p, rng) < 1e-4);
}

TEST_CASE("mlp gradient grid matches finite differences") {
    Rng rng(2024);
    const std::vector<std::vector<std::size_t>> shapes = {{3, 4}, {6, 7, 2}, {4, 5, 5, 4}, {32, 32, 16}};
    const std::vector<Activation> acts = {Activation::relu, Activation::tanh, Activation::identity};
    for (const auto& shape : shapes) {
        for (Activation hidden : acts) {
            std::vector<Activation> layer_acts(shape.size() - 1, hidden);
            layer_acts.back() = Activation::identity;
            MlpParams p = MlpParams::random(shape, layer_acts, rng);
            CHECK(check_mlp_gradients(p, rng) < 1e-4);
        }
    }
}

TEST_CASE("mlp json round trip is bit exact") {
    Rng rng(5);
    MlpParams p = MlpParams::random({3, 7, 2}, {Activation::tanh, Activation::identity}, rng);
    p.layers[1].bias[0] = 0.1 + 0.2;  // a value without a short decimal form
    const nlohmann::json j = p;
    const MlpParams back = nlohmann::json::parse(j.dump()).get<MlpParams>();
    CHECK(back == p);
}

TEST_CASE("mlp json rejects inconsistent shapes") {
    Rng rng(5);
    nlohmann::json j = MlpParams::random({3, 2}, {Activation::relu}, rng);
    j["layer_sizes"] = {3, 4};
    CHECK_THROWS_AS(j.get<MlpParams>(), NumericsError);
}

TEST_CASE("adam examples") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        Vec w{1.0, -2.0};
        Vec g{0.0, 0.0};
        std::vector<std::span<double>> ps{w};
        std::vector<std::span<double>> gs{g};
        AdamState st({.lr = 0.1}, ps);
        adam_step(ps, gs, st);
        CHECK(w == Vec{1.0, -2.0});
        CHECK(st.step == 1);
    }
    SUBCASE("one step on w^2 descends") {
        Vec w{1.0};
        Vec g{2.0};
        std::vector<std::span<double>> ps{w};
        std::vector<std::span<double>> gs{g};
        AdamState st({.lr = 0.1}, ps);
        adam_step(ps, gs, st);
        CHECK(w[0] < 1.0);
    }
    SUBCASE("200 steps on a 2-D quadratic converge") {
        Vec w{3.0, -2.0};
        Vec g(2);
        std::vector<std::span<double>> ps{w};
        std::vector<std::span<double>> gs{g};
        AdamState st({.lr = 0.1}, ps);
        auto loss = [&] { return (w[0] - 1.0) * (w[0] - 1.0) + 3.0 * (w[1] + 0.5) * (w[1] + 0.5); };
        for (int i = 0; i < 200; ++i) {
            g[0] = 2.0 * (w[0] - 1.0);
            g[1] = 6.0 * (w[1] + 0.5);
            adam_step(ps, gs, st);
        }
        CHECK(loss() < 1e-6);
    }
    SUBCASE("shape mismatch is rejected") {
        Vec w{1.0, 2.0};
        Vec g{1.0};
        std::vector<std::span<double>> ps{w};
        std::vector<std::span<double>> gs{g};
        AdamState st({}, ps);
        CHECK_THROWS_AS(adam_step(ps, gs, st), NumericsError);
    }
}

TEST_CASE("attention examples") {
    const Vec q{0.3, -1.0};
    SUBCASE("single pair returns the value") {
        const auto r = scaled_dot_attention(q, {Vec{1.0, 2.0}}, {Vec{4.0, -5.0, 6.0}});
        CHECK(r.output == Vec{4.0, -5.0, 6.0});
    }
    SUBCASE("identical keys average the values") {
        const auto r = scaled_dot_attention(q, {Vec{1.0, 2.0}, Vec{1.0, 2.0}}, {Vec{0.0, 2.0}, Vec{4.0, 6.0}});
        CHECK(r.output[0] == doctest::Approx(2.0));
        CHECK(r.output[1] == doctest::Approx(4.0));
    }
    SUBCASE("three keys match a scalar re-implementation (seed 11)") {
        Rng rng(11);
        const Vec query = random_vec(rng, 4);
        std::vector<Vec> keys;
        std::vector<Vec> values;
        for (int i = 0; i < 3; ++i) {
            keys.push_back(random_vec(rng, 4));
            values.push_back(random_vec(rng, 3));
        }
        // Oracle: plain loops, no max subtraction, long double accumulation.
        long double w[3];
        long double z = 0;
        for (int i = 0; i < 3; ++i) {
            long double s = 0;
            for (int k = 0; k < 4; ++k) {
                s += static_cast<long double>(query[k]) * keys[i][k];
            }
            w[i] = std::exp(s / std::sqrt(4.0L));
            z += w[i];
        }
        const auto r = scaled_dot_attention(query, keys, values);
        for (int c = 0; c < 3; ++c) {
            long double o = 0;
            for (int i = 0; i < 3; ++i) {
                o += w[i] / z * values[i][c];
            }
            CHECK(std::abs(static_cast<double>(o) - r.output[c]) < 1e-12);
        }
    }
    SUBCASE("mismatched counts are rejected") {
        CHECK_THROWS_AS(scaled_dot_attention(q, {Vec{1.0, 2.0}}, {}), NumericsError);
    }
}

TEST_CASE("attention output lies in the convex hull of the values") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(6);
        const Vec query = random_vec(rng, 5, 3.0);
        std::vector<Vec> keys;
        std::vector<Vec> values;
        for (std::size_t i = 0; i < n; ++i) {
            keys.push_back(random_vec(rng, 5, 3.0));
            values.push_back(random_vec(rng, 4));
        }
        const auto r = scaled_dot_attention(query, keys, values);
        for (std::size_t c = 0; c < 4; ++c) {
            double lo = values[0][c];
            double hi = values[0][c];
            for (const auto& v : values) {
                lo = std::min(lo, v[c]);
                hi = std::max(hi, v[c]);
            }
            CHECK(r.output[c] >= lo - 1e-12);
            CHECK(r.output[c] <= hi + 1e-12);
        }
    }
}

TEST_CASE("attention backward matches finite differences") {
    Rng rng(13);
    Vec query = random_vec(rng, 4);
    std::vector<Vec> keys;
    std::vector<Vec> values;
    for (int i = 0; i < 3; ++i) {
        keys.push_back(random_vec(rng, 4));
        values.push_back(random_vec(rng, 2));
    }
    const Vec c = random_vec(rng, 2);
    auto loss = [&] { return dot(scaled_dot_attention(query, keys, values).output, c); };
    const auto fwd = scaled_dot_attention(query, keys, values);
    const auto g = scaled_dot_attention_backward(query, keys, values, fwd, c);
    CHECK(max_relative_error(g.query, central_difference(query, loss)) < 1e-6);
    for (int i = 0; i < 3; ++i) {
        CHECK(max_relative_error(g.keys[i], central_difference(keys[i], loss)) < 1e-6);
        CHECK(max_relative_error(g.values[i], central_difference(values[i], loss)) < 1e-6);
    }
}

TEST_CASE("layer norm backward matches finite differences") {
    Rng rng(14);
    Vec x = random_vec(rng, 8);
    Vec gain = random_vec(rng, 8);
    Vec bias = random_vec(rng, 8);
    const Vec c = random_vec(rng, 8);
    auto loss = [&] { return dot(layer_norm(x, gain, bias, nullptr), c); };
    LayerNormCache cache;
    layer_norm(x, gain, bias, &cache);
    Vec gg(8, 0.0);
    Vec gb(8, 0.0);
    const Vec gx = layer_norm_backward(cache, gain, c, gg, gb);
    CHECK(max_relative_error(gx, central_difference(x, loss)) < 1e-6);
    CHECK(max_relative_error(gg, central_difference(gain, loss)) < 1e-6);
    CHECK(max_relative_error(gb, central_difference(bias, loss)) < 1e-6);
}

TEST_CASE("pca_2d recovers axis-aligned 2-D data up to sign") {
    const std::vector<Vec> pts{{3.0, 0.5}, {-3.0, 0.5}, {3.0, -0.5}, {-3.0, -0.5}, {1.0, 0.0}, {-1.0, 0.0}};
    const auto proj = pca_2d(pts);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(std::abs(std::abs(proj[i].first) - std::abs(pts[i][0])) < 1e-9);
        CHECK(std::abs(std::abs(proj[i].second) - std::abs(pts[i][1])) < 1e-9);
    }
}

TEST_CASE("pca_2d separates two clusters along the first component") {
    Rng rng(21);
    std::vector<Vec> pts;
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
        Vec p = random_vec(rng, 10, 0.3);
        p[3] += (i % 2 == 0) ? 4.0 : -4.0;
        pts.push_back(p);
        labels.push_back(i % 2);
    }
    const auto proj = pca_2d(pts);
    std::vector<double> first;
    double mx = 0.0;
    double my = 0.0;
    for (const auto& [x, y] : proj) {
        first.push_back(x);
        mx += x;
        my += y;
    }
    CHECK(ifcd::testing::silhouette_1d(first, labels) > 0.8);
    CHECK(std::abs(mx / 60.0) < 1e-9);
    CHECK(std::abs(my / 60.0) < 1e-9);
}

TEST_CASE("pca_2d is invariant to input order up to axis sign") {
    Rng rng(22);
    std::vector<Vec> pts;
    for (int i = 0; i < 20; ++i) {
        pts.push_back(random_vec(rng, 6));
    }
    const auto a = pca_2d(pts);
    std::vector<std::size_t> perm(pts.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<Vec> shuffled;
    for (auto i : perm) {
        shuffled.push_back(pts[i]);
    }
    const auto b = pca_2d(shuffled);
    for (std::size_t k = 0; k < perm.size(); ++k) {
        CHECK(std::abs(std::abs(b[k].first) - std::abs(a[perm[k]].first)) < 1e-9);
        CHECK(std::abs(std::abs(b[k].second) - std::abs(a[perm[k]].second)) < 1e-9);
    }
}

TEST_CASE("pca_2d rejects degenerate input") {
    const std::vector<Vec> same(5, Vec{1.0, 2.0, 3.0});
    CHECK_THROWS_WITH_AS(pca_2d(same), "degenerate point cloud", NumericsError);
    CHECK_THROWS_AS(pca_2d({Vec{1.0, 2.0}, Vec{2.0, 1.0}}), NumericsError);
}
