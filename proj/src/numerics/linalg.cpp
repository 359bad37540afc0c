#include "ifcd/numerics/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace ifcd::numerics {

void Matrix::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

Vec matvec(const Matrix& a, std::span<const double> x) {
    require(a.cols() == x.size(), "matvec: dimension mismatch");
    Vec y(a.rows(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        y[r] = dot(a.row(r), x);
    }
    return y;
}

Vec matvec_transposed(const Matrix& a, std::span<const double> x) {
    require(a.rows() == x.size(), "matvec_transposed: dimension mismatch");
    Vec y(a.cols(), 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        axpy(x[r], a.row(r), y);
    }
    return y;
}

void add_outer(Matrix& a, std::span<const double> u, std::span<const double> v, double scale) {
    require(a.rows() == u.size() && a.cols() == v.size(), "add_outer: dimension mismatch");
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const double s = scale * u[r];
        if (s == 0.0) {
            continue;
        }
        axpy(s, v, a.row(r));
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

void axpy(double scale, std::span<const double> x, std::span<double> y) {
    require(x.size() == y.size(), "axpy: dimension mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += scale * x[i];
    }
}

Vec add(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "add: dimension mismatch");
    Vec out(a.begin(), a.end());
    axpy(1.0, b, out);
    return out;
}

Vec sub(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "sub: dimension mismatch");
    Vec out(a.begin(), a.end());
    axpy(-1.0, b, out);
    return out;
}

Vec scaled(std::span<const double> a, double s) {
    Vec out(a.begin(), a.end());
    for (auto& v : out) {
        v *= s;
    }
    return out;
}

bool all_finite(std::span<const double> a) noexcept {
    return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace ifcd::numerics
