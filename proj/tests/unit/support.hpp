#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fedcspc/autodiff.hpp"
#include "fedcspc/tensor.hpp"

namespace testing_support {

// Central differences of a scalar function, computed independently of the library.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + h;
        const double up = f(x);
        x[i] = xi - h;
        const double down = f(x);
        x[i] = xi;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double norm_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

inline std::vector<double> to_vector(const fedcspc::Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline std::vector<double> gaussian(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> d(0.0, sd);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

inline fedcspc::Tensor gaussian_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
    return fedcspc::Tensor::matrix(r, c, gaussian(r * c, rng, sd));
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline std::vector<double> unit(std::vector<double> a) {
    double n = norm(a);
    if (n == 0.0) return a;  // dead ReLU units can zero a whole embedding
    for (auto& x : a) x /= n;
    return a;
}

}  // namespace testing_support
