#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vshap/tensor.hpp"

namespace testutil {

// central finite differences of a scalar function of a flat vector
inline std::vector<double> fd_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& x, double h = 1e-5) {
    std::vector<double> g(x.size());
    std::vector<double> p = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        p[i] = x[i] + h;
        const double up = f(p);
        p[i] = x[i] - h;
        const double dn = f(p);
        p[i] = x[i];
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

// max relative error with absolute floor, the gradcheck metric
inline double max_rel_err(const std::vector<double>& a,
                          const std::vector<double>& b, double floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom =
            std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

inline std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng,
                                      double lo = -2.0, double hi = 2.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

// analytic-vs-reverse-mode check for f: R^n -> R expressed on Tensors
inline double gradcheck(
    const std::function<vshap::Tensor(const vshap::Tensor&)>& f,
    const std::vector<int>& shape, const std::vector<double>& x0,
    double h = 1e-5) {
    auto x = vshap::Tensor::from(shape, x0, true);
    auto y = f(x);
    vshap::backward(y);
    const std::vector<double> analytic = x.grad();
    auto scalar = [&](const std::vector<double>& v) {
        vshap::NoGradGuard ng;
        return f(vshap::Tensor::from(shape, v)).item();
    };
    return max_rel_err(analytic, fd_gradient(scalar, x0, h));
}

}  // namespace testutil
