#pragma once

// Central finite-difference oracle. Independent of the tape: it only calls the
// forward function with perturbed leaf values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "scma/tensor.hpp"

namespace scma::testing {

struct GradCheckResult {
    double relative_error = 0.0;
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
};

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
    return std::sqrt(diff) / denom;
}

/// Numeric gradient of f() with respect to selected coordinates of `leaf`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor leaf,
                                            const std::vector<std::size_t>& coords, double h = 1e-5) {
    std::vector<double> g;
    auto data = leaf.mutable_data();
    for (auto i : coords) {
        const double orig = data[i];
        data[i] = orig + h;
        const double fp = f();
        data[i] = orig - h;
        const double fm = f();
        data[i] = orig;
        g.push_back((fp - fm) / (2.0 * h));
    }
    return g;
}

inline std::vector<std::size_t> all_coords(const Tensor& t) {
    std::vector<std::size_t> c(t.size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = i;
    return c;
}

inline std::vector<std::size_t> sample_coords(const Tensor& t, std::size_t count, std::mt19937_64& rng) {
    if (t.size() <= count) return all_coords(t);
    std::vector<std::size_t> c = all_coords(t);
    std::shuffle(c.begin(), c.end(), rng);
    c.resize(count);
    std::sort(c.begin(), c.end());
    return c;
}

/// Compares tape gradients of `loss_fn` against central differences for the
/// given leaves (all coordinates, or `max_coords` sampled ones per leaf).
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                       std::mt19937_64& rng, std::size_t max_coords = 0, double h = 1e-5) {
    for (auto& l : leaves) l.zero_grad();
    Tensor loss = loss_fn();
    backward(loss);
    std::vector<double> analytic, numeric;
    auto f = [&] { return loss_fn().item(); };
    for (auto& l : leaves) {
        auto coords = max_coords ? sample_coords(l, max_coords, rng) : all_coords(l);
        auto num = numeric_gradient(f, l, coords, h);
        numeric.insert(numeric.end(), num.begin(), num.end());
        for (auto i : coords) analytic.push_back(l.has_grad() ? l.grad()[i] : 0.0);
    }
    GradCheckResult r;
    r.relative_error = relative_error(analytic, numeric);
    for (double v : analytic) r.analytic_norm += v * v;
    for (double v : numeric) r.numeric_norm += v * v;
    r.analytic_norm = std::sqrt(r.analytic_norm);
    r.numeric_norm = std::sqrt(r.numeric_norm);
    return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = d(rng);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Values with |x| in [margin, hi], random sign; keeps kinked ops away from 0.
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 0.05, double hi = 1.0) {
    std::uniform_real_distribution<double> d(margin, hi);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = sign(rng) ? d(rng) : -d(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace scma::testing
