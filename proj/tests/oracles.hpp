#pragma once

// Reference implementations used only by tests. They trade speed for
// obviousness and share no code with the library versions.

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "clf/types.hpp"

namespace clf::testing {

/// Greedy herding by brute force in long double: at step k evaluate
/// ‖k·μ − (S + φ_i)‖ for every unused i. Near-ties (1e-12 relative) go to the lowest index.
inline std::vector<std::size_t> herding_oracle(const Matrix& f, std::size_t m) {
    const auto n = static_cast<std::size_t>(f.rows());
    const auto d = static_cast<std::size_t>(f.cols());
    std::vector<long double> mu(d, 0.0L);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) mu[j] += f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    for (auto& v : mu) v /= static_cast<long double>(n);
    std::vector<long double> sum(d, 0.0L);
    std::vector<bool> used(n, false);
    std::vector<std::size_t> out;
    for (std::size_t k = 1; k <= m; ++k) {
        std::vector<long double> dist(n, std::numeric_limits<long double>::infinity());
        long double best = std::numeric_limits<long double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            long double s = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const long double e =
                    mu[j] - (sum[j] + f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) / k;
                s += e * e;
            }
            dist[i] = s;
            best = std::min(best, s);
        }
        std::size_t arg = n;
        for (std::size_t i = 0; i < n && arg == n; ++i) {
            if (!used[i] && dist[i] <= best + 1e-12L * std::max<long double>(1.0L, best)) arg = i;
        }
        used[arg] = true;
        for (std::size_t j = 0; j < d; ++j) sum[j] += f(static_cast<Eigen::Index>(arg), static_cast<Eigen::Index>(j));
        out.push_back(arg);
    }
    return out;
}

/// Exhaustive active-set enumeration for min ½vᵀAv + bᵀv, v ≥ 0 with A = GGᵀ,
/// b = Gg. Every support set S is tried; the KKT point with the smallest
/// objective wins. Returns g′ = Gᵀ(v + γ) + g.
inline Vector gem_oracle(const Vector& g, const Matrix& G, double gamma) {
    const Eigen::Index k = G.rows();
    const Vector dots = G * g;
    if (k == 0 || dots.minCoeff() >= 0.0) return g;
    const Matrix A = G * G.transpose();
    const Vector b = dots;
    const double scale = std::max({1.0, A.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff()});
    std::optional<Vector> best;
    double best_obj = std::numeric_limits<double>::infinity();
    for (unsigned mask = 0; mask < (1u << k); ++mask) {
        std::vector<Eigen::Index> s;
        for (Eigen::Index i = 0; i < k; ++i) {
            if (mask & (1u << i)) s.push_back(i);
        }
        Vector v = Vector::Zero(k);
        if (!s.empty()) {
            const auto n = static_cast<Eigen::Index>(s.size());
            Matrix As(n, n);
            Vector bs(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                bs(i) = b(s[static_cast<std::size_t>(i)]);
                for (Eigen::Index j = 0; j < n; ++j) {
                    As(i, j) = A(s[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(j)]);
                }
            }
            // Pseudo-inverse handles rank-deficient G (more constraints than dimensions).
            const Vector vs = As.completeOrthogonalDecomposition().pseudoInverse() * (-bs);
            for (Eigen::Index i = 0; i < n; ++i) v(s[static_cast<std::size_t>(i)]) = vs(i);
        }
        if (v.minCoeff() < -1e-12 * scale) continue;
        const Vector grad = A * v + b;
        bool kkt = true;
        for (Eigen::Index i = 0; i < k; ++i) {
            if (grad(i) < -1e-8 * scale) kkt = false;
            if (v(i) > 1e-12 * scale && std::abs(grad(i)) > 1e-8 * scale) kkt = false;
        }
        if (!kkt) continue;
        const double obj = 0.5 * v.dot(A * v) + b.dot(v);
        if (obj < best_obj) {
            best_obj = obj;
            best = v;
        }
    }
    if (!best) throw RuntimeError("gem_oracle: no KKT point found");
    return G.transpose() * (best->array().max(0.0) + gamma).matrix() + g;
}

}  // namespace clf::testing
