#pragma once

#include <functional>
#include <string>

#include "clf/autodiff.hpp"
#include "clf/param_store.hpp"

namespace clf {

struct SgdOptions {
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

/// One SGD-with-momentum step over the ids present in `grads`:
///   v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v
/// Entries whose `trainable_mask` value is 0 keep both theta and v bit-unchanged.
/// Ids absent from `grads` are not touched at all.
void sgd_momentum_step(ParamStore& params, const GradMap& grads, const SgdOptions& opt,
                       const MatrixMap* trainable_mask = nullptr);

using LossBuilder = std::function<Var(Tape&, const ParamStore&)>;

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    std::string worst_id;
    Eigen::Index worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Central differences (f(θ+ε) − f(θ−ε)) / 2ε for every scalar of every entry,
/// compared to `analytic`. Relative error is |a − n| / max(|a|, |n|, 1e-6).
FiniteDiffReport finite_diff_compare(const LossBuilder& build, const ParamStore& params, const GradMap& analytic,
                                     double eps = 1e-4, double tol = 1e-3);

/// Same, with the analytic gradient taken from a reverse sweep of `build`.
/// Throws if two evaluations at the unperturbed point disagree.
FiniteDiffReport finite_diff_check(const LossBuilder& build, const ParamStore& params, double eps = 1e-4,
                                   double tol = 1e-3);

}  // namespace clf
