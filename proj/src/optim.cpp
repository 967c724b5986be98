#include "clf/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace clf {

void sgd_momentum_step(ParamStore& params, const GradMap& grads, const SgdOptions& opt,
                       const MatrixMap* trainable_mask) {
    if (!(opt.learning_rate > 0)) throw ContractError("learning rate must be positive");
    if (opt.weight_decay < 0) throw ContractError("weight decay must be non-negative");
    for (const auto& [id, g] : grads) {
        auto& e = params.at(id);
        if (g.rows() != e.value.rows() || g.cols() != e.value.cols()) {
            throw ContractError("gradient shape mismatch for '" + id + "'");
        }
        if (!e.velocity) e.velocity = Matrix::Zero(e.value.rows(), e.value.cols());
        const double wd = e.weight_decay ? opt.weight_decay : 0.0;
        const Matrix* mask = nullptr;
        if (trainable_mask) {
            auto it = trainable_mask->find(id);
            if (it != trainable_mask->end()) {
                if (it->second.rows() != g.rows() || it->second.cols() != g.cols()) {
                    throw ContractError("trainable mask shape mismatch for '" + id + "'");
                }
                mask = &it->second;
            }
        }
        Matrix& v = *e.velocity;
        Matrix& th = e.value;
        for (Eigen::Index i = 0; i < th.size(); ++i) {
            if (mask && mask->data()[i] == 0.0) continue;
            double step = g.data()[i];
            if (wd != 0.0) step += wd * th.data()[i];
            v.data()[i] = opt.momentum * v.data()[i] + step;
            th.data()[i] -= opt.learning_rate * v.data()[i];
        }
    }
}

FiniteDiffReport finite_diff_compare(const LossBuilder& build, const ParamStore& params, const GradMap& analytic,
                                     double eps, double tol) {
    FiniteDiffReport rep;
    ParamStore probe = params;
    auto eval = [&](const ParamStore& p) {
        Tape t;
        return build(t, p).scalar();
    };
    for (const auto& id : params.ids()) {
        auto it = analytic.find(id);
        Matrix& v = probe.value(id);
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            const double orig = v.data()[i];
            v.data()[i] = orig + eps;
            const double fp = eval(probe);
            v.data()[i] = orig - eps;
            const double fm = eval(probe);
            v.data()[i] = orig;
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = it == analytic.end() ? 0.0 : it->second.data()[i];
            const double denom = std::max({std::abs(ana), std::abs(num), 1e-6});
            const double rel = std::abs(ana - num) / denom;
            ++rep.checked;
            if (rel > rep.max_rel_error || rep.worst_index < 0) {
                rep.max_rel_error = std::max(rel, rep.max_rel_error);
                if (rel >= rep.max_rel_error) {
                    rep.worst_id = id;
                    rep.worst_index = i;
                    rep.analytic = ana;
                    rep.numeric = num;
                }
            }
        }
    }
    rep.passed = rep.max_rel_error < tol;
    return rep;
}

FiniteDiffReport finite_diff_check(const LossBuilder& build, const ParamStore& params, double eps, double tol) {
    Tape t1;
    const Var loss = build(t1, params);
    const double f0 = loss.scalar();
    {
        Tape t2;
        const double f1 = build(t2, params).scalar();
        if (std::memcmp(&f0, &f1, sizeof f0) != 0) {
            throw RuntimeError("finite_diff_check: loss builder is not deterministic");
        }
    }
    const GradMap g = t1.backward(loss);
    return finite_diff_compare(build, params, g, eps, tol);
}

}  // namespace clf
