#include "clf/autodiff.hpp"

#include <cmath>

namespace clf {

const Matrix& Var::value() const {
    if (!tape_) throw ContractError("use of an unbound Var");
    return tape_->value(index_);
}

double Var::scalar() const {
    const auto& v = value();
    if (v.size() != 1) throw ContractError("Var::scalar on a non-scalar node");
    return v(0, 0);
}

Var Tape::param(const std::string& id, const Matrix& value) {
    if (auto it = params_.find(id); it != params_.end()) return Var(this, it->second);
    auto v = record(value, {}, nullptr);
    params_.emplace(id, v.index());
    return v;
}

Var Tape::constant(Matrix value) { return record(std::move(value), {}, nullptr); }

Var Tape::record(Matrix value, std::vector<int> parents, BackwardFn fn) {
    if (consumed_) throw ContractError("cannot record on a consumed tape");
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(parents), std::move(fn)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int i, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) {
        throw ContractError("gradient shape mismatch during reverse sweep");
    }
    if (n.grad.size() == 0 && n.value.size() != 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

GradMap Tape::backward(Var loss, double seed) {
    if (consumed_) throw ContractError("tape already consumed by a previous backward pass");
    if (loss.tape() != this) throw ContractError("loss does not belong to this tape");
    if (loss.value().size() != 1) throw ContractError("backward requires a scalar loss");
    consumed_ = true;
    visited_ = 0;
    accumulate(loss.index(), Matrix::Constant(1, 1, seed));
    for (int i = loss.index(); i >= 0; --i) {
        auto& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.backward || n.grad.size() == 0) continue;
        n.backward(*this, i);
        ++visited_;
    }
    GradMap out;
    for (const auto& [id, idx] : params_) {
        const auto& n = nodes_[static_cast<std::size_t>(idx)];
        out.emplace(id, n.grad.size() ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols()));
    }
    return out;
}

namespace ad {

namespace {

Tape& same_tape(Var a, Var b) {
    if (!a.valid() || a.tape() != b.tape()) throw ContractError("operands recorded on different tapes");
    return *a.tape();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractError(std::string(op) + ": shape mismatch");
    }
}

}  // namespace

Var matmul(Var a, Var b) {
    auto& t = same_tape(a, b);
    if (a.cols() != b.rows()) throw ContractError("matmul: inner dimensions differ");
    Matrix out = a.value() * b.value();
    return t.record(std::move(out), {a.index(), b.index()}, [](Tape& tp, int self) {
        const int pa = tp.parent(self, 0);
        const int pb = tp.parent(self, 1);
        const Matrix& g = tp.grad(self);
        tp.accumulate(pa, g * tp.value(pb).transpose());
        tp.accumulate(pb, tp.value(pa).transpose() * g);
    });
}

Var add(Var a, Var b) {
    auto& t = same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    return t.record(a.value() + b.value(), {a.index(), b.index()}, [](Tape& tp, int self) {
        tp.accumulate(tp.parent(self, 0), tp.grad(self));
        tp.accumulate(tp.parent(self, 1), tp.grad(self));
    });
}

Var sub(Var a, Var b) {
    auto& t = same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    return t.record(a.value() - b.value(), {a.index(), b.index()}, [](Tape& tp, int self) {
        tp.accumulate(tp.parent(self, 0), tp.grad(self));
        tp.accumulate(tp.parent(self, 1), -tp.grad(self));
    });
}

Var mul(Var a, Var b) {
    auto& t = same_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    return t.record(a.value().cwiseProduct(b.value()), {a.index(), b.index()}, [](Tape& tp, int self) {
        const int pa = tp.parent(self, 0);
        const int pb = tp.parent(self, 1);
        tp.accumulate(pa, tp.grad(self).cwiseProduct(tp.value(pb)));
        tp.accumulate(pb, tp.grad(self).cwiseProduct(tp.value(pa)));
    });
}

Var scale(Var a, double k) {
    return a.tape()->record(a.value() * k, {a.index()}, [k](Tape& tp, int self) {
        tp.accumulate(tp.parent(self, 0), tp.grad(self) * k);
    });
}

Var add_row(Var a, Var row) {
    auto& t = same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) throw ContractError("add_row: row shape mismatch");
    Matrix out = a.value().rowwise() + row.value().row(0);
    return t.record(std::move(out), {a.index(), row.index()}, [](Tape& tp, int self) {
        const Matrix& g = tp.grad(self);
        tp.accumulate(tp.parent(self, 0), g);
        tp.accumulate(tp.parent(self, 1), g.colwise().sum());
    });
}

Var mul_row(Var a, Var row) {
    auto& t = same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) throw ContractError("mul_row: row shape mismatch");
    Matrix out = a.value().array().rowwise() * row.value().row(0).array();
    return t.record(std::move(out), {a.index(), row.index()}, [](Tape& tp, int self) {
        const int pa = tp.parent(self, 0);
        const int pr = tp.parent(self, 1);
        const Matrix& g = tp.grad(self);
        Matrix ga = g.array().rowwise() * tp.value(pr).row(0).array();
        tp.accumulate(pa, ga);
        tp.accumulate(pr, g.cwiseProduct(tp.value(pa)).colwise().sum());
    });
}

Var relu(Var a) {
    Matrix out = a.value().cwiseMax(0.0);
    return a.tape()->record(std::move(out), {a.index()}, [](Tape& tp, int self) {
        const int pa = tp.parent(self, 0);
        Matrix g = (tp.value(pa).array() > 0.0).select(tp.grad(self), 0.0);
        tp.accumulate(pa, g);
    });
}

Var sigmoid(Var a) {
    Matrix out = a.value().unaryExpr([](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
    return a.tape()->record(std::move(out), {a.index()}, [](Tape& tp, int self) {
        const Matrix& s = tp.value(self);
        Matrix g = tp.grad(self).array() * s.array() * (1.0 - s.array());
        tp.accumulate(tp.parent(self, 0), g);
    });
}

Var square(Var a) {
    return a.tape()->record(a.value().cwiseAbs2(), {a.index()}, [](Tape& tp, int self) {
        const int pa = tp.parent(self, 0);
        tp.accumulate(pa, 2.0 * tp.grad(self).cwiseProduct(tp.value(pa)));
    });
}

Var sum(Var a) {
    return a.tape()->record(Matrix::Constant(1, 1, a.value().sum()), {a.index()}, [](Tape& tp, int self) {
        const int pa = tp.parent(self, 0);
        const auto& v = tp.value(pa);
        tp.accumulate(pa, Matrix::Constant(v.rows(), v.cols(), tp.grad(self)(0, 0)));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw ContractError("mean of an empty array");
    return scale(sum(a), 1.0 / n);
}

Var apply_mask(Var a, const Matrix& mask) {
    require_same_shape(a.value(), mask, "apply_mask");
    return a.tape()->record(a.value().cwiseProduct(mask), {a.index()}, [mask](Tape& tp, int self) {
        tp.accumulate(tp.parent(self, 0), tp.grad(self).cwiseProduct(mask));
    });
}

Var weighted_sq_dist(Var a, const Matrix& anchor, const Matrix& weight) {
    require_same_shape(a.value(), anchor, "weighted_sq_dist anchor");
    require_same_shape(a.value(), weight, "weighted_sq_dist weight");
    const Matrix diff = a.value() - anchor;
    const double v = (weight.array() * diff.array().square()).sum();
    return a.tape()->record(Matrix::Constant(1, 1, v), {a.index()}, [diff, weight](Tape& tp, int self) {
        tp.accumulate(tp.parent(self, 0), 2.0 * tp.grad(self)(0, 0) * weight.cwiseProduct(diff));
    });
}

Var sq_dist(Var a, const Matrix& target) {
    require_same_shape(a.value(), target, "sq_dist");
    const Matrix diff = a.value() - target;
    return a.tape()->record(Matrix::Constant(1, 1, diff.squaredNorm()), {a.index()}, [diff](Tape& tp, int self) {
        tp.accumulate(tp.parent(self, 0), 2.0 * tp.grad(self)(0, 0) * diff);
    });
}

namespace {

/// Row-wise log-softmax with max subtraction.
Matrix log_softmax_rows(const Matrix& z) {
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        const double lse = m + std::log((z.row(i).array() - m).exp().sum());
        out.row(i) = z.row(i).array() - lse;
    }
    return out;
}

}  // namespace

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
    const Matrix& z = logits.value();
    if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
        throw ContractError("softmax_cross_entropy: label count differs from batch size");
    }
    if (z.rows() == 0) throw ContractError("softmax_cross_entropy: empty batch");
    std::vector<int> y(labels.begin(), labels.end());
    for (int l : y) {
        if (l < 0 || l >= z.cols()) throw ContractError("label out of range for head");
    }
    const Matrix logp = log_softmax_rows(z);
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) total -= logp(i, y[static_cast<std::size_t>(i)]);
    const double n = static_cast<double>(z.rows());
    return logits.tape()->record(Matrix::Constant(1, 1, total / n), {logits.index()},
                                 [logp, y, n](Tape& tp, int self) {
                                     Matrix g = logp.array().exp();
                                     for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, y[static_cast<std::size_t>(i)]) -= 1.0;
                                     tp.accumulate(tp.parent(self, 0), g * (tp.grad(self)(0, 0) / n));
                                 });
}

Var soft_cross_entropy(Var logits, const Matrix& target_probs, double tau) {
    require_same_shape(logits.value(), target_probs, "soft_cross_entropy");
    if (!(tau > 0)) throw ContractError("temperature must be positive");
    const Matrix logq = log_softmax_rows(logits.value() / tau);
    const double n = static_cast<double>(logits.rows());
    if (n == 0) throw ContractError("soft_cross_entropy: empty batch");
    const double v = -(target_probs.array() * logq.array()).sum() / n;
    return logits.tape()->record(Matrix::Constant(1, 1, v), {logits.index()},
                                 [logq, target_probs, tau, n](Tape& tp, int self) {
                                     // d/dz of -Σ p log softmax(z/τ) = (softmax(z/τ)·Σp − p) / τ
                                     const Eigen::ArrayXd mass = target_probs.rowwise().sum().array();
                                     Matrix q = logq.array().exp();
                                     Matrix g = (q.array().colwise() * mass - target_probs.array()) / tau;
                                     tp.accumulate(tp.parent(self, 0), g * (tp.grad(self)(0, 0) / n));
                                 });
}

}  // namespace ad

Matrix softmax_rows(const Matrix& logits, double tau) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const Eigen::ArrayXd z = logits.row(i).transpose().array() / tau;
        const Eigen::ArrayXd e = (z - z.maxCoeff()).exp();
        out.row(i) = (e / e.sum()).transpose();
    }
    return out;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double keep, Rng& rng) {
    if (!(keep > 0.0 && keep <= 1.0)) throw ContractError("dropout keep-probability must lie in (0, 1]");
    Matrix m = Matrix::Ones(rows, cols);
    if (keep == 1.0) return m;
    const double s = 1.0 / keep;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < keep ? s : 0.0;
    return m;
}

}  // namespace clf
