#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "clf/param_store.hpp"
#include "clf/rng.hpp"
#include "clf/types.hpp"

namespace clf {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while its tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int index) : tape_(tape), index_(index) {}

    const Matrix& value() const;
    double scalar() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }

    Tape* tape() const { return tape_; }
    int index() const { return index_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int index_ = -1;
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so the
/// reverse sweep is a single pass from the last node to the first.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf; repeated requests for the same id return the same node.
    Var param(const std::string& id, const Matrix& value);
    Var param(const ParamStore& store, const std::string& id) { return param(id, store.value(id)); }
    Var constant(Matrix value);

    Var record(Matrix value, std::vector<int> parents, BackwardFn fn);

    /// Gradients of scalar `loss` w.r.t. every param leaf (zeros for leaves the loss does not reach).
    GradMap backward(Var loss, double seed = 1.0);

    const Matrix& value(int i) const { return nodes_[static_cast<std::size_t>(i)].value; }
    /// Accumulate `g` into the gradient of node i.
    void accumulate(int i, const Matrix& g);
    const Matrix& grad(int i) const { return nodes_[static_cast<std::size_t>(i)].grad; }
    int parent(int self, std::size_t k) const { return nodes_[static_cast<std::size_t>(self)].parents[k]; }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    /// Number of nodes whose backward closure ran during the last sweep.
    std::size_t visited() const { return visited_; }

private:
    struct Node {
        Matrix value;
        Matrix grad;  // empty until something flows in
        std::vector<int> parents;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::map<std::string, int> params_;
    bool consumed_ = false;
    std::size_t visited_ = 0;
};

namespace ad {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product; shapes must match.
Var mul(Var a, Var b);
Var scale(Var a, double k);
/// a [n×m] + row [1×m] broadcast over rows.
Var add_row(Var a, Var row);
/// a [n×m] ⊙ row [1×m] broadcast over rows.
Var mul_row(Var a, Var row);
Var relu(Var a);
Var sigmoid(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
/// Multiply by a fixed 0/1 (or scaled) mask; gradient flows through the same mask.
Var apply_mask(Var a, const Matrix& mask);
/// Σ w ⊙ (a − anchor)².
Var weighted_sq_dist(Var a, const Matrix& anchor, const Matrix& weight);
/// Σ (a − target)².
Var sq_dist(Var a, const Matrix& target);
/// Mean over rows of −log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
/// Mean over rows of −Σ_c p_c · log softmax(logits / tau)_c for fixed target probabilities p.
Var soft_cross_entropy(Var logits, const Matrix& target_probs, double tau);

}  // namespace ad

/// Row-wise softmax of logits / tau.
Matrix softmax_rows(const Matrix& logits, double tau = 1.0);

/// Inverted dropout mask: entries are 0 or 1/keep. keep == 1 yields all ones.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double keep, Rng& rng);

}  // namespace clf
