#pragma once

#include <map>
#include <string>
#include <vector>

#include "clf/method_api.hpp"

namespace clf {

/// Indices (into `weights`) surviving magnitude pruning among `candidates`:
/// ⌊q·|candidates|⌋ smallest |w| are removed, ties removing the lower index first.
/// Returned in increasing order.
std::vector<std::size_t> prune_by_magnitude(const Matrix& weights, const std::vector<std::size_t>& candidates,
                                            double q);

/// Per trunk weight matrix, the owning task of each entry (1-based; 0 = free).
struct OwnershipMasks {
    std::map<std::string, std::vector<int>> owner;
    int trained = 0;  // completed task cycles

    void save(ByteWriter& w) const;
    static OwnershipMasks load(ByteReader& r);
    friend bool operator==(const OwnershipMasks& a, const OwnershipMasks& b) = default;
};

/// Parameters a finished task sees: trunk weights owned by a later task or still free are zeroed.
/// `head` is 0-based, owners are 1-based.
MultiHeadNet packnet_eval_params(const MultiHeadNet& net, const OwnershipMasks& masks, int head);

/// Used fraction per layer, one entry per trunk layer.
struct CapacityReport {
    std::vector<std::string> layers;
    std::vector<double> used;

    std::vector<double> free() const;
};

CapacityReport capacity_report(const OwnershipMasks& masks, const NetConfig& cfg);

class PackNetPlugin final : public MethodPlugin {
public:
    explicit PackNetPlugin(double prune_fraction = 0.9, double decay = 0.9);
    std::string id() const override { return "packnet"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<PackNetPlugin>(*this); }

    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    const MatrixMap* trainable_mask() const override { return &mask_; }
    std::vector<int> predict(const MultiHeadNet& net, const Matrix& x, int head) const override;
    /// Phase 1 on free weights, prune, phase 2 on the kept weights.
    TrainResult fit(MultiHeadNet& net, const TaskData& task, int head, double lr, const TrainSchedule& sched,
                    std::uint64_t seed) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    const OwnershipMasks& masks() const { return masks_; }
    const TrainResult& last_phase1() const { return phase1_; }

private:
    void build_mask(const MultiHeadNet& net, int head, bool phase2);

    OwnershipMasks masks_;
    MatrixMap mask_;
    TrainResult phase1_;
};

double hat_mask(double e, double s);
Matrix hat_mask(const Matrix& e, double s);

/// Slope for batch b (1-based) of B within an epoch, linear from 1/s_max to s_max.
double hat_anneal(std::size_t b, std::size_t B, double s_max);

/// Scales dL/dW for a layer with input-unit cumulative mask `prev_in` [1 × in]
/// and output-unit cumulative mask `prev_out` [1 × out].
Matrix hat_grad_constrain(const Matrix& grad, const Matrix& prev_in, const Matrix& prev_out);

/// c · Σ a(1−a_prev) / Σ(1−a_prev) over all units of all layers.
double hat_sparsity_reg(const std::vector<Matrix>& masks, const std::vector<Matrix>& prev, double c);
Var hat_sparsity_reg(Tape& tape, const std::vector<Var>& masks, const std::vector<Matrix>& prev, double c);

/// Rescales embedding gradients to undo the slope factor of the sigmoid.
Matrix hat_compensate(const Matrix& grad, const Matrix& e, double s, double s_max, double thres_cosh = 50.0);

struct HatOptions {
    double c = 2.5;
    double s_max = 800.0;
    bool compensate = true;
    double clamp = 6.0;
    int warmup_epochs = 10;
    std::uint64_t seed = 0x686174;
};

class HatPlugin final : public MethodPlugin {
public:
    explicit HatPlugin(HatOptions opt = {});
    std::string id() const override { return "hat"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<HatPlugin>(*this); }

    static std::string embedding_id(int head, std::size_t layer);

    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    ForwardResult forward(Tape& tape, const MultiHeadNet& net, const Matrix& x, int head, Rng& rng,
                          const StepInfo& step) override;
    std::optional<Var> penalty(BatchContext& ctx) override;
    void transform_gradients(GradMap& grads, const MultiHeadNet& net, BatchContext& ctx) override;
    void after_step(MultiHeadNet& net, const GradMap& grads, BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    std::vector<int> predict(const MultiHeadNet& net, const Matrix& x, int head) const override;
    TrainResult fit(MultiHeadNet& net, const TaskData& task, int head, double lr, const TrainSchedule& sched,
                    std::uint64_t seed) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    /// Binary cumulative unit masks per trunk layer (empty before the first task ends).
    const std::vector<Matrix>& cumulative() const { return cumulative_; }
    std::vector<Matrix> task_masks(const MultiHeadNet& net, int head) const;
    const HatOptions& options() const { return opt_; }

private:
    double current_slope(const StepInfo& step) const;
    std::vector<Matrix> prev_or_zero(const NetConfig& cfg) const;

    HatOptions opt_;
    std::vector<Matrix> cumulative_;
    std::vector<double> task_slope_;  // s_max in force when each task finished
    bool warming_up_ = false;
};

CapacityReport capacity_report(const HatPlugin& hat, const NetConfig& cfg);

}  // namespace clf
