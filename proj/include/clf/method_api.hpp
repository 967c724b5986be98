#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clf/binary_io.hpp"
#include "clf/network.hpp"
#include "clf/taskstream.hpp"

namespace clf {

/// A named positive hyperparameter. Forgetting-related entries are the ones
/// the stability-decay phase is allowed to shrink.
struct HyperParam {
    std::string name;
    double value = 0.0;
    bool forgetting = false;
    double floor = 1e-6;
    double decay = 0.0;  // per-parameter decay factor; 0 means "use the framework's"
};

class HyperSet {
public:
    HyperSet() = default;
    HyperSet(std::initializer_list<HyperParam> items) : items_(items) {}

    void add(HyperParam p);
    double get(const std::string& name) const;
    void set(const std::string& name, double value);
    bool has(const std::string& name) const;
    const HyperParam& at(const std::string& name) const;

    std::vector<std::string> forgetting_names() const;
    const std::vector<HyperParam>& items() const { return items_; }
    std::vector<HyperParam>& items() { return items_; }
    bool empty() const { return items_.empty(); }

    friend bool operator==(const HyperSet& a, const HyperSet& b);

    void save(ByteWriter& w) const;
    static HyperSet load(ByteReader& r);

private:
    std::vector<HyperParam> items_;
};

struct StepInfo {
    std::size_t batch = 0;  // 0-based within the epoch
    std::size_t batches_per_epoch = 1;
    int epoch = 1;
};

/// Everything a plugin may look at while one training step is being built.
struct BatchContext {
    Tape& tape;
    const MultiHeadNet& net;
    const TaskData& task;
    int head;
    const std::vector<std::size_t>& rows;  // indices into task.train
    const Matrix& x;
    const std::vector<int>& y;
    const ForwardResult& out;
    StepInfo step;
    Rng& rng;
};

struct EpochLog {
    int epoch = 0;
    double val_acc = 0.0;
    double learning_rate = 0.0;
    bool improved = false;
    bool annealed = false;
};

struct TrainResult {
    double best_val_acc = 0.0;
    int best_epoch = 0;
    int epochs_run = 0;
    bool diverged = false;
    std::vector<EpochLog> log;
};

/// Contract every continual-learning method implements. Hooks default to the
/// finetuning behaviour; state lives in the plugin object and is serialized
/// through save_state/load_state.
class MethodPlugin {
public:
    virtual ~MethodPlugin() = default;

    virtual std::string id() const = 0;
    virtual std::unique_ptr<MethodPlugin> clone() const = 0;

    HyperSet& hyper() { return hyper_; }
    const HyperSet& hyper() const { return hyper_; }

    virtual void on_task_start(MultiHeadNet& net, const TaskData& task, int head);
    virtual ForwardResult forward(Tape& tape, const MultiHeadNet& net, const Matrix& x, int head, Rng& rng,
                                  const StepInfo& step);
    virtual std::optional<Var> penalty(BatchContext& ctx);
    virtual void transform_gradients(GradMap& grads, const MultiHeadNet& net, BatchContext& ctx);
    /// Zero entries are frozen for the optimizer; nullptr means everything trains.
    virtual const MatrixMap* trainable_mask() const { return nullptr; }
    virtual void after_step(MultiHeadNet& net, const GradMap& grads, BatchContext& ctx);
    virtual void on_task_end(MultiHeadNet& net, const TaskData& task, int head);
    virtual std::vector<int> predict(const MultiHeadNet& net, const Matrix& x, int head) const;
    /// Model used for the accuracy matrix once a task is finished (merged model for IMM).
    virtual MultiHeadNet evaluation_net(const MultiHeadNet& net) const { return net; }
    /// Batch size to draw from the new task's training data.
    virtual std::size_t new_task_batch_size(std::size_t batch_size) const { return batch_size; }
    virtual TrainSchedule adjust_schedule(TrainSchedule s) const { return s; }

    /// Trains the current head on `task`. The default runs train_task with this plugin.
    virtual TrainResult fit(MultiHeadNet& net, const TaskData& task, int head, double lr,
                            const TrainSchedule& sched, std::uint64_t seed);

    virtual void save_state(ByteWriter& w) const;
    virtual void load_state(ByteReader& r);

    /// Whether the stability-decay phase applies (some forgetting-related hyperparameter exists).
    virtual bool uses_stability_decay() const { return !hyper_.forgetting_names().empty(); }

    /// True when every forgetting-related hyperparameter is exactly zero.
    bool forgetting_disabled() const;

protected:
    HyperSet hyper_;
};

double evaluate_with(const MethodPlugin& plugin, const MultiHeadNet& net, const SplitData& data, int head);

/// Per-task training loop: base cross-entropy plus plugin penalty, plugin
/// gradient transform, SGD with momentum, per-epoch validation with the
/// anneal/stop schedule. Leaves `net` holding the best-validation parameters.
TrainResult train_task(MultiHeadNet& net, const TaskData& task, int head, double lr, const TrainSchedule& sched,
                       MethodPlugin& plugin, std::uint64_t seed);

class FinetunePlugin final : public MethodPlugin {
public:
    std::string id() const override { return "finetune"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<FinetunePlugin>(*this); }
};

std::unique_ptr<MethodPlugin> finetune_plugin();

/// Trains one model on every task at once (not a continual setting). Each
/// batch comes from one task drawn uniformly at random and is routed to that
/// task's head. Validation accuracy is the mean over tasks.
struct JointResult {
    MultiHeadNet net;
    TrainResult train;
};

JointResult train_joint(const TaskStream& stream, const NetConfig& cfg, const TrainSchedule& sched, double lr,
                        std::uint64_t seed);

}  // namespace clf
