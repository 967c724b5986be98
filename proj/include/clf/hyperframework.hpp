#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clf/eval_report.hpp"
#include "clf/method_api.hpp"

namespace clf {

struct FrameworkConfig {
    std::vector<double> lr_grid{1e-2, 5e-3, 1e-3, 5e-4, 1e-4};
    std::vector<double> first_task_extra{1e-1, 5e-2};  // prepended when the first task trains from scratch
    double p = 0.2;
    double alpha = 0.5;

    void validate() const;
    /// Grid for stream position `task`.
    std::vector<double> grid_for(std::size_t task) const;
};

/// Worker count from CLF_WORKERS (default 1, at least 1).
std::size_t workers_from_env();

// ---------------------------------------------------------------------------
// Maximal plasticity search

struct GridResult {
    double lr = 0.0;
    double val_acc = 0.0;
    bool diverged = false;
};

struct PlasticityResult {
    std::size_t best = 0;
    double lr = 0.0;
    double a_star = 0.0;
    std::vector<GridResult> grid;
};

/// Runs `train(index, lr)` for every grid entry (concurrently when workers > 1)
/// and picks the highest validation accuracy; ties go to the earlier entry.
/// Throws RuntimeError when every candidate diverged.
PlasticityResult plasticity_select(const std::vector<double>& grid,
                                   const std::function<GridResult(std::size_t, double)>& train,
                                   std::size_t workers = 1);

struct PlasticitySearch {
    PlasticityResult result;
    MultiHeadNet best_model;  // finetuned copy at the chosen rate
};

/// Finetunes a copy of `net` (head already appended) for each rate. Candidate
/// i trains with seed derive_seed(seed, {task, i}).
PlasticitySearch maximal_plasticity_search(const MultiHeadNet& net, const TaskData& task, int head,
                                           const std::vector<double>& grid, const TrainSchedule& sched,
                                           std::uint64_t seed, std::size_t task_index, std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Stability decay

/// Value after one decay step: v · factor clamped at the floor. Values already
/// at or below the floor (including 0) stay put.
double decay_value(const HyperParam& h, double alpha);

/// Candidates for one decay round from `h`: each forgetting-related value
/// decayed on its own in declared order, then all of them together. Candidates
/// equal to `h` or to an earlier candidate are dropped.
std::vector<HyperSet> decay_policy(const HyperSet& h, double alpha);

/// Upper bound on decay rounds: Σ ⌈log_{1/α}(h/floor)⌉ over forgetting entries.
std::size_t decay_round_bound(const HyperSet& h, double alpha);

struct DecayAttempt {
    HyperSet hyper;
    double val_acc = 0.0;
    std::size_t round = 0;  // 0 = initial values
    std::string decision;   // "accept", "reject", "floor-accept"
};

struct DecayOutcome {
    std::size_t accepted = 0;  // index into attempts
    HyperSet hyper;
    bool floor_terminated = false;
    std::size_t rounds = 0;
    std::vector<DecayAttempt> attempts;
};

/// Trains at the current values, accepts once val acc ≥ (1−p)·A*, otherwise
/// walks decay_policy rounds. When nothing decays further, the best attempt so
/// far is accepted and the outcome is flagged floor-terminated.
DecayOutcome stability_decay(const HyperSet& initial, double a_star, double p, double alpha,
                             const std::function<double(const HyperSet&, std::size_t attempt)>& train);

// ---------------------------------------------------------------------------
// Method registry

struct MethodSpec {
    std::string id = "finetune";
    std::map<std::string, double> hyper;  // overrides of initial values
    std::size_t buffer_capacity = 0;      // replay methods
    std::size_t total_tasks = 1;
};

const std::vector<std::string>& method_ids();
bool is_known_method(const std::string& id);
/// Throws ConfigError on unknown ids or hyperparameter names.
std::unique_ptr<MethodPlugin> make_method(const MethodSpec& spec);

// ---------------------------------------------------------------------------
// Sequence runner

/// The runner's only door to data. Step t may read train_view(t) and, once
/// task t is trained, test_split(i) for i ≤ t.
class TaskSource {
public:
    virtual ~TaskSource() = default;
    virtual std::size_t size() const = 0;
    /// Task t with its test split left empty.
    virtual TaskData train_view(std::size_t t) = 0;
    virtual SplitData test_split(std::size_t i) = 0;
};

class StreamSource final : public TaskSource {
public:
    explicit StreamSource(const TaskStream& s) : stream_(s) {}
    std::size_t size() const override { return stream_.size(); }
    TaskData train_view(std::size_t t) override;
    SplitData test_split(std::size_t i) override;

private:
    const TaskStream& stream_;
};

struct RunSettings {
    NetConfig net;
    TrainSchedule sched;
    FrameworkConfig framework;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct TaskRecord {
    PlasticityResult search;
    HyperSet hyper;  // values in force after the task
    bool floor_terminated = false;
    std::optional<CapacityReport> capacity;
};

class SequenceRunner {
public:
    SequenceRunner(RunSettings settings, std::unique_ptr<MethodPlugin> plugin, std::size_t total_tasks);

    std::size_t next_task() const { return next_; }
    bool done() const { return next_ >= total_; }
    /// Trains and evaluates the next task.
    void step(TaskSource& source);
    void run(TaskSource& source);

    const MultiHeadNet& net() const { return net_; }
    const MethodPlugin& plugin() const { return *plugin_; }
    const AccuracyMatrix& matrix() const { return matrix_; }
    const std::vector<AttemptRow>& attempts() const { return attempts_; }
    const std::vector<TaskRecord>& records() const { return records_; }
    const RunSettings& settings() const { return settings_; }

    /// Everything needed to continue: progress, net, plugin state and hyper values, results so far.
    void save(ByteWriter& w) const;
    /// Restores into a runner constructed with the same settings and method.
    void load(ByteReader& r);

private:
    RunSettings settings_;
    std::unique_ptr<MethodPlugin> plugin_;
    std::size_t total_;
    std::size_t next_ = 0;
    MultiHeadNet net_;
    AccuracyMatrix matrix_;
    std::vector<AttemptRow> attempts_;
    std::vector<TaskRecord> records_;
};

std::string describe(const HyperSet& h);

/// Joint training over the whole stream with a learning-rate grid. Every row of
/// the returned matrix holds the final model's test accuracies.
struct JointRun {
    AccuracyMatrix matrix;
    PlasticityResult search;
    std::vector<AttemptRow> attempts;
};

JointRun run_joint(const TaskStream& stream, const RunSettings& settings);

}  // namespace clf
