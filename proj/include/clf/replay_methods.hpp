#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clf/method_api.hpp"

namespace clf {

enum class BufferPolicy { partial, full };

std::string to_string(BufferPolicy p);
BufferPolicy parse_buffer_policy(const std::string& s);

/// Exemplars of one class, kept in selection order so truncation drops the
/// latest picks first.
struct ClassExemplars {
    int label = 0;  // task-local class index
    Matrix x;
    std::vector<std::size_t> source_rows;  // rows of the task's train split

    std::size_t size() const { return source_rows.size(); }
};

struct TaskExemplars {
    int task = 0;  // head index
    std::vector<ClassExemplars> classes;

    std::size_t size() const;
    Matrix inputs() const;
    std::vector<int> labels() const;
    void truncate(std::size_t quota);
};

/// Quota per seen task after `seen` tasks. full: ⌊R/seen⌋, partial: ⌊R/T_total⌋.
std::vector<std::size_t> buffer_allocate(std::size_t capacity, BufferPolicy policy, std::size_t seen,
                                         std::size_t total_tasks);

/// Splits `quota` over `parts` so the counts differ by at most one; earlier parts get the extra.
std::vector<std::size_t> split_evenly(std::size_t quota, std::size_t parts);

class ReplayBuffer {
public:
    ReplayBuffer() = default;
    ReplayBuffer(std::size_t capacity, BufferPolicy policy, std::size_t total_tasks);

    std::size_t capacity() const { return capacity_; }
    BufferPolicy policy() const { return policy_; }
    std::size_t total_tasks() const { return total_tasks_; }

    /// Quota for the next task to be stored (the buffer then holds tasks().size()+1 tasks).
    std::size_t next_quota() const;
    /// Appends a task and shrinks earlier ones to the current quota.
    void store(TaskExemplars ex);
    void rebalance();

    const std::vector<TaskExemplars>& tasks() const { return tasks_; }
    const TaskExemplars* find(int task) const;
    std::size_t total() const;
    bool empty() const { return total() == 0; }

    void save(ByteWriter& w) const;
    static ReplayBuffer load(ByteReader& r);
    friend bool operator==(const ReplayBuffer& a, const ReplayBuffer& b);

private:
    std::size_t capacity_ = 0;
    BufferPolicy policy_ = BufferPolicy::full;
    std::size_t total_tasks_ = 1;
    std::vector<TaskExemplars> tasks_;
};

/// Greedy herding: each step picks the unused row whose addition brings the
/// running mean closest to the mean of all rows. Ties within 1e-12 relative go
/// to the lowest index.
std::vector<std::size_t> herding_select(const Matrix& features, std::size_t m);

/// Uniform random subset of size m in draw order.
std::vector<std::size_t> random_select(std::size_t n, std::size_t m, Rng& rng);

Matrix l2_normalize_rows(const Matrix& m);

/// Nearest class mean on L2-normalized features. `class_features[c]` holds
/// the exemplar features of class c. Ties go to the lowest class.
std::vector<int> nearest_mean_predict(const Matrix& features, const std::vector<Matrix>& class_features);

/// Exemplar-based classification for one head, using the net's current features.
std::vector<int> nearest_mean_predict(const MultiHeadNet& net, const Matrix& x, const TaskExemplars& ex);

struct RehearsalBatch {
    Matrix x;
    std::vector<int> y;
    std::vector<int> head;
    std::size_t exemplar_count = 0;
};

/// Replaces the tail of a new-task batch of B rows by ⌈mix·B⌉ exemplars drawn
/// round-robin over stored tasks, each picked uniformly within its task.
RehearsalBatch rehearsal_batch(const Matrix& new_x, const std::vector<int>& new_y, int new_head,
                               const ReplayBuffer& buf, double mix, Rng& rng);

std::size_t rehearsal_count(std::size_t batch_size, double mix);

/// k exemplars round-robin over the stored tasks, uniform within each.
RehearsalBatch draw_exemplars(const ReplayBuffer& buf, std::size_t k, Rng& rng);

/// Mean cross-entropy with every row routed to its own head.
Var routed_cross_entropy(Tape& tape, const MultiHeadNet& net, const RehearsalBatch& batch,
                         const ForwardOptions& opt = {});

/// Row k: flattened gradient over `ids` of stored task k's loss on its own head
/// (eval mode, all exemplars). Rows follow buf.tasks() order.
Matrix gem_ref_grads(const MultiHeadNet& net, const ReplayBuffer& buf, const std::vector<std::string>& ids);

struct GemProjection {
    Vector g;
    bool projected = false;
    bool fallback = false;
    int iterations = 0;
    Vector v;  // dual solution when projected
};

struct QpOptions {
    int max_iterations = 10000;
    double tolerance = 1e-9;
};

/// Solves min ½vᵀAv + bᵀv subject to v ≥ 0. Returns nullopt on non-convergence.
std::optional<Vector> solve_nonneg_qp(const Matrix& A, const Vector& b, const QpOptions& opt, int* iterations);

/// g′ = Gᵀ(v* + γ) + g with v* the dual QP solution; g is returned untouched when
/// G·g ≥ 0 already.
GemProjection gem_project(const Vector& g, const Matrix& G, double gamma, const QpOptions& opt = {});

/// Selects exemplars of a finished task, class by class.
using ClassSelector = std::function<std::vector<std::size_t>(const Matrix& features_of_class, std::size_t m)>;
TaskExemplars select_exemplars(const MultiHeadNet& net, const TaskData& task, int head, std::size_t quota,
                               const ClassSelector& select);

struct ReplayConfig {
    std::size_t capacity = 0;
    std::size_t total_tasks = 1;
};

/// Basic rehearsal baselines: finetuning with exemplar replay routed to old heads.
/// Partial policy is R-PM, full policy is R-FM.
class RehearsalPlugin final : public MethodPlugin {
public:
    RehearsalPlugin(BufferPolicy policy, ReplayConfig cfg, double mix = 0.5);
    std::string id() const override { return buffer_.policy() == BufferPolicy::full ? "r-fm" : "r-pm"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<RehearsalPlugin>(*this); }
    std::size_t new_task_batch_size(std::size_t b) const override;
    std::optional<Var> penalty(BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    const ReplayBuffer& buffer() const { return buffer_; }

private:
    ReplayBuffer buffer_;
    double mix_;
    mutable std::size_t batch_ = 1;
};

class IcarlPlugin final : public MethodPlugin {
public:
    IcarlPlugin(ReplayConfig cfg, double kd_strength = 10.0, double tau = 2.0, double mix = 0.5);
    std::string id() const override { return "icarl"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<IcarlPlugin>(*this); }
    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    std::size_t new_task_batch_size(std::size_t b) const override;
    std::optional<Var> penalty(BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    std::vector<int> predict(const MultiHeadNet& net, const Matrix& x, int head) const override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    const ReplayBuffer& buffer() const { return buffer_; }
    const std::optional<MultiHeadNet>& previous_model() const { return previous_; }

private:
    bool replaying() const;

    ReplayBuffer buffer_;
    double tau_;
    double mix_;
    mutable std::size_t batch_ = 1;
    std::optional<MultiHeadNet> previous_;
};

class GemPlugin final : public MethodPlugin {
public:
    GemPlugin(ReplayConfig cfg, double gamma = 1.0, int epochs = 5);
    std::string id() const override { return "gem"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<GemPlugin>(*this); }
    void transform_gradients(GradMap& grads, const MultiHeadNet& net, BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    TrainSchedule adjust_schedule(TrainSchedule s) const override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    const ReplayBuffer& buffer() const { return buffer_; }
    int epochs() const { return epochs_; }
    std::size_t projections() const { return projections_; }
    std::size_t fallbacks() const { return fallbacks_; }

private:
    ReplayBuffer buffer_;
    int epochs_;
    std::size_t projections_ = 0;
    std::size_t fallbacks_ = 0;
};

}  // namespace clf
