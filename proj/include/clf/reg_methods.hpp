#pragma once

#include <functional>
#include <map>
#include <vector>

#include "clf/method_api.hpp"

namespace clf {

/// Accumulated per-parameter importance Ω and the anchor θ* it is centred on.
struct ImportanceMap {
    MatrixMap omega;
    MatrixMap anchor;

    bool empty() const { return omega.empty(); }
    void save(ByteWriter& w) const;
    static ImportanceMap load(ByteReader& r);
};

void save_matrix_map(ByteWriter& w, const MatrixMap& m);
MatrixMap load_matrix_map(ByteReader& r);

/// λ/2 · Σ_k Ω_k (θ_k − θ*_k)² over the ids in `anchor`.
Var quadratic_penalty(Tape& tape, const ParamStore& params, const ImportanceMap& anchor, double strength);
double quadratic_penalty(const ParamStore& params, const ImportanceMap& anchor, double strength);

/// Per-sample loss for importance estimation; records onto the tape and returns a scalar.
using SampleLoss = std::function<Var(Tape&, const ParamStore&, std::size_t sample)>;

/// mean_i (∂L_i/∂θ)² restricted to `ids`.
MatrixMap mean_squared_sample_grads(const ParamStore& params, const std::vector<std::string>& ids,
                                    std::size_t samples, const SampleLoss& loss);
/// mean_i |∂L_i/∂θ| restricted to `ids`; with absolute=false the signed mean.
MatrixMap mean_abs_sample_grads(const ParamStore& params, const std::vector<std::string>& ids, std::size_t samples,
                                const SampleLoss& loss, bool absolute = true);

/// Empirical Fisher of the head's cross-entropy over the trunk parameters.
MatrixMap ewc_importance(const MultiHeadNet& net, const SplitData& data, int head);
/// Mean |∂‖f_head(x)‖² / ∂θ| over the trunk parameters; labels are not used.
MatrixMap mas_importance(const MultiHeadNet& net, const Matrix& inputs, int head, bool absolute = true);

/// Ω ← Ω_old + Ω_new; anchor ← latest parameters.
ImportanceMap accumulate_importance(const ImportanceMap& old, const MatrixMap& omega_new, const MatrixMap& anchor_new);

/// Online path-integral state for synaptic intelligence.
struct SIRunningState {
    MatrixMap path;   // ω, reset at each task start
    MatrixMap start;  // θ at task start
};

void si_path_update(SIRunningState& st, const GradMap& grads, const MatrixMap& delta);
/// ω_k / ((θ_end − θ_start)² + ξ), clamped at zero; resets ω.
MatrixMap si_consolidate(SIRunningState& st, const MatrixMap& theta_end, double damping);

/// Cross-entropy between softmax(target/τ) and softmax(current/τ), mean over rows.
Var distill_loss(Var current_logits, const Matrix& target_logits, double tau = 2.0);

/// Undercomplete autoencoder over trunk features.
struct TaskAutoencoder {
    Matrix enc_w, enc_b, dec_w, dec_b;
    bool sigmoid_code = true;
    double recon_strength = 0.0;

    int code_dim() const { return static_cast<int>(enc_w.cols()); }
    int feature_dim() const { return static_cast<int>(enc_w.rows()); }

    Var encode(Tape& tape, Var features, bool trainable = false) const;
    Matrix encode(const Matrix& features) const;
    Matrix reconstruct(const Matrix& features) const;

    void save(ByteWriter& w) const;
    static TaskAutoencoder load(ByteReader& r);
};

struct AutoencoderGridEntry {
    int code_dim;
    double recon_strength;
};

struct AutoencoderTraining {
    std::vector<AutoencoderGridEntry> grid;
    double learning_rate = 0.01;
    int epochs = 50;
    std::size_t batch_size = 32;
    bool sigmoid_code = true;
};

/// Trains one autoencoder per grid entry on `train_features`, objective
/// CE(head(decode(encode(f)))) + recon_strength · mean ‖decode(encode(f)) − f‖²,
/// and keeps the entry with the lowest validation objective. The head is held fixed.
TaskAutoencoder ebll_train_autoencoder(const Matrix& train_features, const std::vector<int>& train_labels,
                                       const Matrix& val_features, const std::vector<int>& val_labels,
                                       const Matrix& head_w, const Matrix& head_b, const AutoencoderTraining& cfg,
                                       std::uint64_t seed);

/// Σ_old ‖enc_t(f) − code_t‖², averaged over the batch rows.
Var ebll_code_penalty(Tape& tape, Var features, const std::vector<Matrix>& recorded_codes,
                      const std::vector<TaskAutoencoder>& encoders);

/// Per-task model snapshots, optional per-task Ω, and mixing ratios.
struct IMMBank {
    std::vector<MatrixMap> models;
    std::vector<MatrixMap> omegas;
    std::vector<double> alphas;

    void save(ByteWriter& w) const;
    static IMMBank load(ByteReader& r);
};

/// Σ_t α_t θ_t for ids present in every snapshot.
MatrixMap imm_mean_merge(const IMMBank& bank);
/// (Σ α_t Ω_t θ_t) / max(Σ α_t Ω_t, floor).
MatrixMap imm_mode_merge(const IMMBank& bank, double floor = 1e-30);

// ---------------------------------------------------------------------------
// Plugins

/// Shared behaviour for the quadratic-penalty family (EWC, SI, MAS).
class ImportancePlugin : public MethodPlugin {
public:
    const ImportanceMap& importance() const { return importance_; }
    std::optional<Var> penalty(BatchContext& ctx) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

protected:
    ImportanceMap importance_;
};

class EwcPlugin final : public ImportancePlugin {
public:
    explicit EwcPlugin(double lambda = 400.0);
    std::string id() const override { return "ewc"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<EwcPlugin>(*this); }
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
};

class MasPlugin final : public ImportancePlugin {
public:
    explicit MasPlugin(double lambda = 3.0, bool absolute = true);
    std::string id() const override { return "mas"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<MasPlugin>(*this); }
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;

private:
    bool absolute_;
};

class SiPlugin final : public ImportancePlugin {
public:
    explicit SiPlugin(double lambda = 400.0, double damping = 1e-3);
    std::string id() const override { return "si"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<SiPlugin>(*this); }
    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    void transform_gradients(GradMap& grads, const MultiHeadNet& net, BatchContext& ctx) override;
    void after_step(MultiHeadNet& net, const GradMap& grads, BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    double damping() const { return damping_; }
    const SIRunningState& running() const { return running_; }

private:
    double damping_;
    SIRunningState running_;
    MatrixMap before_step_;
};

/// Learning without Forgetting: distillation of the old heads' outputs
/// recorded on the new task's training inputs before training starts.
class LwfPlugin : public MethodPlugin {
public:
    explicit LwfPlugin(double kd_strength = 10.0, double tau = 2.0);
    std::string id() const override { return "lwf"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<LwfPlugin>(*this); }
    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    std::optional<Var> penalty(BatchContext& ctx) override;

    double temperature() const { return tau_; }
    const std::vector<Matrix>& targets() const { return targets_; }

protected:
    std::optional<Var> distill_term(BatchContext& ctx) const;

    double tau_;
    std::vector<Matrix> targets_;  // per old head, rows aligned with task.train
};

/// Encoder-based lifelong learning: LwF plus per-task autoencoder code preservation.
class EbllPlugin final : public LwfPlugin {
public:
    explicit EbllPlugin(double kd_strength = 10.0, double code_strength = 1.0, AutoencoderTraining ae = {},
                        double tau = 2.0);
    std::string id() const override { return "ebll"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<EbllPlugin>(*this); }
    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    std::optional<Var> penalty(BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;

    const std::vector<TaskAutoencoder>& autoencoders() const { return autoencoders_; }

private:
    AutoencoderTraining ae_cfg_;
    std::vector<TaskAutoencoder> autoencoders_;
    std::vector<Matrix> codes_;  // per old task, rows aligned with task.train
};

/// Incremental moment matching with weight transfer and L2-transfer; the
/// evaluation model is the merge of all task snapshots.
class ImmPlugin final : public MethodPlugin {
public:
    enum class Merge { mean, mode };
    explicit ImmPlugin(Merge merge, double l2_transfer = 1e-2);
    std::string id() const override { return merge_ == Merge::mean ? "mean-imm" : "mode-imm"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<ImmPlugin>(*this); }
    void on_task_start(MultiHeadNet& net, const TaskData& task, int head) override;
    std::optional<Var> penalty(BatchContext& ctx) override;
    void on_task_end(MultiHeadNet& net, const TaskData& task, int head) override;
    void save_state(ByteWriter& w) const override;
    void load_state(ByteReader& r) override;
    bool uses_stability_decay() const override { return false; }

    /// The net with its trunk replaced by the merge of all stored snapshots.
    MultiHeadNet merged(const MultiHeadNet& net) const;
    MultiHeadNet evaluation_net(const MultiHeadNet& net) const override { return merged(net); }
    const IMMBank& bank() const { return bank_; }
    const ImportanceMap& transfer_anchor() const { return anchor_; }

private:
    Merge merge_;
    IMMBank bank_;
    ImportanceMap anchor_;  // Ω ≡ 1 around the previous task's parameters
};

}  // namespace clf
