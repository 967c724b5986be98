#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clf/autodiff.hpp"
#include "clf/param_store.hpp"
#include "clf/rng.hpp"
#include "clf/taskstream.hpp"

namespace clf {

struct NetConfig {
    std::vector<int> widths{16, 32, 32};  // [d_in, h1, h2, ...]
    double keep_prob = 1.0;              // dropout retention on hidden units
    double weight_decay = 0.0;
    std::uint64_t init_seed = 0;

    void validate() const;
    std::size_t trunk_layers() const { return widths.size() - 1; }
    int feature_dim() const { return widths.back(); }
};

/// Shared fully connected ReLU trunk plus one linear head per task. All
/// parameters live in a single ParamStore under the ids
///   trunk.<l>.W [w_l × w_{l+1}], trunk.<l>.b [1 × w_{l+1}],
///   head.<t>.W [w_last × classes_t], head.<t>.b [1 × classes_t].
class MultiHeadNet {
public:
    MultiHeadNet() = default;
    explicit MultiHeadNet(NetConfig cfg);

    const NetConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// Appends a head; heads are never reordered or removed. Returns its index.
    int add_head(int classes, std::uint64_t seed);
    int num_heads() const { return static_cast<int>(head_classes_.size()); }
    int head_classes(int head) const;

    static std::string trunk_weight(std::size_t layer);
    static std::string trunk_bias(std::size_t layer);
    static std::string head_weight(int head);
    static std::string head_bias(int head);
    std::vector<std::string> trunk_ids() const;
    std::vector<std::string> head_ids(int head) const;
    static bool is_head_id(const std::string& id);

    void save(ByteWriter& w) const;
    static MultiHeadNet load(ByteReader& r);

    friend bool operator==(const MultiHeadNet& a, const MultiHeadNet& b) {
        return a.head_classes_ == b.head_classes_ && a.cfg_.widths == b.cfg_.widths && a.params_ == b.params_;
    }

private:
    NetConfig cfg_;
    ParamStore params_;
    std::vector<int> head_classes_;
};

MultiHeadNet build_network(const NetConfig& cfg, std::uint64_t seed);

enum class Mode { train, eval };

struct ForwardOptions {
    Mode mode = Mode::eval;
    Rng* rng = nullptr;                 // required in train mode when keep_prob < 1
    const std::vector<Var>* gates = nullptr;  // optional per-hidden-layer unit gates [1 × width]
};

struct ForwardResult {
    Var features;  // last trunk activations, the head's input
    Var logits;
    std::vector<Var> gates;
};

ForwardResult forward_pass(Tape& tape, const MultiHeadNet& net, const Matrix& x, int head,
                           const ForwardOptions& opt = {});

/// Eval-mode logits without recording gradients beyond the forward tape.
Matrix predict_logits(const MultiHeadNet& net, const Matrix& x, int head);
Matrix predict_features(const MultiHeadNet& net, const Matrix& x);

/// Row-wise argmax; ties go to the lowest column.
std::vector<int> argmax_rows(const Matrix& m);
double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth);

double evaluate(const MultiHeadNet& net, const SplitData& data, int head);

struct TrainSchedule {
    int max_epochs = 70;
    int anneal_patience = 5;
    int stop_patience = 10;
    double anneal_factor = 10.0;
    std::size_t batch_size = 200;
    double momentum = 0.9;

    void validate() const;
};

/// Early-stopping bookkeeping driven purely by the validation-accuracy trace.
/// An epoch improves only when it strictly exceeds the best so far; any
/// improvement resets the unimproved count.
class ScheduleTracker {
public:
    enum class Decision { improved, none, anneal, stop };

    explicit ScheduleTracker(const TrainSchedule& s) : anneal_(s.anneal_patience), stop_(s.stop_patience) {}

    Decision observe(double val_acc);
    double best() const { return best_; }
    int unimproved() const { return unimproved_; }

private:
    int anneal_;
    int stop_;
    double best_ = -1.0;
    int unimproved_ = 0;
};

}  // namespace clf

namespace clf {

/// Seed for the head appended at stream position `head`.
inline std::uint64_t head_seed(std::uint64_t init_seed, int head) {
    return derive_seed(init_seed, {0x4eadULL, static_cast<std::uint64_t>(head)});
}

}  // namespace clf
