#include "clf/method_api.hpp"

#include <algorithm>
#include <cmath>

#include "clf/optim.hpp"

namespace clf {

void HyperSet::add(HyperParam p) {
    if (has(p.name)) throw ContractError("duplicate hyperparameter '" + p.name + "'");
    items_.push_back(std::move(p));
}

bool HyperSet::has(const std::string& name) const {
    return std::any_of(items_.begin(), items_.end(), [&](const auto& h) { return h.name == name; });
}

const HyperParam& HyperSet::at(const std::string& name) const {
    for (const auto& h : items_) {
        if (h.name == name) return h;
    }
    throw ContractError("unknown hyperparameter '" + name + "'");
}

double HyperSet::get(const std::string& name) const { return at(name).value; }

void HyperSet::set(const std::string& name, double value) {
    for (auto& h : items_) {
        if (h.name == name) {
            h.value = value;
            return;
        }
    }
    throw ContractError("unknown hyperparameter '" + name + "'");
}

std::vector<std::string> HyperSet::forgetting_names() const {
    std::vector<std::string> out;
    for (const auto& h : items_) {
        if (h.forgetting) out.push_back(h.name);
    }
    return out;
}

bool operator==(const HyperSet& a, const HyperSet& b) {
    if (a.items_.size() != b.items_.size()) return false;
    for (std::size_t i = 0; i < a.items_.size(); ++i) {
        const auto& x = a.items_[i];
        const auto& y = b.items_[i];
        if (x.name != y.name || x.value != y.value || x.forgetting != y.forgetting || x.floor != y.floor ||
            x.decay != y.decay) {
            return false;
        }
    }
    return true;
}

void HyperSet::save(ByteWriter& w) const {
    w.u64(items_.size());
    for (const auto& h : items_) {
        w.str(h.name);
        w.f64(h.value);
        w.u8(h.forgetting ? 1 : 0);
        w.f64(h.floor);
        w.f64(h.decay);
    }
}

HyperSet HyperSet::load(ByteReader& r) {
    HyperSet s;
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        HyperParam h;
        h.name = r.str();
        h.value = r.f64();
        h.forgetting = r.u8() != 0;
        h.floor = r.f64();
        h.decay = r.f64();
        s.items_.push_back(std::move(h));
    }
    return s;
}

bool MethodPlugin::forgetting_disabled() const {
    for (const auto& h : hyper_.items()) {
        if (h.forgetting && h.value != 0.0) return false;
    }
    return true;
}

void MethodPlugin::on_task_start(MultiHeadNet&, const TaskData&, int) {}

ForwardResult MethodPlugin::forward(Tape& tape, const MultiHeadNet& net, const Matrix& x, int head, Rng& rng,
                                    const StepInfo&) {
    ForwardOptions opt;
    opt.mode = Mode::train;
    opt.rng = &rng;
    return forward_pass(tape, net, x, head, opt);
}

std::optional<Var> MethodPlugin::penalty(BatchContext&) { return std::nullopt; }
void MethodPlugin::transform_gradients(GradMap&, const MultiHeadNet&, BatchContext&) {}
void MethodPlugin::after_step(MultiHeadNet&, const GradMap&, BatchContext&) {}
void MethodPlugin::on_task_end(MultiHeadNet&, const TaskData&, int) {}

std::vector<int> MethodPlugin::predict(const MultiHeadNet& net, const Matrix& x, int head) const {
    return argmax_rows(predict_logits(net, x, head));
}

TrainResult MethodPlugin::fit(MultiHeadNet& net, const TaskData& task, int head, double lr,
                              const TrainSchedule& sched, std::uint64_t seed) {
    return train_task(net, task, head, lr, sched, *this, seed);
}

void MethodPlugin::save_state(ByteWriter&) const {}
void MethodPlugin::load_state(ByteReader&) {}

double evaluate_with(const MethodPlugin& plugin, const MultiHeadNet& net, const SplitData& data, int head) {
    if (data.size() == 0) throw ContractError("evaluate on an empty set");
    return accuracy(plugin.predict(net, data.x, head), data.y);
}

namespace {

const SplitData& selection_split(const TaskData& task) { return task.val.size() ? task.val : task.train; }

MatrixMap snapshot(const MultiHeadNet& net) { return net.params().values(); }

void restore(MultiHeadNet& net, const MatrixMap& values) {
    for (const auto& [id, v] : values) net.params().value(id) = v;
}

}  // namespace

TrainResult train_task(MultiHeadNet& net, const TaskData& task, int head, double lr, const TrainSchedule& sched,
                       MethodPlugin& plugin, std::uint64_t seed) {
    sched.validate();
    if (task.train.size() == 0) throw ContractError("train_task: empty training set");
    net.head_classes(head);
    if (!(lr > 0)) throw ContractError("learning rate must be positive");

    net.params().clear_velocities();
    Rng drop_rng(derive_seed(seed, {2}));
    Rng plugin_rng(derive_seed(seed, {3}));
    const std::uint64_t batch_seed = derive_seed(seed, {1, 0});
    const SplitData& sel = selection_split(task);

    TrainResult res;
    if (sched.max_epochs == 0) {
        res.best_val_acc = evaluate_with(plugin, net, sel, head);
        return res;
    }

    ScheduleTracker tracker(sched);
    MatrixMap best = snapshot(net);
    double cur_lr = lr;
    const std::size_t bs = std::max<std::size_t>(1, plugin.new_task_batch_size(sched.batch_size));

    for (int epoch = 1; epoch <= sched.max_epochs; ++epoch) {
        const auto plan = batches(task.train.size(), bs, batch_seed, static_cast<std::uint64_t>(epoch));
        for (std::size_t b = 0; b < plan.size() && !res.diverged; ++b) {
            const auto& rows = plan[b];
            const SplitData part = task.train.subset(rows);
            StepInfo step{b, plan.size(), epoch};
            Tape tape;
            const ForwardResult out = plugin.forward(tape, net, part.x, head, drop_rng, step);
            BatchContext ctx{tape, net, task, head, rows, part.x, part.y, out, step, plugin_rng};
            Var loss = ad::softmax_cross_entropy(out.logits, part.y);
            if (auto pen = plugin.penalty(ctx)) loss = ad::add(loss, *pen);
            if (!std::isfinite(loss.scalar())) {
                res.diverged = true;
                break;
            }
            GradMap grads = tape.backward(loss);
            plugin.transform_gradients(grads, net, ctx);
            sgd_momentum_step(net.params(), grads, {cur_lr, sched.momentum, net.config().weight_decay},
                              plugin.trainable_mask());
            plugin.after_step(net, grads, ctx);
        }
        if (res.diverged || !net.params().all_finite()) {
            res.diverged = true;
            break;
        }
        EpochLog log{epoch, evaluate_with(plugin, net, sel, head), cur_lr, false, false};
        const auto d = tracker.observe(log.val_acc);
        res.epochs_run = epoch;
        if (d == ScheduleTracker::Decision::improved) {
            log.improved = true;
            best = snapshot(net);
            res.best_val_acc = log.val_acc;
            res.best_epoch = epoch;
        } else if (d == ScheduleTracker::Decision::anneal) {
            log.annealed = true;
            cur_lr /= sched.anneal_factor;
        }
        res.log.push_back(log);
        if (d == ScheduleTracker::Decision::stop) break;
    }
    restore(net, best);
    if (res.best_epoch == 0) res.best_val_acc = evaluate_with(plugin, net, sel, head);
    return res;
}

std::unique_ptr<MethodPlugin> finetune_plugin() { return std::make_unique<FinetunePlugin>(); }

JointResult train_joint(const TaskStream& stream, const NetConfig& cfg, const TrainSchedule& sched, double lr,
                        std::uint64_t seed) {
    sched.validate();
    require(stream.size() >= 1, "joint training needs at least one task");
    JointResult jr{build_network(cfg, cfg.init_seed), {}};
    MultiHeadNet& net = jr.net;
    for (std::size_t t = 0; t < stream.size(); ++t) {
        net.add_head(stream.tasks[t].num_classes(), head_seed(cfg.init_seed, static_cast<int>(t)));
        require(stream.tasks[t].train.size() > 0, "joint training: empty training set");
    }
    FinetunePlugin plain;
    Rng drop_rng(derive_seed(seed, {2}));
    Rng pick_rng(derive_seed(seed, {4}));
    auto val_acc = [&] {
        double s = 0;
        for (std::size_t t = 0; t < stream.size(); ++t) {
            s += evaluate(net, selection_split(stream.tasks[t]), static_cast<int>(t));
        }
        return s / static_cast<double>(stream.size());
    };
    TrainResult& res = jr.train;
    if (sched.max_epochs == 0) {
        res.best_val_acc = val_acc();
        return jr;
    }
    ScheduleTracker tracker(sched);
    MatrixMap best = snapshot(net);
    double cur_lr = lr;
    net.params().clear_velocities();
    for (int epoch = 1; epoch <= sched.max_epochs && !res.diverged; ++epoch) {
        std::vector<std::vector<std::vector<std::size_t>>> plans;
        std::vector<std::size_t> next(stream.size(), 0);
        std::size_t total = 0;
        for (std::size_t t = 0; t < stream.size(); ++t) {
            plans.push_back(batches(stream.tasks[t].train.size(), sched.batch_size, derive_seed(seed, {1, t}),
                                    static_cast<std::uint64_t>(epoch)));
            total += plans.back().size();
        }
        for (std::size_t b = 0; b < total; ++b) {
            std::vector<std::size_t> open;
            for (std::size_t t = 0; t < stream.size(); ++t) {
                if (next[t] < plans[t].size()) open.push_back(t);
            }
            const std::size_t t = open.size() == 1 ? open[0] : open[pick_rng.index(open.size())];
            const auto& rows = plans[t][next[t]++];
            const SplitData part = stream.tasks[t].train.subset(rows);
            Tape tape;
            ForwardOptions opt;
            opt.mode = Mode::train;
            opt.rng = &drop_rng;
            const auto out = forward_pass(tape, net, part.x, static_cast<int>(t), opt);
            Var loss = ad::softmax_cross_entropy(out.logits, part.y);
            if (!std::isfinite(loss.scalar())) {
                res.diverged = true;
                break;
            }
            const GradMap grads = tape.backward(loss);
            sgd_momentum_step(net.params(), grads, {cur_lr, sched.momentum, cfg.weight_decay});
        }
        if (res.diverged || !net.params().all_finite()) {
            res.diverged = true;
            break;
        }
        EpochLog log{epoch, val_acc(), cur_lr, false, false};
        const auto d = tracker.observe(log.val_acc);
        res.epochs_run = epoch;
        if (d == ScheduleTracker::Decision::improved) {
            log.improved = true;
            best = snapshot(net);
            res.best_val_acc = log.val_acc;
            res.best_epoch = epoch;
        } else if (d == ScheduleTracker::Decision::anneal) {
            log.annealed = true;
            cur_lr /= sched.anneal_factor;
        }
        res.log.push_back(log);
        if (d == ScheduleTracker::Decision::stop) break;
    }
    restore(net, best);
    if (res.best_epoch == 0) res.best_val_acc = val_acc();
    return jr;
}

}  // namespace clf
