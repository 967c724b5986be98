#include "clf/param_iso.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clf {

std::vector<std::size_t> prune_by_magnitude(const Matrix& weights, const std::vector<std::size_t>& candidates,
                                            double q) {
    if (!(q >= 0.0 && q < 1.0)) throw ContractError("pruning fraction must lie in [0,1)");
    if (candidates.empty()) {
        spdlog::debug("pruning: no candidate weights left in this layer");
        return {};
    }
    std::vector<std::size_t> order = candidates;
    for (auto i : order) require(i < static_cast<std::size_t>(weights.size()), "pruning candidate out of range");
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(weights.data()[a]);
        const double mb = std::abs(weights.data()[b]);
        return ma < mb || (ma == mb && a < b);
    });
    const auto drop = static_cast<std::size_t>(std::floor(q * static_cast<double>(order.size())));
    std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(drop), order.end());
    std::sort(keep.begin(), keep.end());
    return keep;
}

void OwnershipMasks::save(ByteWriter& w) const {
    w.magic("PNET");
    w.i64(trained);
    w.u64(owner.size());
    for (const auto& [id, o] : owner) {
        w.str(id);
        w.u64(o.size());
        for (int v : o) w.u32(static_cast<std::uint32_t>(v));
    }
}

OwnershipMasks OwnershipMasks::load(ByteReader& r) {
    r.expect_magic("PNET");
    OwnershipMasks m;
    m.trained = static_cast<int>(r.i64());
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        auto id = r.str();
        std::vector<int> o(r.u64());
        for (auto& v : o) v = static_cast<int>(r.u32());
        m.owner.emplace(std::move(id), std::move(o));
    }
    return m;
}

MultiHeadNet packnet_eval_params(const MultiHeadNet& net, const OwnershipMasks& masks, int head) {
    if (head < 0 || head >= masks.trained) {
        throw ContractError("packnet_eval_params: task " + std::to_string(head) + " has not been trained");
    }
    MultiHeadNet out = net;
    for (const auto& [id, owner] : masks.owner) {
        Matrix& w = out.params().value(id);
        require(static_cast<std::size_t>(w.size()) == owner.size(), "ownership mask size mismatch");
        for (std::size_t i = 0; i < owner.size(); ++i) {
            if (owner[i] == 0 || owner[i] > head + 1) w.data()[i] = 0.0;
        }
    }
    return out;
}

std::vector<double> CapacityReport::free() const {
    std::vector<double> f;
    for (double u : used) f.push_back(1.0 - u);
    return f;
}

CapacityReport capacity_report(const OwnershipMasks& masks, const NetConfig& cfg) {
    CapacityReport rep;
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
        const auto id = MultiHeadNet::trunk_weight(l);
        rep.layers.push_back(id);
        auto it = masks.owner.find(id);
        if (it == masks.owner.end() || it->second.empty()) {
            rep.used.push_back(0.0);
            continue;
        }
        const auto owned = std::count_if(it->second.begin(), it->second.end(), [](int o) { return o > 0; });
        rep.used.push_back(static_cast<double>(owned) / static_cast<double>(it->second.size()));
    }
    return rep;
}

PackNetPlugin::PackNetPlugin(double prune_fraction, double decay) {
    if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) throw ContractError("pruning fraction must lie in [0,1)");
    hyper_.add({"prune_fraction", prune_fraction, true, 1e-6, decay});
}

void PackNetPlugin::on_task_start(MultiHeadNet& net, const TaskData&, int head) {
    require(head == masks_.trained, "PackNet tasks must be trained in stream order");
    for (const auto& id : net.trunk_ids()) {
        if (MultiHeadNet::is_head_id(id) || id.back() != 'W') continue;
        auto& o = masks_.owner[id];
        if (o.empty()) o.assign(static_cast<std::size_t>(net.params().value(id).size()), 0);
        if (std::none_of(o.begin(), o.end(), [](int v) { return v == 0; })) {
            spdlog::warn("PackNet: layer {} has no free weights left for task {}", id, head + 1);
        }
    }
    build_mask(net, head, false);
}

void PackNetPlugin::build_mask(const MultiHeadNet& net, int head, bool phase2) {
    mask_.clear();
    for (const auto& id : net.trunk_ids()) {
        const Matrix& v = net.params().value(id);
        auto it = masks_.owner.find(id);
        if (it == masks_.owner.end()) {
            // Biases only train with the first task, which keeps later tasks from moving them.
            mask_[id] = Matrix::Constant(v.rows(), v.cols(), head == 0 ? 1.0 : 0.0);
            continue;
        }
        Matrix m(v.rows(), v.cols());
        const int want = phase2 ? head + 1 : 0;
        for (std::size_t i = 0; i < it->second.size(); ++i) m.data()[i] = it->second[i] == want ? 1.0 : 0.0;
        mask_[id] = std::move(m);
    }
}

TrainResult PackNetPlugin::fit(MultiHeadNet& net, const TaskData& task, int head, double lr,
                               const TrainSchedule& sched, std::uint64_t seed) {
    if (masks_.owner.empty()) on_task_start(net, task, head);
    build_mask(net, head, false);
    phase1_ = train_task(net, task, head, lr, sched, *this, seed);
    if (phase1_.diverged) return phase1_;

    const double q = hyper_.get("prune_fraction");
    for (auto& [id, owner] : masks_.owner) {
        std::vector<std::size_t> cand;
        for (std::size_t i = 0; i < owner.size(); ++i) {
            if (owner[i] == 0) cand.push_back(i);
        }
        const auto keep = prune_by_magnitude(net.params().value(id), cand, q);
        Matrix& w = net.params().value(id);
        std::vector<bool> kept(owner.size(), false);
        for (auto i : keep) kept[i] = true;
        for (auto i : cand) {
            if (kept[i]) {
                owner[i] = head + 1;
            } else {
                w.data()[i] = 0.0;
            }
        }
    }
    build_mask(net, head, true);
    TrainResult phase2 = train_task(net, task, head, lr, sched, *this, derive_seed(seed, {5}));
    masks_.trained = head + 1;
    return phase2;
}

std::vector<int> PackNetPlugin::predict(const MultiHeadNet& net, const Matrix& x, int head) const {
    if (head < masks_.trained) return argmax_rows(predict_logits(packnet_eval_params(net, masks_, head), x, head));
    return MethodPlugin::predict(net, x, head);
}

void PackNetPlugin::save_state(ByteWriter& w) const { masks_.save(w); }

void PackNetPlugin::load_state(ByteReader& r) {
    masks_ = OwnershipMasks::load(r);
    mask_.clear();
}

double hat_mask(double e, double s) {
    if (!(s > 0)) throw ContractError("HAT slope must be positive");
    return 1.0 / (1.0 + std::exp(-s * e));
}

Matrix hat_mask(const Matrix& e, double s) { return e.unaryExpr([s](double v) { return hat_mask(v, s); }); }

double hat_anneal(std::size_t b, std::size_t B, double s_max) {
    require(B >= 1 && b >= 1 && b <= B, "hat_anneal: batch index out of range");
    require(s_max > 0, "hat_anneal: s_max must be positive");
    if (B == 1) return s_max;
    const double lo = 1.0 / s_max;
    return lo + (s_max - lo) * static_cast<double>(b - 1) / static_cast<double>(B - 1);
}

Matrix hat_grad_constrain(const Matrix& grad, const Matrix& prev_in, const Matrix& prev_out) {
    require(prev_in.size() == grad.rows() && prev_out.size() == grad.cols(), "hat_grad_constrain: mask shape");
    Matrix g = grad;
    for (Eigen::Index j = 0; j < g.rows(); ++j) {
        for (Eigen::Index i = 0; i < g.cols(); ++i) g(j, i) *= 1.0 - std::min(prev_in.data()[j], prev_out.data()[i]);
    }
    return g;
}

double hat_sparsity_reg(const std::vector<Matrix>& masks, const std::vector<Matrix>& prev, double c) {
    require(masks.size() == prev.size(), "hat_sparsity_reg: layer count mismatch");
    double num = 0, den = 0;
    for (std::size_t l = 0; l < masks.size(); ++l) {
        const Matrix free = (1.0 - prev[l].array()).matrix();
        num += masks[l].cwiseProduct(free).sum();
        den += free.sum();
    }
    return c * num / std::max(den, 1e-12);
}

Var hat_sparsity_reg(Tape& tape, const std::vector<Var>& masks, const std::vector<Matrix>& prev, double c) {
    require(masks.size() == prev.size() && !masks.empty(), "hat_sparsity_reg: layer count mismatch");
    double den = 0;
    Var num = tape.constant(Matrix::Zero(1, 1));
    for (std::size_t l = 0; l < masks.size(); ++l) {
        const Matrix free = (1.0 - prev[l].array()).matrix();
        den += free.sum();
        num = ad::add(num, ad::sum(ad::mul(masks[l], tape.constant(free))));
    }
    return ad::scale(num, c / std::max(den, 1e-12));
}

Matrix hat_compensate(const Matrix& grad, const Matrix& e, double s, double s_max, double thres_cosh) {
    require(grad.rows() == e.rows() && grad.cols() == e.cols(), "hat_compensate: shape mismatch");
    Matrix g = grad;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double se = std::clamp(s * e.data()[i], -thres_cosh, thres_cosh);
        const double num = std::cosh(se) + 1.0;
        const double den = std::cosh(e.data()[i]) + 1.0;
        g.data()[i] *= s_max / s * num / den;
    }
    return g;
}

HatPlugin::HatPlugin(HatOptions opt) : opt_(opt) {
    require(opt.c >= 0, "HAT sparsity strength must be non-negative");
    require(opt.s_max > 0, "HAT s_max must be positive");
    hyper_.add({"c", opt.c, true});
    hyper_.add({"s_max", opt.s_max, true, 1.0});
}

std::string HatPlugin::embedding_id(int head, std::size_t layer) {
    return "hat.emb." + std::to_string(head) + "." + std::to_string(layer);
}

void HatPlugin::on_task_start(MultiHeadNet& net, const TaskData&, int head) {
    const auto& cfg = net.config();
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
        const auto id = embedding_id(head, l);
        if (net.params().contains(id)) continue;
        Rng rng(derive_seed(opt_.seed, {static_cast<std::uint64_t>(head), l}));
        Matrix e(1, cfg.widths[l + 1]);
        for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.uniform(0.0, 2.0);
        net.params().add(id, std::move(e), false);
    }
}

double HatPlugin::current_slope(const StepInfo& step) const {
    return hat_anneal(step.batch + 1, step.batches_per_epoch, hyper_.get("s_max"));
}

ForwardResult HatPlugin::forward(Tape& tape, const MultiHeadNet& net, const Matrix& x, int head, Rng& rng,
                                 const StepInfo& step) {
    const double s = current_slope(step);
    std::vector<Var> gates;
    for (std::size_t l = 0; l < net.config().trunk_layers(); ++l) {
        gates.push_back(ad::sigmoid(ad::scale(tape.param(net.params(), embedding_id(head, l)), s)));
    }
    return forward_pass(tape, net, x, head, {Mode::train, &rng, &gates});
}

std::vector<Matrix> HatPlugin::prev_or_zero(const NetConfig& cfg) const {
    if (!cumulative_.empty()) return cumulative_;
    std::vector<Matrix> z;
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) z.push_back(Matrix::Zero(1, cfg.widths[l + 1]));
    return z;
}

std::optional<Var> HatPlugin::penalty(BatchContext& ctx) {
    const double c = warming_up_ ? 0.0 : hyper_.get("c");
    if (c == 0.0) return std::nullopt;
    return hat_sparsity_reg(ctx.tape, ctx.out.gates, prev_or_zero(ctx.net.config()), c);
}

void HatPlugin::transform_gradients(GradMap& grads, const MultiHeadNet& net, BatchContext& ctx) {
    const auto& cfg = net.config();
    if (!cumulative_.empty()) {
        for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
            // The raw input carries no mask, so first-layer weights follow their output unit alone.
            const Matrix prev_in = l == 0 ? Matrix::Ones(1, cfg.widths[0]) : cumulative_[l - 1];
            auto w = grads.find(MultiHeadNet::trunk_weight(l));
            if (w != grads.end()) w->second = hat_grad_constrain(w->second, prev_in, cumulative_[l]);
            auto b = grads.find(MultiHeadNet::trunk_bias(l));
            if (b != grads.end()) b->second = b->second.cwiseProduct((1.0 - cumulative_[l].array()).matrix());
        }
    }
    if (opt_.compensate) {
        const double s = current_slope(ctx.step);
        for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
            const auto id = embedding_id(ctx.head, l);
            auto it = grads.find(id);
            if (it != grads.end()) it->second = hat_compensate(it->second, net.params().value(id), s, hyper_.get("s_max"));
        }
    }
}

void HatPlugin::after_step(MultiHeadNet& net, const GradMap&, BatchContext& ctx) {
    for (std::size_t l = 0; l < net.config().trunk_layers(); ++l) {
        Matrix& e = net.params().value(embedding_id(ctx.head, l));
        e = e.cwiseMax(-opt_.clamp).cwiseMin(opt_.clamp);
    }
}

std::vector<Matrix> HatPlugin::task_masks(const MultiHeadNet& net, int head) const {
    const double s = static_cast<std::size_t>(head) < task_slope_.size() ? task_slope_[static_cast<std::size_t>(head)]
                                                                          : hyper_.get("s_max");
    std::vector<Matrix> out;
    for (std::size_t l = 0; l < net.config().trunk_layers(); ++l) {
        out.push_back(hat_mask(net.params().value(embedding_id(head, l)), s));
    }
    return out;
}

void HatPlugin::on_task_end(MultiHeadNet& net, const TaskData&, int head) {
    require(static_cast<std::size_t>(head) == task_slope_.size(), "HAT tasks must finish in stream order");
    const auto masks = task_masks(net, head);
    task_slope_.push_back(hyper_.get("s_max"));
    if (cumulative_.empty()) cumulative_ = prev_or_zero(net.config());
    for (std::size_t l = 0; l < masks.size(); ++l) {
        const Matrix bin = (masks[l].array() > 0.5).cast<double>().matrix();
        cumulative_[l] = cumulative_[l].cwiseMax(bin);
    }
}

std::vector<int> HatPlugin::predict(const MultiHeadNet& net, const Matrix& x, int head) const {
    Tape t;
    std::vector<Var> gates;
    for (const auto& m : task_masks(net, head)) gates.push_back(t.constant(m));
    return argmax_rows(forward_pass(t, net, x, head, {Mode::eval, nullptr, &gates}).logits.value());
}

TrainResult HatPlugin::fit(MultiHeadNet& net, const TaskData& task, int head, double lr, const TrainSchedule& sched,
                           std::uint64_t seed) {
    if (!net.params().contains(embedding_id(head, 0))) on_task_start(net, task, head);
    if (head == 0 && opt_.warmup_epochs > 0 && sched.max_epochs > 0) {
        TrainSchedule warm = sched;
        warm.max_epochs = opt_.warmup_epochs;
        warming_up_ = true;
        try {
            train_task(net, task, head, lr, warm, *this, derive_seed(seed, {6}));
        } catch (...) {
            warming_up_ = false;
            throw;
        }
        warming_up_ = false;
    }
    return train_task(net, task, head, lr, sched, *this, seed);
}

void HatPlugin::save_state(ByteWriter& w) const {
    w.magic("HATS");
    w.u64(cumulative_.size());
    for (const auto& m : cumulative_) w.matrix(m);
    w.f64s(task_slope_);
}

void HatPlugin::load_state(ByteReader& r) {
    r.expect_magic("HATS");
    cumulative_.assign(r.u64(), Matrix());
    for (auto& m : cumulative_) m = r.matrix();
    task_slope_ = r.f64s();
}

CapacityReport capacity_report(const HatPlugin& hat, const NetConfig& cfg) {
    CapacityReport rep;
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
        rep.layers.push_back("trunk." + std::to_string(l));
        if (hat.cumulative().empty()) {
            rep.used.push_back(0.0);
            continue;
        }
        const Matrix& m = hat.cumulative()[l];
        rep.used.push_back(static_cast<double>((m.array() > 0.5).count()) / static_cast<double>(m.size()));
    }
    return rep;
}

}  // namespace clf
