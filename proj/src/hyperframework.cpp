#include "clf/hyperframework.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "clf/param_iso.hpp"
#include "clf/reg_methods.hpp"
#include "clf/replay_methods.hpp"

namespace clf {

void FrameworkConfig::validate() const {
    if (lr_grid.empty()) throw ConfigError("framework.lr_grid must not be empty");
    auto strictly_decreasing = [](const std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!(g[i] > 0.0) || !std::isfinite(g[i])) return false;
            if (i > 0 && !(g[i] < g[i - 1])) return false;
        }
        return true;
    };
    if (!strictly_decreasing(lr_grid)) throw ConfigError("framework.lr_grid must be positive and strictly decreasing");
    if (!strictly_decreasing(first_task_extra) || (!first_task_extra.empty() && !(first_task_extra.back() > lr_grid.front()))) {
        throw ConfigError("framework.first_task_extra must be strictly decreasing and above the grid");
    }
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("framework.p must lie in [0,1]");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("framework.alpha must lie in (0,1)");
}

std::vector<double> FrameworkConfig::grid_for(std::size_t task) const {
    if (task != 0) return lr_grid;
    std::vector<double> g = first_task_extra;
    g.insert(g.end(), lr_grid.begin(), lr_grid.end());
    return g;
}

std::size_t workers_from_env() {
    const char* v = std::getenv("CLF_WORKERS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError(std::string("CLF_WORKERS must be a positive integer, got '") + v + "'");
    return static_cast<std::size_t>(n);
}

// ---------------------------------------------------------------------------

PlasticityResult plasticity_select(const std::vector<double>& grid,
                                   const std::function<GridResult(std::size_t, double)>& train, std::size_t workers) {
    if (grid.empty()) throw ContractError("plasticity search needs a nonempty grid");
    PlasticityResult out;
    out.grid.resize(grid.size());
    const std::size_t n_threads = std::clamp<std::size_t>(workers, 1, grid.size());
    if (n_threads == 1) {
        for (std::size_t i = 0; i < grid.size(); ++i) out.grid[i] = train(i, grid[i]);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex m;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_threads; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < grid.size(); i = next++) {
                    try {
                        out.grid[i] = train(i, grid[i]);
                    } catch (...) {
                        std::lock_guard lock(m);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }
    bool found = false;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto& r = out.grid[i];
        if (r.diverged || !std::isfinite(r.val_acc)) continue;
        if (!found || r.val_acc > out.a_star) {
            found = true;
            out.best = i;
            out.a_star = r.val_acc;
            out.lr = r.lr;
        }
    }
    if (!found) {
        std::ostringstream os;
        os << "every learning rate diverged:";
        for (const auto& r : out.grid) os << ' ' << r.lr << "->" << (r.diverged ? "diverged" : "nan");
        throw RuntimeError(os.str());
    }
    return out;
}

PlasticitySearch maximal_plasticity_search(const MultiHeadNet& net, const TaskData& task, int head,
                                           const std::vector<double>& grid, const TrainSchedule& sched,
                                           std::uint64_t seed, std::size_t task_index, std::size_t workers) {
    std::vector<std::optional<MultiHeadNet>> models(grid.size());
    auto train = [&](std::size_t i, double lr) {
        MultiHeadNet copy = net;
        FinetunePlugin ft;
        ft.on_task_start(copy, task, head);
        const TrainResult r = ft.fit(copy, task, head, lr, sched, derive_seed(seed, {task_index, i}));
        models[i] = std::move(copy);
        return GridResult{lr, r.best_val_acc, r.diverged};
    };
    PlasticitySearch s;
    s.result = plasticity_select(grid, train, workers);
    s.best_model = std::move(*models[s.result.best]);
    return s;
}

// ---------------------------------------------------------------------------

double decay_value(const HyperParam& h, double alpha) {
    const double factor = h.decay > 0.0 ? h.decay : alpha;
    if (h.value <= h.floor) return h.value;
    return std::max(h.value * factor, h.floor);
}

std::vector<HyperSet> decay_policy(const HyperSet& h, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("decay factor must lie in (0,1)");
    std::vector<HyperSet> out;
    auto push_unique = [&](const HyperSet& c) {
        if (c == h) return;
        for (const auto& o : out) {
            if (o == c) return;
        }
        out.push_back(c);
    };
    HyperSet all = h;
    for (const auto& name : h.forgetting_names()) {
        HyperSet one = h;
        const double v = decay_value(h.at(name), alpha);
        one.set(name, v);
        all.set(name, v);
        push_unique(one);
    }
    push_unique(all);
    return out;
}

std::size_t decay_round_bound(const HyperSet& h, double alpha) {
    std::size_t total = 0;
    for (const auto& name : h.forgetting_names()) {
        const auto& p = h.at(name);
        if (p.value <= p.floor) continue;
        const double factor = p.decay > 0.0 ? p.decay : alpha;
        total += static_cast<std::size_t>(std::ceil(std::log(p.value / p.floor) / std::log(1.0 / factor) - 1e-9));
    }
    return total;
}

DecayOutcome stability_decay(const HyperSet& initial, double a_star, double p, double alpha,
                             const std::function<double(const HyperSet&, std::size_t attempt)>& train) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("accuracy margin p must lie in [0,1]");
    const double threshold = (1.0 - p) * a_star;
    DecayOutcome out;
    auto attempt = [&](const HyperSet& h, std::size_t round) {
        const double acc = train(h, out.attempts.size());
        out.attempts.push_back({h, acc, round, "reject"});
        if (acc >= threshold) {
            out.attempts.back().decision = "accept";
            out.accepted = out.attempts.size() - 1;
            out.hyper = h;
            return true;
        }
        return false;
    };
    if (attempt(initial, 0)) return out;

    HyperSet state = initial;
    for (;;) {
        const auto candidates = decay_policy(state, alpha);
        if (candidates.empty()) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < out.attempts.size(); ++i) {
                if (out.attempts[i].val_acc > out.attempts[best].val_acc) best = i;
            }
            out.accepted = best;
            out.hyper = out.attempts[best].hyper;
            out.attempts[best].decision = "floor-accept";
            out.floor_terminated = true;
            spdlog::warn("stability decay hit the floor without reaching {:.4f}; keeping best attempt ({:.4f})",
                         threshold, out.attempts[best].val_acc);
            return out;
        }
        ++out.rounds;
        for (const auto& c : candidates) {
            if (attempt(c, out.rounds)) return out;
        }
        state = candidates.back();
    }
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& method_ids() {
    static const std::vector<std::string> ids{"finetune", "ewc",     "si",  "mas",   "lwf", "ebll", "mean-imm",
                                              "mode-imm", "packnet", "hat", "icarl", "gem", "r-pm", "r-fm"};
    return ids;
}

bool is_known_method(const std::string& id) {
    const auto& ids = method_ids();
    return std::find(ids.begin(), ids.end(), id) != ids.end();
}

std::unique_ptr<MethodPlugin> make_method(const MethodSpec& spec) {
    const ReplayConfig rc{spec.buffer_capacity, std::max<std::size_t>(1, spec.total_tasks)};
    const bool replay = spec.id == "icarl" || spec.id == "gem" || spec.id == "r-pm" || spec.id == "r-fm";
    if (replay && spec.buffer_capacity == 0) throw ConfigError("method '" + spec.id + "' needs replay.capacity > 0");
    std::unique_ptr<MethodPlugin> m;
    if (spec.id == "finetune") m = std::make_unique<FinetunePlugin>();
    else if (spec.id == "ewc") m = std::make_unique<EwcPlugin>();
    else if (spec.id == "si") m = std::make_unique<SiPlugin>();
    else if (spec.id == "mas") m = std::make_unique<MasPlugin>();
    else if (spec.id == "lwf") m = std::make_unique<LwfPlugin>();
    else if (spec.id == "ebll") m = std::make_unique<EbllPlugin>();
    else if (spec.id == "mean-imm") m = std::make_unique<ImmPlugin>(ImmPlugin::Merge::mean);
    else if (spec.id == "mode-imm") m = std::make_unique<ImmPlugin>(ImmPlugin::Merge::mode);
    else if (spec.id == "packnet") m = std::make_unique<PackNetPlugin>();
    else if (spec.id == "hat") m = std::make_unique<HatPlugin>();
    else if (spec.id == "icarl") m = std::make_unique<IcarlPlugin>(rc);
    else if (spec.id == "gem") m = std::make_unique<GemPlugin>(rc);
    else if (spec.id == "r-pm") m = std::make_unique<RehearsalPlugin>(BufferPolicy::partial, rc);
    else if (spec.id == "r-fm") m = std::make_unique<RehearsalPlugin>(BufferPolicy::full, rc);
    else throw ConfigError("unknown method '" + spec.id + "'");

    for (const auto& [name, value] : spec.hyper) {
        if (!m->hyper().has(name)) throw ConfigError("method '" + spec.id + "' has no hyperparameter '" + name + "'");
        if (!(value >= 0.0) || !std::isfinite(value)) {
            throw ConfigError("hyperparameter '" + name + "' must be a finite non-negative number");
        }
        if (name == "prune_fraction" && !(value < 1.0)) throw ConfigError("prune_fraction must be below 1");
        m->hyper().set(name, value);
    }
    return m;
}

// ---------------------------------------------------------------------------

TaskData StreamSource::train_view(std::size_t t) {
    if (t >= stream_.size()) throw ContractError("task index out of range");
    TaskData d = stream_.tasks[t];
    d.test = {};
    return d;
}

SplitData StreamSource::test_split(std::size_t i) {
    if (i >= stream_.size()) throw ContractError("task index out of range");
    return stream_.tasks[i].test;
}

std::string describe(const HyperSet& h) {
    std::ostringstream os;
    bool first = true;
    for (const auto& p : h.items()) {
        os << (first ? "" : ";") << p.name << '=' << exact_double(p.value);
        first = false;
    }
    return os.str();
}

namespace {

std::optional<CapacityReport> capacity_of(const MethodPlugin& plugin, const NetConfig& cfg) {
    if (const auto* pn = dynamic_cast<const PackNetPlugin*>(&plugin)) return capacity_report(pn->masks(), cfg);
    if (const auto* hat = dynamic_cast<const HatPlugin*>(&plugin)) return capacity_report(*hat, cfg);
    return std::nullopt;
}

void save_plasticity(ByteWriter& w, const PlasticityResult& r) {
    w.u64(r.best);
    w.f64(r.lr);
    w.f64(r.a_star);
    w.u64(r.grid.size());
    for (const auto& g : r.grid) {
        w.f64(g.lr);
        w.f64(g.val_acc);
        w.u8(g.diverged ? 1 : 0);
    }
}

PlasticityResult load_plasticity(ByteReader& r) {
    PlasticityResult p;
    p.best = r.u64();
    p.lr = r.f64();
    p.a_star = r.f64();
    p.grid.resize(r.u64());
    for (auto& g : p.grid) {
        g.lr = r.f64();
        g.val_acc = r.f64();
        g.diverged = r.u8() != 0;
    }
    return p;
}

}  // namespace

SequenceRunner::SequenceRunner(RunSettings settings, std::unique_ptr<MethodPlugin> plugin, std::size_t total_tasks)
    : settings_(std::move(settings)), plugin_(std::move(plugin)), total_(total_tasks), matrix_(total_tasks) {
    if (!plugin_) throw ContractError("runner needs a method");
    if (total_ == 0) throw ContractError("runner needs at least one task");
    settings_.net.validate();
    settings_.sched.validate();
    settings_.framework.validate();
    net_ = build_network(settings_.net, settings_.net.init_seed);
}

void SequenceRunner::step(TaskSource& source) {
    if (done()) throw ContractError("all tasks already trained");
    if (source.size() != total_) throw ContractError("task source size differs from the runner's");
    const std::size_t t = next_;
    const TaskData task = source.train_view(t);
    const int head = net_.add_head(task.num_classes(), head_seed(settings_.net.init_seed, static_cast<int>(t)));

    PlasticitySearch search = maximal_plasticity_search(net_, task, head, settings_.framework.grid_for(t),
                                                        settings_.sched, settings_.seed, t, settings_.workers);
    TaskRecord rec;
    rec.search = search.result;
    for (std::size_t i = 0; i < search.result.grid.size(); ++i) {
        const auto& g = search.result.grid[i];
        attempts_.push_back({t + 1, "search", "lr=" + exact_double(g.lr), g.diverged ? 0.0 : g.val_acc,
                             g.diverged ? "diverged" : (i == search.result.best ? "best" : "candidate")});
    }

    if (plugin_->id() == "finetune") {
        net_ = std::move(search.best_model);
    } else {
        const TrainSchedule sched = t == 0 ? settings_.sched : plugin_->adjust_schedule(settings_.sched);
        std::vector<std::unique_ptr<MethodPlugin>> plugins;
        std::vector<MultiHeadNet> nets;
        auto train = [&](const HyperSet& h, std::size_t k) {
            auto p = plugin_->clone();
            p->hyper() = h;
            MultiHeadNet n = net_;
            p->on_task_start(n, task, head);
            const TrainResult r =
                p->fit(n, task, head, search.result.lr, sched, derive_seed(settings_.seed, {t, 0xa77e, k}));
            plugins.push_back(std::move(p));
            nets.push_back(std::move(n));
            return r.diverged ? 0.0 : r.best_val_acc;
        };
        DecayOutcome d;
        if (plugin_->uses_stability_decay()) {
            d = stability_decay(plugin_->hyper(), search.result.a_star, settings_.framework.p,
                                settings_.framework.alpha, train);
        } else {
            const double acc = train(plugin_->hyper(), 0);
            d.attempts.push_back({plugin_->hyper(), acc, 0, "accept"});
            d.hyper = plugin_->hyper();
        }
        for (const auto& a : d.attempts) attempts_.push_back({t + 1, "decay", describe(a.hyper), a.val_acc, a.decision});
        plugin_ = std::move(plugins[d.accepted]);
        net_ = std::move(nets[d.accepted]);
        rec.floor_terminated = d.floor_terminated;
    }
    plugin_->on_task_end(net_, task, head);
    rec.hyper = plugin_->hyper();
    rec.capacity = capacity_of(*plugin_, settings_.net);

    const MultiHeadNet eval = plugin_->evaluation_net(net_);
    for (std::size_t i = 0; i <= t; ++i) {
        const SplitData test = source.test_split(i);
        matrix_.set(t, i, evaluate_with(*plugin_, eval, test, static_cast<int>(i)));
    }
    records_.push_back(std::move(rec));
    ++next_;
}

void SequenceRunner::run(TaskSource& source) {
    while (!done()) step(source);
}

void SequenceRunner::save(ByteWriter& w) const {
    w.magic("RUNR");
    w.u32(1);
    w.str(plugin_->id());
    w.u64(total_);
    w.u64(next_);
    net_.save(w);
    plugin_->hyper().save(w);
    plugin_->save_state(w);
    matrix_.save(w);
    w.u64(attempts_.size());
    for (const auto& a : attempts_) {
        w.u64(a.task);
        w.str(a.phase);
        w.str(a.setting);
        w.f64(a.val_acc);
        w.str(a.decision);
    }
    w.u64(records_.size());
    for (const auto& r : records_) {
        save_plasticity(w, r.search);
        r.hyper.save(w);
        w.u8(r.floor_terminated ? 1 : 0);
        w.u8(r.capacity ? 1 : 0);
        if (r.capacity) {
            w.u64(r.capacity->layers.size());
            for (std::size_t l = 0; l < r.capacity->layers.size(); ++l) {
                w.str(r.capacity->layers[l]);
                w.f64(r.capacity->used[l]);
            }
        }
    }
}

void SequenceRunner::load(ByteReader& r) {
    r.expect_magic("RUNR");
    if (r.u32() != 1) throw RuntimeError("unsupported runner state version");
    const std::string id = r.str();
    if (id != plugin_->id()) throw RuntimeError("runner state belongs to method '" + id + "'");
    if (r.u64() != total_) throw RuntimeError("runner state has a different task count");
    next_ = r.u64();
    net_ = MultiHeadNet::load(r);
    plugin_->hyper() = HyperSet::load(r);
    plugin_->load_state(r);
    matrix_ = AccuracyMatrix::load(r);
    attempts_.resize(r.u64());
    for (auto& a : attempts_) {
        a.task = r.u64();
        a.phase = r.str();
        a.setting = r.str();
        a.val_acc = r.f64();
        a.decision = r.str();
    }
    records_.resize(r.u64());
    for (auto& rec : records_) {
        rec.search = load_plasticity(r);
        rec.hyper = HyperSet::load(r);
        rec.floor_terminated = r.u8() != 0;
        rec.capacity.reset();
        if (r.u8()) {
            CapacityReport c;
            const auto n = r.u64();
            for (std::uint64_t l = 0; l < n; ++l) {
                c.layers.push_back(r.str());
                c.used.push_back(r.f64());
            }
            rec.capacity = std::move(c);
        }
    }
}

JointRun run_joint(const TaskStream& stream, const RunSettings& settings) {
    settings.framework.validate();
    const auto grid = settings.framework.grid_for(0);
    std::vector<std::optional<MultiHeadNet>> models(grid.size());
    auto train = [&](std::size_t i, double lr) {
        JointResult jr = train_joint(stream, settings.net, settings.sched, lr, derive_seed(settings.seed, {0x701, i}));
        models[i] = std::move(jr.net);
        return GridResult{lr, jr.train.best_val_acc, jr.train.diverged};
    };
    JointRun out;
    out.search = plasticity_select(grid, train, settings.workers);
    for (std::size_t i = 0; i < out.search.grid.size(); ++i) {
        const auto& g = out.search.grid[i];
        out.attempts.push_back({0, "joint", "lr=" + exact_double(g.lr), g.diverged ? 0.0 : g.val_acc,
                                g.diverged ? "diverged" : (i == out.search.best ? "best" : "candidate")});
    }
    const MultiHeadNet& net = *models[out.search.best];
    out.matrix = AccuracyMatrix(stream.size());
    std::vector<double> acc(stream.size());
    for (std::size_t i = 0; i < stream.size(); ++i) acc[i] = evaluate(net, stream.tasks[i].test, static_cast<int>(i));
    for (std::size_t j = 0; j < stream.size(); ++j) {
        for (std::size_t i = 0; i <= j; ++i) out.matrix.set(j, i, acc[i]);
    }
    return out;
}

}  // namespace clf
