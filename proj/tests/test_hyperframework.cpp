#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "clf/hyperframework.hpp"
#include "clf/reg_methods.hpp"

using namespace clf;

namespace {

TaskStream small_stream(std::uint64_t seed = 21) {
    const auto ds = make_gaussian_clusters(6, 30, 5, 1.5, 0.6, seed);
    return make_task_stream(ds, consecutive_groups(ds, 2), {0.6, 0.2, 0.2}, 3);
}

RunSettings small_settings() {
    RunSettings s;
    s.net.widths = {5, 16, 16};
    s.net.init_seed = 7;
    s.sched.max_epochs = 4;
    s.sched.batch_size = 16;
    s.framework.lr_grid = {1e-2, 1e-3};
    s.framework.first_task_extra = {5e-2};
    s.seed = 99;
    return s;
}

// Records every data access together with the step it happened in.
class LoggingSource final : public TaskSource {
public:
    explicit LoggingSource(const TaskStream& s) : inner_(s) {}
    std::size_t size() const override { return inner_.size(); }
    TaskData train_view(std::size_t t) override {
        log.push_back({'T', t, current});
        return inner_.train_view(t);
    }
    SplitData test_split(std::size_t i) override {
        log.push_back({'E', i, current});
        return inner_.test_split(i);
    }

    struct Access {
        char kind;
        std::size_t index;
        std::size_t step;
    };
    std::vector<Access> log;
    std::size_t current = 0;

private:
    StreamSource inner_;
};

HyperSet two_params() {
    return HyperSet{{"c", 2.0, true, 0.1}, {"s_max", 400.0, true, 1.0}, {"lr_mult", 3.0, false}};
}

}  // namespace

TEST_CASE("framework config") {
    FrameworkConfig f;
    CHECK_NOTHROW(f.validate());
    CHECK(f.p == 0.2);
    CHECK(f.alpha == 0.5);
    CHECK(f.grid_for(0) == std::vector<double>{1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4});
    CHECK(f.grid_for(3) == std::vector<double>{1e-2, 5e-3, 1e-3, 5e-4, 1e-4});
    FrameworkConfig bad = f;
    bad.lr_grid = {1e-3, 1e-2};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = f;
    bad.lr_grid.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = f;
    bad.alpha = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = f;
    bad.p = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("plasticity selection") {
    auto scripted = [](std::map<double, double> accs) {
        return [accs](std::size_t, double lr) { return GridResult{lr, accs.at(lr), false}; };
    };
    auto r = plasticity_select({1e-2, 5e-3, 1e-3}, scripted({{1e-2, 0.50}, {5e-3, 0.55}, {1e-3, 0.52}}));
    CHECK(r.lr == 5e-3);
    CHECK(r.a_star == 0.55);
    CHECK(r.best == 1);

    r = plasticity_select({1e-2, 5e-3, 1e-3}, scripted({{1e-2, 0.55}, {5e-3, 0.50}, {1e-3, 0.55}}));
    CHECK(r.lr == 1e-2);

    r = plasticity_select({1e-3}, scripted({{1e-3, 0.1}}));
    CHECK(r.lr == 1e-3);
    CHECK(r.a_star == 0.1);

    // Concurrent evaluation gives the same answer.
    std::vector<double> grid;
    for (int i = 0; i < 9; ++i) grid.push_back(std::pow(0.5, i));
    auto fn = [](std::size_t i, double lr) { return GridResult{lr, std::fmod(0.37 * static_cast<double>(i), 1.0), i == 2}; };
    const auto serial = plasticity_select(grid, fn, 1);
    const auto parallel = plasticity_select(grid, fn, 4);
    CHECK(serial.best == parallel.best);
    CHECK(serial.a_star == parallel.a_star);

    auto diverge = [](std::size_t, double lr) { return GridResult{lr, 0.0, true}; };
    CHECK_THROWS_AS(plasticity_select({1e-2, 1e-3}, diverge), RuntimeError);
    CHECK_THROWS_AS(plasticity_select({}, diverge), ContractError);
}

TEST_CASE("decay policy") {
    HyperSet one{{"lambda", 400.0, true, 1e-3}};
    auto c = decay_policy(one, 0.5);
    REQUIRE(c.size() == 1);
    CHECK(c[0].get("lambda") == 200.0);
    CHECK(decay_policy(c[0], 0.5)[0].get("lambda") == 100.0);

    const HyperSet h = two_params();
    c = decay_policy(h, 0.5);
    REQUIRE(c.size() == 3);
    CHECK(c[0].get("c") == 1.0);
    CHECK(c[0].get("s_max") == 400.0);
    CHECK(c[1].get("c") == 2.0);
    CHECK(c[1].get("s_max") == 200.0);
    CHECK(c[2].get("c") == 1.0);
    CHECK(c[2].get("s_max") == 200.0);
    for (const auto& x : c) CHECK(x.get("lr_mult") == 3.0);

    // Floor clamps, and entries already at the floor drop out.
    HyperSet f{{"c", 0.15, true, 0.1}, {"s_max", 1.0, true, 1.0}};
    c = decay_policy(f, 0.5);
    REQUIRE(c.size() == 1);
    CHECK(c[0].get("c") == 0.1);
    CHECK(decay_policy(c[0], 0.5).empty());

    // Zero values stay zero rather than jumping up to the floor.
    HyperSet zero{{"lambda", 0.0, true, 1e-3}};
    CHECK(decay_policy(zero, 0.5).empty());

    // Per-parameter factor overrides α.
    HyperSet q{{"prune_fraction", 0.9, true, 1e-6, 0.9}};
    CHECK(decay_policy(q, 0.5)[0].get("prune_fraction") == doctest::Approx(0.81));

    CHECK(decay_round_bound(one, 0.5) == 19);
    CHECK(decay_round_bound(zero, 0.5) == 0);
}

TEST_CASE("stability decay control flow") {
    SUBCASE("accept without decay") {
        HyperSet h{{"lambda", 400.0, true, 1e-3}};
        auto out = stability_decay(h, 0.55, 0.2, 0.5, [](const HyperSet&, std::size_t) { return 0.46; });
        CHECK(out.attempts.size() == 1);
        CHECK(out.hyper.get("lambda") == 400.0);
        CHECK_FALSE(out.floor_terminated);
        CHECK(out.attempts[0].decision == "accept");
    }
    SUBCASE("decay until the threshold is met") {
        HyperSet h{{"lambda", 400.0, true, 1e-3}};
        std::vector<double> seen;
        auto learner = [&](const HyperSet& x, std::size_t k) {
            CHECK(k == seen.size());
            seen.push_back(x.get("lambda"));
            return x.get("lambda") > 60.0 ? 0.40 : 0.50;
        };
        auto out = stability_decay(h, 0.55, 0.2, 0.5, learner);
        CHECK(seen == std::vector<double>{400, 200, 100, 50});
        CHECK(out.hyper.get("lambda") == 50.0);
        CHECK(out.accepted == 3);
        CHECK(out.attempts[3].val_acc >= 0.8 * 0.55);
        for (std::size_t i = 0; i < 3; ++i) CHECK(out.attempts[i].decision == "reject");
    }
    SUBCASE("p = 1 always accepts the first attempt") {
        HyperSet h{{"lambda", 400.0, true, 1e-3}};
        auto out = stability_decay(h, 0.9, 1.0, 0.5, [](const HyperSet&, std::size_t) { return 0.0; });
        CHECK(out.attempts.size() == 1);
    }
    SUBCASE("individual decays before the joint one, then repeat from the joint state") {
        std::vector<std::pair<double, double>> trace;
        auto learner = [&](const HyperSet& x, std::size_t) {
            trace.emplace_back(x.get("c"), x.get("s_max"));
            return x.get("c") < 0.3 ? 0.9 : 0.1;  // only once c has been decayed three times
        };
        auto out = stability_decay(two_params(), 0.9, 0.2, 0.5, learner);
        const std::vector<std::pair<double, double>> expect{
            {2, 400}, {1, 400}, {2, 200}, {1, 200}, {0.5, 200}, {1, 100}, {0.5, 100}, {0.25, 100}};
        CHECK(trace == expect);
        CHECK(out.rounds == 3);
        CHECK(out.hyper.get("c") == 0.25);
        CHECK(out.hyper.get("s_max") == 100.0);
        CHECK(out.hyper.get("lr_mult") == 3.0);
    }
    SUBCASE("floor termination keeps the best attempt and respects the bound") {
        HyperSet h{{"lambda", 400.0, true, 1e-3}};
        const std::size_t bound = decay_round_bound(h, 0.5);
        auto learner = [](const HyperSet& x, std::size_t) { return 0.3 + 1e-4 * std::log(x.get("lambda") + 1.0); };
        auto out = stability_decay(h, 0.9, 0.2, 0.5, learner);
        CHECK(out.floor_terminated);
        CHECK(out.rounds <= bound);
        CHECK(out.rounds == 19);
        CHECK(out.accepted == 0);
        CHECK(out.attempts[0].decision == "floor-accept");
        CHECK(out.attempts.back().hyper.get("lambda") == 1e-3);
    }
    SUBCASE("accept iff threshold met, on a scripted response surface") {
        Rng rng(5);
        for (int trial = 0; trial < 200; ++trial) {
            HyperSet h{{"a", rng.uniform(0.5, 50.0), true, 1e-2}, {"b", rng.uniform(0.5, 50.0), true, 1e-2}};
            const double wa = rng.uniform(0.0, 0.02), wb = rng.uniform(0.0, 0.02);
            const double a_star = rng.uniform(0.5, 1.0), p = rng.uniform(0.0, 0.5);
            auto learner = [&](const HyperSet& x, std::size_t) {
                return std::max(0.0, a_star - wa * x.get("a") - wb * x.get("b"));
            };
            auto out = stability_decay(h, a_star, p, 0.5, learner);
            const double thr = (1 - p) * a_star;
            CHECK(out.rounds <= decay_round_bound(h, 0.5));
            for (std::size_t i = 0; i < out.attempts.size(); ++i) {
                if (i == out.accepted) continue;
                CHECK(out.attempts[i].val_acc < thr);
            }
            CHECK((out.attempts[out.accepted].val_acc >= thr) == !out.floor_terminated);
            CHECK(out.hyper.get("a") <= h.get("a"));
            CHECK(out.hyper.get("b") <= h.get("b"));
        }
    }
}

TEST_CASE("method registry") {
    for (const auto& id : method_ids()) {
        MethodSpec s;
        s.id = id;
        s.buffer_capacity = 20;
        s.total_tasks = 3;
        auto m = make_method(s);
        CHECK(m->id() == id);
    }
    MethodSpec s;
    s.id = "ewc";
    s.hyper["lambda"] = 10.0;
    CHECK(make_method(s)->hyper().get("lambda") == 10.0);
    s.hyper["gamma"] = 1.0;
    CHECK_THROWS_AS(make_method(s), ConfigError);
    s.hyper.clear();
    s.hyper["lambda"] = -1.0;
    CHECK_THROWS_AS(make_method(s), ConfigError);
    s.id = "nope";
    CHECK_THROWS_AS(make_method(s), ConfigError);
    MethodSpec g;
    g.id = "gem";
    CHECK_THROWS_AS(make_method(g), ConfigError);
}

TEST_CASE("sequence runner touches only current-task data") {
    const auto stream = small_stream();
    LoggingSource src(stream);
    MethodSpec spec;
    spec.id = "ewc";
    SequenceRunner runner(small_settings(), make_method(spec), stream.size());
    while (!runner.done()) {
        src.current = runner.next_task();
        runner.step(src);
    }
    std::set<std::size_t> trained;
    for (const auto& a : src.log) {
        if (a.kind == 'T') {
            CHECK(a.index == a.step);
            trained.insert(a.index);
        } else {
            CHECK(a.index <= a.step);
            CHECK(trained.count(a.step) == 1);  // evaluation happens after training
        }
    }
    CHECK(trained.size() == stream.size());
    // train views never carry test data
    StreamSource plain(stream);
    CHECK(plain.train_view(1).test.size() == 0);
}

TEST_CASE("sequence runner: determinism, monotone hyperparameters, resume") {
    const auto stream = small_stream();
    MethodSpec spec;
    spec.id = "ewc";
    spec.hyper["lambda"] = 1e6;  // strong enough to force some decay
    RunSettings narrow = small_settings();
    narrow.net.widths = {5, 4, 4};  // narrow trunk so the penalty actually costs plasticity

    auto full_run = [&] {
        StreamSource src(stream);
        SequenceRunner r(narrow, make_method(spec), stream.size());
        r.run(src);
        return r;
    };
    const SequenceRunner a = full_run();
    const SequenceRunner b = full_run();
    CHECK(a.matrix() == b.matrix());
    CHECK(a.net() == b.net());
    CHECK(a.matrix().rows_complete() == stream.size());

    double prev = 1e6;
    for (const auto& rec : a.records()) {
        CHECK(rec.hyper.get("lambda") <= prev);
        prev = rec.hyper.get("lambda");
    }
    CHECK(prev < 1e6);
    bool any_decay = false;
    for (const auto& row : a.attempts()) any_decay |= row.phase == "decay" && row.decision == "reject";
    CHECK(any_decay);

    // Interrupt after the first task and continue in a fresh runner.
    StreamSource src(stream);
    SequenceRunner first(narrow, make_method(spec), stream.size());
    first.step(src);
    ByteWriter w;
    first.save(w);
    SequenceRunner resumed(narrow, make_method(spec), stream.size());
    ByteReader rd(w.buffer());
    resumed.load(rd);
    CHECK(rd.at_end());
    ByteWriter w2;
    resumed.save(w2);
    CHECK(w2.buffer() == w.buffer());
    resumed.run(src);
    CHECK(resumed.matrix() == a.matrix());
    CHECK(resumed.net() == a.net());

    // State of another method is refused.
    MethodSpec other;
    other.id = "mas";
    SequenceRunner wrong(narrow, make_method(other), stream.size());
    ByteReader rd2(w.buffer());
    CHECK_THROWS_AS(wrong.load(rd2), RuntimeError);
}

TEST_CASE("finetune and IMM runs") {
    const auto stream = small_stream();
    TaskStream one;
    one.tasks = {stream.tasks[0]};
    one.order = {0};
    StreamSource src1(one);
    MethodSpec ft;
    SequenceRunner r(small_settings(), make_method(ft), 1);
    r.run(src1);
    CHECK(r.matrix().tasks() == 1);
    CHECK(r.matrix().has(0, 0));
    // finetune reuses the best search model directly
    for (const auto& row : r.attempts()) CHECK(row.phase == "search");

    MethodSpec imm;
    imm.id = "mean-imm";
    StreamSource src(stream);
    SequenceRunner ri(small_settings(), make_method(imm), stream.size());
    ri.run(src);
    std::size_t decay_rows = 0;
    for (const auto& row : ri.attempts()) decay_rows += row.phase == "decay";
    CHECK(decay_rows == stream.size());
}

TEST_CASE("joint run") {
    const auto stream = small_stream();
    const JointRun j = run_joint(stream, small_settings());
    CHECK(j.matrix.rows_complete() == stream.size());
    CHECK(avg_forgetting(j.matrix, stream.size()) == 0.0);
    CHECK(j.search.grid.size() == 3);
}

TEST_CASE("worker count from environment") {
    setenv("CLF_WORKERS", "3", 1);
    CHECK(workers_from_env() == 3);
    setenv("CLF_WORKERS", "zero", 1);
    CHECK_THROWS_AS(workers_from_env(), ConfigError);
    unsetenv("CLF_WORKERS");
    CHECK(workers_from_env() == 1);
}
