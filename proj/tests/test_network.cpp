#include <doctest.h>

#include "clf/method_api.hpp"
#include "clf/network.hpp"
#include "test_helpers.hpp"

using namespace clf;
using clf::testing::mat;

TEST_CASE("build_network is deterministic and shaped") {
    NetConfig cfg;
    cfg.widths = {4, 8};
    auto a = build_network(cfg, 5);
    auto b = build_network(cfg, 5);
    CHECK(a == b);
    CHECK(a.params().value("trunk.0.W").rows() == 4);
    CHECK(a.params().value("trunk.0.W").cols() == 8);
    CHECK(a.num_heads() == 0);
    auto c = build_network(cfg, 6);
    CHECK_FALSE(bit_equal(a.params().value("trunk.0.W"), c.params().value("trunk.0.W")));

    NetConfig bad;
    bad.widths = {4, 0};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad.widths = {4, 2};
    bad.keep_prob = 0.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("evaluate: argmax with lowest-index ties") {
    CHECK(argmax_rows(mat({{1, 3, 3}, {2, 2, 2}, {0, -1, 5}})) == std::vector<int>{1, 0, 2});

    NetConfig cfg;
    cfg.widths = {2, 2};
    auto net = build_network(cfg, 1);
    net.add_head(2, 2);
    net.params().value("trunk.0.W") = Matrix::Identity(2, 2);
    net.params().value("head.0.W") = Matrix::Identity(2, 2);
    SplitData d;
    d.x = mat({{1, 0}, {0, 1}});
    d.y = {0, 1};
    CHECK(evaluate(net, d, 0) == 1.0);
    d.y = {1, 0};
    CHECK(evaluate(net, d, 0) == 0.0);
    // Equal logits: prediction is always class 0.
    net.params().value("head.0.W").setZero();
    d.x = mat({{1, 0}, {0, 1}, {1, 1}, {2, 2}});
    d.y = {0, 1, 1, 1};
    CHECK(evaluate(net, d, 0) == 0.25);
    SplitData empty;
    empty.x.resize(0, 2);
    CHECK_THROWS_AS(evaluate(net, empty, 0), ContractError);
}

TEST_CASE("schedule tracker reproduces the anneal/stop rule") {
    TrainSchedule s;
    ScheduleTracker tr(s);
    using D = ScheduleTracker::Decision;
    const std::vector<double> trace{10, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12};
    std::vector<D> got;
    for (double a : trace) got.push_back(tr.observe(a));
    CHECK(got[0] == D::improved);
    CHECK(got[1] == D::improved);
    for (int e = 3; e <= 6; ++e) CHECK(got[static_cast<std::size_t>(e - 1)] == D::none);
    CHECK(got[6] == D::anneal);  // epoch 7
    for (int e = 8; e <= 11; ++e) CHECK(got[static_cast<std::size_t>(e - 1)] == D::none);
    CHECK(got[11] == D::stop);  // epoch 12

    ScheduleTracker tr2(s);
    for (int i = 0; i < 5; ++i) tr2.observe(1.0);
    CHECK(tr2.unimproved() == 4);
    CHECK(tr2.observe(2.0) == D::improved);
    CHECK(tr2.unimproved() == 0);

    TrainSchedule bad;
    bad.stop_patience = 3;
    CHECK_THROWS_AS(bad.validate(), ContractError);
}

namespace {

/// Plugin that reports a scripted validation accuracy per epoch.
class ScriptedPlugin : public MethodPlugin {
public:
    explicit ScriptedPlugin(std::vector<double> accs) : accs_(std::move(accs)) {}
    std::string id() const override { return "scripted"; }
    std::unique_ptr<MethodPlugin> clone() const override { return std::make_unique<ScriptedPlugin>(*this); }
    std::vector<int> predict(const MultiHeadNet&, const Matrix& x, int) const override {
        const double a = accs_[std::min(calls_++, accs_.size() - 1)];
        std::vector<int> out(static_cast<std::size_t>(x.rows()), 1);
        const auto hits = static_cast<std::size_t>(a * static_cast<double>(out.size()) + 0.5);
        for (std::size_t i = 0; i < hits; ++i) out[i] = 0;
        return out;
    }

private:
    std::vector<double> accs_;
    mutable std::size_t calls_ = 0;
};

}  // namespace

TEST_CASE("train_task follows the schedule from the validation trace") {
    TaskData task;
    task.classes = {0, 1};
    task.train.x = Matrix::Random(4, 2);
    task.train.y = {0, 1, 0, 1};
    task.train.source_rows = {0, 1, 2, 3};
    task.val.x = Matrix::Zero(100, 2);
    task.val.y.assign(100, 0);
    task.val.source_rows.resize(100);
    NetConfig cfg;
    cfg.widths = {2, 3};
    auto net = build_network(cfg, 1);
    net.add_head(2, 2);
    ScriptedPlugin plugin({0.10, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12, 0.12});
    TrainSchedule s;
    auto res = train_task(net, task, 0, 0.1, s, plugin, 3);
    CHECK(res.epochs_run == 12);
    CHECK(res.best_epoch == 2);
    CHECK(res.best_val_acc == doctest::Approx(0.12));
    int anneals = 0;
    for (const auto& e : res.log) anneals += e.annealed;
    CHECK(anneals == 1);
    CHECK(res.log[6].annealed);
    CHECK(res.log[7].learning_rate == doctest::Approx(0.01));
}

TEST_CASE("finetuning a separable toy reaches 100% and returns the best epoch") {
    auto task = clf::testing::separable_task(40, 3, 12);
    NetConfig cfg;
    cfg.widths = {3, 8, 8};
    auto net = build_network(cfg, 2);
    net.add_head(2, 3);
    FinetunePlugin ft;
    TrainSchedule s;
    s.batch_size = 16;
    s.max_epochs = 20;
    auto res = train_task(net, task, 0, 0.05, s, ft, 5);
    CHECK(res.best_val_acc == 1.0);
    double mx = 0;
    for (const auto& e : res.log) mx = std::max(mx, e.val_acc);
    CHECK(res.best_val_acc == mx);
    CHECK(evaluate(net, task.val, 0) == res.best_val_acc);
}

TEST_CASE("max_epochs = 0 returns the untrained parameters") {
    auto task = clf::testing::separable_task(10, 3, 1);
    NetConfig cfg;
    cfg.widths = {3, 4};
    auto net = build_network(cfg, 2);
    net.add_head(2, 3);
    const auto before = net.params().values();
    FinetunePlugin ft;
    TrainSchedule s;
    s.max_epochs = 0;
    auto res = train_task(net, task, 0, 0.1, s, ft, 1);
    CHECK(bit_equal(net.params().values(), before));
    CHECK(res.best_val_acc == evaluate(net, task.val, 0));

    TaskData empty = task;
    empty.train = SplitData{};
    empty.train.x.resize(0, 3);
    CHECK_THROWS_AS(train_task(net, empty, 0, 0.1, s, ft, 1), ContractError);
}

TEST_CASE("training one head leaves other heads untouched") {
    auto t0 = clf::testing::separable_task(20, 3, 4);
    auto t1 = clf::testing::separable_task(20, 3, 5);
    NetConfig cfg;
    cfg.widths = {3, 6};
    cfg.weight_decay = 1e-3;
    auto net = build_network(cfg, 2);
    net.add_head(2, 3);
    net.add_head(2, 4);
    FinetunePlugin ft;
    TrainSchedule s;
    s.batch_size = 8;
    s.max_epochs = 5;
    train_task(net, t0, 0, 0.05, s, ft, 1);
    const Matrix w0 = net.params().value("head.0.W");
    const Matrix b0 = net.params().value("head.0.b");
    const Matrix trunk = net.params().value("trunk.0.W");
    train_task(net, t1, 1, 0.05, s, ft, 2);
    CHECK(bit_equal(net.params().value("head.0.W"), w0));
    CHECK(bit_equal(net.params().value("head.0.b"), b0));
    CHECK_FALSE(bit_equal(net.params().value("trunk.0.W"), trunk));
}

TEST_CASE("net save/load round-trip") {
    NetConfig cfg;
    cfg.widths = {3, 4, 2};
    cfg.keep_prob = 0.5;
    auto net = build_network(cfg, 8);
    net.add_head(3, 1);
    ByteWriter w;
    net.save(w);
    ByteReader r(w.buffer());
    auto back = MultiHeadNet::load(r);
    CHECK(back == net);
    ByteWriter w2;
    back.save(w2);
    CHECK(w.buffer() == w2.buffer());
}
