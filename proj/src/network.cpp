#include "clf/network.hpp"

#include <cmath>

namespace clf {

void NetConfig::validate() const {
    require(widths.size() >= 2, "network needs an input width and at least one hidden width");
    for (int w : widths) require(w >= 1, "layer widths must be at least 1");
    require(keep_prob > 0.0 && keep_prob <= 1.0, "dropout keep-probability must lie in (0, 1]");
    require(weight_decay >= 0.0, "weight decay must be non-negative");
}

void TrainSchedule::validate() const {
    require(max_epochs >= 0, "max_epochs must be non-negative");
    require(anneal_patience >= 1 && stop_patience >= anneal_patience,
            "schedule requires stop_patience >= anneal_patience >= 1");
    require(anneal_factor >= 1.0, "anneal factor must be at least 1");
    require(batch_size >= 1, "batch size must be at least 1");
    require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
}

ScheduleTracker::Decision ScheduleTracker::observe(double val_acc) {
    if (val_acc > best_) {
        best_ = val_acc;
        unimproved_ = 0;
        return Decision::improved;
    }
    ++unimproved_;
    if (unimproved_ >= stop_) return Decision::stop;
    if (unimproved_ % anneal_ == 0) return Decision::anneal;
    return Decision::none;
}

namespace {

Matrix he_uniform(int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    Matrix w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
    return w;
}

}  // namespace

MultiHeadNet::MultiHeadNet(NetConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::string MultiHeadNet::trunk_weight(std::size_t layer) { return "trunk." + std::to_string(layer) + ".W"; }
std::string MultiHeadNet::trunk_bias(std::size_t layer) { return "trunk." + std::to_string(layer) + ".b"; }
std::string MultiHeadNet::head_weight(int head) { return "head." + std::to_string(head) + ".W"; }
std::string MultiHeadNet::head_bias(int head) { return "head." + std::to_string(head) + ".b"; }

bool MultiHeadNet::is_head_id(const std::string& id) { return id.rfind("head.", 0) == 0; }

std::vector<std::string> MultiHeadNet::trunk_ids() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < cfg_.trunk_layers(); ++l) {
        out.push_back(trunk_weight(l));
        out.push_back(trunk_bias(l));
    }
    return out;
}

std::vector<std::string> MultiHeadNet::head_ids(int head) const {
    head_classes(head);
    return {head_weight(head), head_bias(head)};
}

int MultiHeadNet::head_classes(int head) const {
    if (head < 0 || head >= num_heads()) throw ContractError("unknown head " + std::to_string(head));
    return head_classes_[static_cast<std::size_t>(head)];
}

int MultiHeadNet::add_head(int classes, std::uint64_t seed) {
    require(classes >= 1, "a head needs at least one class");
    const int h = num_heads();
    Rng rng(seed);
    params_.add(head_weight(h), he_uniform(cfg_.feature_dim(), classes, rng));
    params_.add(head_bias(h), Matrix::Zero(1, classes));
    head_classes_.push_back(classes);
    return h;
}

void MultiHeadNet::save(ByteWriter& w) const {
    w.u64(cfg_.widths.size());
    for (int x : cfg_.widths) w.u32(static_cast<std::uint32_t>(x));
    w.f64(cfg_.keep_prob);
    w.f64(cfg_.weight_decay);
    w.u64(cfg_.init_seed);
    w.u64(head_classes_.size());
    for (int c : head_classes_) w.u32(static_cast<std::uint32_t>(c));
    params_.save(w);
}

MultiHeadNet MultiHeadNet::load(ByteReader& r) {
    NetConfig cfg;
    cfg.widths.resize(r.u64());
    for (auto& x : cfg.widths) x = static_cast<int>(r.u32());
    cfg.keep_prob = r.f64();
    cfg.weight_decay = r.f64();
    cfg.init_seed = r.u64();
    MultiHeadNet net(cfg);
    net.head_classes_.resize(r.u64());
    for (auto& c : net.head_classes_) c = static_cast<int>(r.u32());
    net.params_ = ParamStore::load(r);
    return net;
}

MultiHeadNet build_network(const NetConfig& cfg, std::uint64_t seed) {
    MultiHeadNet net(cfg);
    Rng rng(derive_seed(seed, {0x7275ULL}));
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
        net.params().add(MultiHeadNet::trunk_weight(l), he_uniform(cfg.widths[l], cfg.widths[l + 1], rng));
        net.params().add(MultiHeadNet::trunk_bias(l), Matrix::Zero(1, cfg.widths[l + 1]));
    }
    return net;
}

ForwardResult forward_pass(Tape& tape, const MultiHeadNet& net, const Matrix& x, int head,
                           const ForwardOptions& opt) {
    const auto& cfg = net.config();
    net.head_classes(head);
    if (x.cols() != cfg.widths.front()) throw ContractError("input width does not match the network");
    if (!x.allFinite()) throw ContractError("forward_pass input contains non-finite values");
    if (opt.gates && opt.gates->size() != cfg.trunk_layers()) {
        throw ContractError("gate count differs from trunk depth");
    }
    const bool drop = opt.mode == Mode::train && cfg.keep_prob < 1.0;
    if (drop && !opt.rng) throw ContractError("train-mode dropout requires an rng");

    ForwardResult out;
    Var h = tape.constant(x);
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
        h = ad::matmul(h, tape.param(net.params(), MultiHeadNet::trunk_weight(l)));
        h = ad::add_row(h, tape.param(net.params(), MultiHeadNet::trunk_bias(l)));
        h = ad::relu(h);
        if (opt.gates) h = ad::mul_row(h, (*opt.gates)[l]);
        if (drop) h = ad::apply_mask(h, dropout_mask(h.rows(), h.cols(), cfg.keep_prob, *opt.rng));
    }
    out.features = h;
    Var z = ad::matmul(h, tape.param(net.params(), MultiHeadNet::head_weight(head)));
    out.logits = ad::add_row(z, tape.param(net.params(), MultiHeadNet::head_bias(head)));
    if (opt.gates) out.gates = *opt.gates;
    return out;
}

Matrix predict_logits(const MultiHeadNet& net, const Matrix& x, int head) {
    Tape t;
    return forward_pass(t, net, x, head).logits.value();
}

Matrix predict_features(const MultiHeadNet& net, const Matrix& x) {
    const auto& cfg = net.config();
    if (x.cols() != cfg.widths.front()) throw ContractError("input width does not match the network");
    Matrix h = x;
    for (std::size_t l = 0; l < cfg.trunk_layers(); ++l) {
        h = (h * net.params().value(MultiHeadNet::trunk_weight(l))).rowwise() +
            net.params().value(MultiHeadNet::trunk_bias(l)).row(0);
        h = h.cwiseMax(0.0);
    }
    return h;
}

std::vector<int> argmax_rows(const Matrix& m) {
    std::vector<int> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < m.cols(); ++j) {
            if (m(i, j) > m(i, best)) best = j;
        }
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    require(predicted.size() == truth.size(), "prediction count differs from label count");
    if (truth.empty()) throw ContractError("accuracy of an empty set");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double evaluate(const MultiHeadNet& net, const SplitData& data, int head) {
    if (data.size() == 0) throw ContractError("evaluate on an empty set");
    return accuracy(argmax_rows(predict_logits(net, data.x, head)), data.y);
}

}  // namespace clf
