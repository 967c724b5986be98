#include "clf/reg_methods.hpp"

#include <algorithm>
#include <cmath>

#include "clf/optim.hpp"

namespace clf {

void save_matrix_map(ByteWriter& w, const MatrixMap& m) {
    w.u64(m.size());
    for (const auto& [id, v] : m) {
        w.str(id);
        w.matrix(v);
    }
}

MatrixMap load_matrix_map(ByteReader& r) {
    MatrixMap m;
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        auto id = r.str();
        m.emplace(std::move(id), r.matrix());
    }
    return m;
}

void ImportanceMap::save(ByteWriter& w) const {
    save_matrix_map(w, omega);
    save_matrix_map(w, anchor);
}

ImportanceMap ImportanceMap::load(ByteReader& r) {
    ImportanceMap m;
    m.omega = load_matrix_map(r);
    m.anchor = load_matrix_map(r);
    return m;
}

Var quadratic_penalty(Tape& tape, const ParamStore& params, const ImportanceMap& anchor, double strength) {
    require(strength >= 0, "penalty strength must be non-negative");
    Var total = tape.constant(Matrix::Zero(1, 1));
    for (const auto& [id, theta_star] : anchor.anchor) {
        auto it = anchor.omega.find(id);
        if (it == anchor.omega.end()) throw ContractError("importance missing for '" + id + "'");
        const Matrix& cur = params.value(id);
        if (cur.rows() != theta_star.rows() || cur.cols() != theta_star.cols() ||
            it->second.rows() != cur.rows() || it->second.cols() != cur.cols()) {
            throw ContractError("quadratic penalty shape mismatch for '" + id + "'");
        }
        total = ad::add(total, ad::weighted_sq_dist(tape.param(id, cur), theta_star, it->second));
    }
    return ad::scale(total, strength / 2.0);
}

double quadratic_penalty(const ParamStore& params, const ImportanceMap& anchor, double strength) {
    Tape t;
    return quadratic_penalty(t, params, anchor, strength).scalar();
}

namespace {

template <typename Reduce>
MatrixMap reduce_sample_grads(const ParamStore& params, const std::vector<std::string>& ids, std::size_t samples,
                              const SampleLoss& loss, Reduce reduce) {
    if (samples == 0) throw ContractError("importance estimation needs at least one sample");
    MatrixMap acc;
    for (const auto& id : ids) acc.emplace(id, Matrix::Zero(params.value(id).rows(), params.value(id).cols()));
    for (std::size_t i = 0; i < samples; ++i) {
        Tape t;
        const GradMap g = t.backward(loss(t, params, i));
        for (const auto& id : ids) {
            auto it = g.find(id);
            if (it != g.end()) acc[id] += it->second.unaryExpr(reduce);
        }
    }
    for (auto& [id, m] : acc) m /= static_cast<double>(samples);
    return acc;
}

Matrix stack_rows(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() + b.rows(), std::max(a.cols(), b.cols()));
    if (a.rows()) out.topRows(a.rows()) = a;
    if (b.rows()) out.bottomRows(b.rows()) = b;
    return out;
}

SplitData train_and_val(const TaskData& task) {
    SplitData s;
    s.x = stack_rows(task.train.x, task.val.x);
    s.y = task.train.y;
    s.y.insert(s.y.end(), task.val.y.begin(), task.val.y.end());
    return s;
}

}  // namespace

MatrixMap mean_squared_sample_grads(const ParamStore& params, const std::vector<std::string>& ids,
                                    std::size_t samples, const SampleLoss& loss) {
    return reduce_sample_grads(params, ids, samples, loss, [](double g) { return g * g; });
}

MatrixMap mean_abs_sample_grads(const ParamStore& params, const std::vector<std::string>& ids, std::size_t samples,
                                const SampleLoss& loss, bool absolute) {
    if (absolute) return reduce_sample_grads(params, ids, samples, loss, [](double g) { return std::abs(g); });
    return reduce_sample_grads(params, ids, samples, loss, [](double g) { return g; });
}

MatrixMap ewc_importance(const MultiHeadNet& net, const SplitData& data, int head) {
    if (data.size() == 0) throw ContractError("ewc_importance: empty data");
    return mean_squared_sample_grads(net.params(), net.trunk_ids(), data.size(),
                                     [&](Tape& t, const ParamStore&, std::size_t i) {
                                         const auto row = static_cast<Eigen::Index>(i);
                                         auto out = forward_pass(t, net, data.x.row(row), head);
                                         const std::vector<int> y{data.y[i]};
                                         return ad::softmax_cross_entropy(out.logits, y);
                                     });
}

MatrixMap mas_importance(const MultiHeadNet& net, const Matrix& inputs, int head, bool absolute) {
    if (inputs.rows() == 0) throw ContractError("mas_importance: empty input");
    return mean_abs_sample_grads(
        net.params(), net.trunk_ids(), static_cast<std::size_t>(inputs.rows()),
        [&](Tape& t, const ParamStore&, std::size_t i) {
            auto out = forward_pass(t, net, inputs.row(static_cast<Eigen::Index>(i)), head);
            return ad::sum(ad::square(out.logits));
        },
        absolute);
}

ImportanceMap accumulate_importance(const ImportanceMap& old, const MatrixMap& omega_new,
                                    const MatrixMap& anchor_new) {
    ImportanceMap out;
    out.anchor = anchor_new;
    for (const auto& [id, w] : omega_new) {
        if (auto it = old.omega.find(id); it != old.omega.end()) {
            if (it->second.rows() != w.rows() || it->second.cols() != w.cols()) {
                throw ContractError("importance shape mismatch for '" + id + "'");
            }
            out.omega[id] = it->second + w;
        } else {
            out.omega[id] = w;
        }
    }
    for (const auto& [id, w] : old.omega) out.omega.emplace(id, w);
    for (const auto& [id, w] : out.omega) {
        if (!out.anchor.count(id)) throw ContractError("importance without anchor for '" + id + "'");
    }
    return out;
}

void si_path_update(SIRunningState& st, const GradMap& grads, const MatrixMap& delta) {
    for (const auto& [id, d] : delta) {
        auto g = grads.find(id);
        if (g == grads.end()) continue;
        auto& w = st.path[id];
        if (w.size() == 0) w = Matrix::Zero(d.rows(), d.cols());
        w -= g->second.cwiseProduct(d);
    }
}

MatrixMap si_consolidate(SIRunningState& st, const MatrixMap& theta_end, double damping) {
    if (!(damping > 0)) throw ContractError("SI damping must be positive");
    MatrixMap inc;
    for (const auto& [id, w] : st.path) {
        const Matrix& end = theta_end.at(id);
        const Matrix& start = st.start.at(id);
        const Matrix moved = (end - start).cwiseAbs2();
        inc[id] = (w.array() / (moved.array() + damping)).cwiseMax(0.0).matrix();
    }
    for (auto& [id, w] : st.path) w.setZero();
    return inc;
}

Var distill_loss(Var current_logits, const Matrix& target_logits, double tau) {
    if (current_logits.cols() != target_logits.cols() || current_logits.rows() != target_logits.rows()) {
        throw ContractError("distill_loss: mismatched head widths");
    }
    return ad::soft_cross_entropy(current_logits, softmax_rows(target_logits, tau), tau);
}

// ---------------------------------------------------------------------------
// Autoencoder

namespace {

Matrix sigmoid(const Matrix& z) {
    return z.unaryExpr([](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Matrix uniform_init(int rows, int cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / (rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
}

struct AeVars {
    Var code;
    Var recon;
};

AeVars ae_forward(Tape& t, const ParamStore& p, Var f, bool sigmoid_code) {
    Var z = ad::add_row(ad::matmul(f, t.param(p, "enc.W")), t.param(p, "enc.b"));
    Var code = sigmoid_code ? ad::sigmoid(z) : z;
    Var rec = ad::add_row(ad::matmul(code, t.param(p, "dec.W")), t.param(p, "dec.b"));
    return {code, rec};
}

Var ae_objective(Tape& t, const ParamStore& p, const Matrix& f, const std::vector<int>& y, const Matrix& head_w,
                 const Matrix& head_b, double recon_strength, bool sigmoid_code) {
    Var fx = t.constant(f);
    auto v = ae_forward(t, p, fx, sigmoid_code);
    Var logits = ad::add_row(ad::matmul(v.recon, t.constant(head_w)), t.constant(head_b));
    Var ce = ad::softmax_cross_entropy(logits, y);
    Var rec = ad::scale(ad::sq_dist(v.recon, f), recon_strength / static_cast<double>(f.rows()));
    return ad::add(ce, rec);
}

}  // namespace

Var TaskAutoencoder::encode(Tape& tape, Var features, bool trainable) const {
    Var w = trainable ? tape.param("enc.W", enc_w) : tape.constant(enc_w);
    Var b = trainable ? tape.param("enc.b", enc_b) : tape.constant(enc_b);
    Var z = ad::add_row(ad::matmul(features, w), b);
    return sigmoid_code ? ad::sigmoid(z) : z;
}

Matrix TaskAutoencoder::encode(const Matrix& features) const {
    Matrix z = (features * enc_w).rowwise() + enc_b.row(0);
    return sigmoid_code ? sigmoid(z) : z;
}

Matrix TaskAutoencoder::reconstruct(const Matrix& features) const {
    return (encode(features) * dec_w).rowwise() + dec_b.row(0);
}

void TaskAutoencoder::save(ByteWriter& w) const {
    w.matrix(enc_w);
    w.matrix(enc_b);
    w.matrix(dec_w);
    w.matrix(dec_b);
    w.u8(sigmoid_code ? 1 : 0);
    w.f64(recon_strength);
}

TaskAutoencoder TaskAutoencoder::load(ByteReader& r) {
    TaskAutoencoder a;
    a.enc_w = r.matrix();
    a.enc_b = r.matrix();
    a.dec_w = r.matrix();
    a.dec_b = r.matrix();
    a.sigmoid_code = r.u8() != 0;
    a.recon_strength = r.f64();
    return a;
}

TaskAutoencoder ebll_train_autoencoder(const Matrix& train_features, const std::vector<int>& train_labels,
                                       const Matrix& val_features, const std::vector<int>& val_labels,
                                       const Matrix& head_w, const Matrix& head_b, const AutoencoderTraining& cfg,
                                       std::uint64_t seed) {
    if (cfg.grid.empty()) throw ContractError("autoencoder grid is empty");
    require(train_features.rows() > 0, "autoencoder training needs features");
    const int fdim = static_cast<int>(train_features.cols());
    for (const auto& e : cfg.grid) {
        require(e.code_dim >= 1 && e.code_dim < fdim, "autoencoder code dimension must be below the feature dimension");
        require(e.recon_strength >= 0, "reconstruction strength must be non-negative");
    }
    const bool has_val = val_features.rows() > 0;
    const Matrix& vf = has_val ? val_features : train_features;
    const std::vector<int>& vy = has_val ? val_labels : train_labels;

    TaskAutoencoder best;
    double best_obj = 0;
    for (std::size_t gi = 0; gi < cfg.grid.size(); ++gi) {
        const auto& e = cfg.grid[gi];
        Rng rng(derive_seed(seed, {gi}));
        ParamStore p;
        p.add("enc.W", uniform_init(fdim, e.code_dim, rng));
        p.add("enc.b", Matrix::Zero(1, e.code_dim));
        p.add("dec.W", uniform_init(e.code_dim, fdim, rng));
        p.add("dec.b", Matrix::Zero(1, fdim));
        SplitData data;
        data.x = train_features;
        data.y = train_labels;
        data.source_rows.resize(train_labels.size());
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            for (const auto& rows : batches(train_labels.size(), cfg.batch_size, derive_seed(seed, {gi, 1}),
                                            static_cast<std::uint64_t>(epoch))) {
                const auto part = data.subset(rows);
                Tape t;
                Var obj = ae_objective(t, p, part.x, part.y, head_w, head_b, e.recon_strength, cfg.sigmoid_code);
                sgd_momentum_step(p, t.backward(obj), {cfg.learning_rate, 0.9, 0.0});
            }
        }
        Tape t;
        const double val = ae_objective(t, p, vf, vy, head_w, head_b, e.recon_strength, cfg.sigmoid_code).scalar();
        if (gi == 0 || val < best_obj) {
            best_obj = val;
            best.enc_w = p.value("enc.W");
            best.enc_b = p.value("enc.b");
            best.dec_w = p.value("dec.W");
            best.dec_b = p.value("dec.b");
            best.sigmoid_code = cfg.sigmoid_code;
            best.recon_strength = e.recon_strength;
        }
    }
    return best;
}

Var ebll_code_penalty(Tape& tape, Var features, const std::vector<Matrix>& recorded_codes,
                      const std::vector<TaskAutoencoder>& encoders) {
    if (recorded_codes.size() != encoders.size()) throw ContractError("missing recorded codes for an old task");
    Var total = tape.constant(Matrix::Zero(1, 1));
    const double n = static_cast<double>(features.rows());
    for (std::size_t k = 0; k < encoders.size(); ++k) {
        Var code = encoders[k].encode(tape, features);
        if (recorded_codes[k].rows() != code.rows()) throw ContractError("missing recorded codes for the batch");
        total = ad::add(total, ad::sq_dist(code, recorded_codes[k]));
    }
    return ad::scale(total, 1.0 / n);
}

// ---------------------------------------------------------------------------
// IMM

void IMMBank::save(ByteWriter& w) const {
    w.u64(models.size());
    for (const auto& m : models) save_matrix_map(w, m);
    w.u64(omegas.size());
    for (const auto& m : omegas) save_matrix_map(w, m);
    w.f64s(alphas);
}

IMMBank IMMBank::load(ByteReader& r) {
    IMMBank b;
    b.models.resize(r.u64());
    for (auto& m : b.models) m = load_matrix_map(r);
    b.omegas.resize(r.u64());
    for (auto& m : b.omegas) m = load_matrix_map(r);
    b.alphas = r.f64s();
    return b;
}

namespace {

std::vector<std::string> shared_ids(const IMMBank& bank) {
    if (bank.models.empty()) throw ContractError("IMM merge needs at least one model");
    if (bank.alphas.size() != bank.models.size()) throw ContractError("one mixing ratio per model is required");
    double s = 0;
    for (double a : bank.alphas) {
        require(a >= 0, "mixing ratios must be non-negative");
        s += a;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ContractError("mixing ratios must sum to 1");
    std::vector<std::string> ids;
    for (const auto& [id, v] : bank.models.front()) {
        if (std::all_of(bank.models.begin(), bank.models.end(), [&](const auto& m) { return m.count(id) != 0; })) {
            ids.push_back(id);
        }
    }
    return ids;
}

}  // namespace

MatrixMap imm_mean_merge(const IMMBank& bank) {
    MatrixMap out;
    for (const auto& id : shared_ids(bank)) {
        Matrix acc = bank.alphas[0] * bank.models[0].at(id);
        for (std::size_t t = 1; t < bank.models.size(); ++t) acc += bank.alphas[t] * bank.models[t].at(id);
        out.emplace(id, std::move(acc));
    }
    return out;
}

MatrixMap imm_mode_merge(const IMMBank& bank, double floor) {
    const auto ids = shared_ids(bank);
    if (bank.omegas.size() != bank.models.size()) throw ContractError("mode-IMM requires a per-task importance map");
    const MatrixMap mean = imm_mean_merge(bank);
    // Ω·θ/Ω is not exact in floating point; one snapshot merges to itself.
    if (bank.models.size() == 1) return mean;
    MatrixMap out;
    for (const auto& id : ids) {
        const Matrix& ref = bank.models[0].at(id);
        Matrix num = Matrix::Zero(ref.rows(), ref.cols());
        Matrix den = Matrix::Zero(ref.rows(), ref.cols());
        for (std::size_t t = 0; t < bank.models.size(); ++t) {
            auto it = bank.omegas[t].find(id);
            if (it == bank.omegas[t].end()) throw ContractError("missing importance for '" + id + "'");
            const Matrix w = bank.alphas[t] * it->second;
            num += w.cwiseProduct(bank.models[t].at(id));
            den += w;
        }
        Matrix m(ref.rows(), ref.cols());
        const Matrix& fallback = mean.at(id);
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = den.data()[i] > floor ? num.data()[i] / den.data()[i] : fallback.data()[i];
        }
        out.emplace(id, std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plugins

namespace {

MatrixMap trunk_values(const MultiHeadNet& net) {
    MatrixMap m;
    for (const auto& id : net.trunk_ids()) m.emplace(id, net.params().value(id));
    return m;
}

}  // namespace

std::optional<Var> ImportancePlugin::penalty(BatchContext& ctx) {
    const double lambda = hyper_.get("lambda");
    if (lambda == 0.0 || importance_.empty()) return std::nullopt;
    return quadratic_penalty(ctx.tape, ctx.net.params(), importance_, lambda);
}

void ImportancePlugin::save_state(ByteWriter& w) const { importance_.save(w); }
void ImportancePlugin::load_state(ByteReader& r) { importance_ = ImportanceMap::load(r); }

EwcPlugin::EwcPlugin(double lambda) { hyper_.add({"lambda", lambda, true}); }

void EwcPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    importance_ = accumulate_importance(importance_, ewc_importance(net, train_and_val(task), head), trunk_values(net));
}

MasPlugin::MasPlugin(double lambda, bool absolute) : absolute_(absolute) { hyper_.add({"lambda", lambda, true}); }

void MasPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    const auto data = train_and_val(task);
    importance_ = accumulate_importance(importance_, mas_importance(net, data.x, head, absolute_), trunk_values(net));
}

SiPlugin::SiPlugin(double lambda, double damping) : damping_(damping) {
    require(damping > 0, "SI damping must be positive");
    hyper_.add({"lambda", lambda, true});
}

void SiPlugin::on_task_start(MultiHeadNet& net, const TaskData&, int) {
    running_.start = trunk_values(net);
    running_.path.clear();
    for (const auto& [id, v] : running_.start) running_.path.emplace(id, Matrix::Zero(v.rows(), v.cols()));
}

void SiPlugin::transform_gradients(GradMap&, const MultiHeadNet& net, BatchContext&) { before_step_ = trunk_values(net); }

void SiPlugin::after_step(MultiHeadNet& net, const GradMap& grads, BatchContext&) {
    MatrixMap delta;
    for (const auto& [id, before] : before_step_) delta.emplace(id, net.params().value(id) - before);
    si_path_update(running_, grads, delta);
}

void SiPlugin::on_task_end(MultiHeadNet& net, const TaskData&, int) {
    const MatrixMap end = trunk_values(net);
    importance_ = accumulate_importance(importance_, si_consolidate(running_, end, damping_), end);
}

void SiPlugin::save_state(ByteWriter& w) const {
    ImportancePlugin::save_state(w);
    w.f64(damping_);
    save_matrix_map(w, running_.path);
    save_matrix_map(w, running_.start);
}

void SiPlugin::load_state(ByteReader& r) {
    ImportancePlugin::load_state(r);
    damping_ = r.f64();
    running_.path = load_matrix_map(r);
    running_.start = load_matrix_map(r);
}

LwfPlugin::LwfPlugin(double kd_strength, double tau) : tau_(tau) {
    require(tau > 0, "distillation temperature must be positive");
    hyper_.add({"kd_strength", kd_strength, true});
}

void LwfPlugin::on_task_start(MultiHeadNet& net, const TaskData& task, int head) {
    targets_.clear();
    for (int h = 0; h < head; ++h) targets_.push_back(predict_logits(net, task.train.x, h));
}

std::optional<Var> LwfPlugin::distill_term(BatchContext& ctx) const {
    const double kd = hyper_.get("kd_strength");
    if (kd == 0.0 || targets_.empty()) return std::nullopt;
    Var total = ctx.tape.constant(Matrix::Zero(1, 1));
    for (std::size_t h = 0; h < targets_.size(); ++h) {
        const int head = static_cast<int>(h);
        const Matrix& w = ctx.net.params().value(MultiHeadNet::head_weight(head));
        const Matrix& b = ctx.net.params().value(MultiHeadNet::head_bias(head));
        Var cur = ad::add_row(ad::matmul(ctx.out.features, ctx.tape.constant(w)), ctx.tape.constant(b));
        Matrix tgt(static_cast<Eigen::Index>(ctx.rows.size()), targets_[h].cols());
        for (std::size_t i = 0; i < ctx.rows.size(); ++i) {
            tgt.row(static_cast<Eigen::Index>(i)) = targets_[h].row(static_cast<Eigen::Index>(ctx.rows[i]));
        }
        total = ad::add(total, distill_loss(cur, tgt, tau_));
    }
    return ad::scale(total, kd / static_cast<double>(targets_.size()));
}

std::optional<Var> LwfPlugin::penalty(BatchContext& ctx) { return distill_term(ctx); }

EbllPlugin::EbllPlugin(double kd_strength, double code_strength, AutoencoderTraining ae, double tau)
    : LwfPlugin(kd_strength, tau), ae_cfg_(std::move(ae)) {
    hyper_.add({"code_strength", code_strength, true});
    if (ae_cfg_.grid.empty()) ae_cfg_.grid = {{8, 0.01}, {8, 0.001}};
}

void EbllPlugin::on_task_start(MultiHeadNet& net, const TaskData& task, int head) {
    LwfPlugin::on_task_start(net, task, head);
    codes_.clear();
    const Matrix f = predict_features(net, task.train.x);
    for (const auto& ae : autoencoders_) codes_.push_back(ae.encode(f));
}

std::optional<Var> EbllPlugin::penalty(BatchContext& ctx) {
    auto kd = distill_term(ctx);
    const double cs = hyper_.get("code_strength");
    std::optional<Var> code;
    if (cs != 0.0 && !autoencoders_.empty()) {
        std::vector<Matrix> batch_codes;
        for (const auto& c : codes_) {
            Matrix m(static_cast<Eigen::Index>(ctx.rows.size()), c.cols());
            for (std::size_t i = 0; i < ctx.rows.size(); ++i) {
                m.row(static_cast<Eigen::Index>(i)) = c.row(static_cast<Eigen::Index>(ctx.rows[i]));
            }
            batch_codes.push_back(std::move(m));
        }
        code = ad::scale(ebll_code_penalty(ctx.tape, ctx.out.features, batch_codes, autoencoders_), cs);
    }
    if (kd && code) return ad::add(*kd, *code);
    return kd ? kd : code;
}

void EbllPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    AutoencoderTraining cfg = ae_cfg_;
    const int fdim = net.config().feature_dim();
    for (auto& e : cfg.grid) e.code_dim = std::min(e.code_dim, fdim - 1);
    require(fdim > 1, "EBLL needs a feature dimension of at least 2");
    const Matrix ftr = predict_features(net, task.train.x);
    const Matrix fva = task.val.size() ? predict_features(net, task.val.x) : Matrix(0, fdim);
    autoencoders_.push_back(ebll_train_autoencoder(ftr, task.train.y, fva, task.val.y,
                                                   net.params().value(MultiHeadNet::head_weight(head)),
                                                   net.params().value(MultiHeadNet::head_bias(head)), cfg,
                                                   derive_seed(0xeb11ULL, {static_cast<std::uint64_t>(head)})));
}

void EbllPlugin::save_state(ByteWriter& w) const {
    w.u64(autoencoders_.size());
    for (const auto& a : autoencoders_) a.save(w);
}

void EbllPlugin::load_state(ByteReader& r) {
    autoencoders_.resize(r.u64());
    for (auto& a : autoencoders_) a = TaskAutoencoder::load(r);
}

ImmPlugin::ImmPlugin(Merge merge, double l2_transfer) : merge_(merge) {
    hyper_.add({"l2_transfer", l2_transfer, false});
}

void ImmPlugin::on_task_start(MultiHeadNet& net, const TaskData&, int head) {
    anchor_ = {};
    if (head == 0) return;
    anchor_.anchor = trunk_values(net);
    for (const auto& [id, v] : anchor_.anchor) anchor_.omega.emplace(id, Matrix::Ones(v.rows(), v.cols()));
}

std::optional<Var> ImmPlugin::penalty(BatchContext& ctx) {
    const double l2 = hyper_.get("l2_transfer");
    if (l2 == 0.0 || anchor_.empty()) return std::nullopt;
    return quadratic_penalty(ctx.tape, ctx.net.params(), anchor_, l2);
}

void ImmPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    bank_.models.push_back(trunk_values(net));
    if (merge_ == Merge::mode) bank_.omegas.push_back(ewc_importance(net, train_and_val(task), head));
    bank_.alphas.assign(bank_.models.size(), 1.0 / static_cast<double>(bank_.models.size()));
}

MultiHeadNet ImmPlugin::merged(const MultiHeadNet& net) const {
    if (bank_.models.empty()) return net;
    const MatrixMap m = merge_ == Merge::mean ? imm_mean_merge(bank_) : imm_mode_merge(bank_);
    MultiHeadNet out = net;
    for (const auto& [id, v] : m) out.params().value(id) = v;
    return out;
}

void ImmPlugin::save_state(ByteWriter& w) const {
    bank_.save(w);
    anchor_.save(w);
}

void ImmPlugin::load_state(ByteReader& r) {
    bank_ = IMMBank::load(r);
    anchor_ = ImportanceMap::load(r);
}

}  // namespace clf
