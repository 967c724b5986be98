#include "clf/replay_methods.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "clf/reg_methods.hpp"

namespace clf {

std::string to_string(BufferPolicy p) { return p == BufferPolicy::full ? "full" : "partial"; }

BufferPolicy parse_buffer_policy(const std::string& s) {
    if (s == "full") return BufferPolicy::full;
    if (s == "partial") return BufferPolicy::partial;
    throw ContractError("unknown buffer policy '" + s + "'");
}

std::size_t TaskExemplars::size() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.size();
    return n;
}

Matrix TaskExemplars::inputs() const {
    Eigen::Index cols = 0;
    for (const auto& c : classes) cols = std::max(cols, c.x.cols());
    Matrix out(static_cast<Eigen::Index>(size()), cols);
    Eigen::Index r = 0;
    for (const auto& c : classes) {
        if (c.size() == 0) continue;
        out.middleRows(r, c.x.rows()) = c.x;
        r += c.x.rows();
    }
    return out;
}

std::vector<int> TaskExemplars::labels() const {
    std::vector<int> y;
    y.reserve(size());
    for (const auto& c : classes) y.insert(y.end(), c.size(), c.label);
    return y;
}

void TaskExemplars::truncate(std::size_t quota) {
    if (size() <= quota) return;
    // Recompute the even split over classes, then cap each class. Classes that
    // had fewer exemplars than their share leave the rest unused.
    const auto shares = split_evenly(quota, classes.size());
    for (std::size_t c = 0; c < classes.size(); ++c) {
        auto& ce = classes[c];
        if (ce.size() <= shares[c]) continue;
        ce.source_rows.resize(shares[c]);
        ce.x.conservativeResize(static_cast<Eigen::Index>(shares[c]), Eigen::NoChange);
    }
}

std::vector<std::size_t> buffer_allocate(std::size_t capacity, BufferPolicy policy, std::size_t seen,
                                         std::size_t total_tasks) {
    require(seen >= 1, "buffer_allocate: at least one task must have been seen");
    require(total_tasks >= 1, "buffer_allocate: total task count must be positive");
    const std::size_t q = policy == BufferPolicy::full ? capacity / seen : capacity / total_tasks;
    if (q == 0) spdlog::warn("replay capacity {} leaves no exemplars per task ({} tasks)", capacity, seen);
    return std::vector<std::size_t>(seen, q);
}

std::vector<std::size_t> split_evenly(std::size_t quota, std::size_t parts) {
    std::vector<std::size_t> out(parts, 0);
    if (parts == 0) return out;
    for (std::size_t i = 0; i < parts; ++i) out[i] = quota / parts + (i < quota % parts ? 1 : 0);
    return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, BufferPolicy policy, std::size_t total_tasks)
    : capacity_(capacity), policy_(policy), total_tasks_(total_tasks) {
    require(total_tasks >= 1, "replay buffer needs a positive task count");
}

std::size_t ReplayBuffer::next_quota() const {
    return buffer_allocate(capacity_, policy_, tasks_.size() + 1, total_tasks_).back();
}

void ReplayBuffer::store(TaskExemplars ex) {
    tasks_.push_back(std::move(ex));
    rebalance();
}

void ReplayBuffer::rebalance() {
    if (tasks_.empty()) return;
    const auto q = buffer_allocate(capacity_, policy_, tasks_.size(), total_tasks_);
    for (std::size_t i = 0; i < tasks_.size(); ++i) tasks_[i].truncate(q[i]);
}

const TaskExemplars* ReplayBuffer::find(int task) const {
    for (const auto& t : tasks_) {
        if (t.task == task) return &t;
    }
    return nullptr;
}

std::size_t ReplayBuffer::total() const {
    std::size_t n = 0;
    for (const auto& t : tasks_) n += t.size();
    return n;
}

void ReplayBuffer::save(ByteWriter& w) const {
    w.magic("RBUF");
    w.u64(capacity_);
    w.u8(policy_ == BufferPolicy::full ? 1 : 0);
    w.u64(total_tasks_);
    w.u64(tasks_.size());
    for (const auto& t : tasks_) {
        w.i64(t.task);
        w.u64(t.classes.size());
        for (const auto& c : t.classes) {
            w.i64(c.label);
            w.matrix(c.x);
            w.u64(c.source_rows.size());
            for (auto r : c.source_rows) w.u64(r);
        }
    }
}

ReplayBuffer ReplayBuffer::load(ByteReader& r) {
    r.expect_magic("RBUF");
    ReplayBuffer b;
    b.capacity_ = r.u64();
    b.policy_ = r.u8() ? BufferPolicy::full : BufferPolicy::partial;
    b.total_tasks_ = r.u64();
    const auto nt = r.u64();
    for (std::uint64_t i = 0; i < nt; ++i) {
        TaskExemplars t;
        t.task = static_cast<int>(r.i64());
        const auto nc = r.u64();
        for (std::uint64_t c = 0; c < nc; ++c) {
            ClassExemplars ce;
            ce.label = static_cast<int>(r.i64());
            ce.x = r.matrix();
            const auto n = r.u64();
            for (std::uint64_t k = 0; k < n; ++k) ce.source_rows.push_back(r.u64());
            if (ce.source_rows.size() != static_cast<std::size_t>(ce.x.rows())) {
                throw RuntimeError("corrupt replay buffer: row count mismatch");
            }
            t.classes.push_back(std::move(ce));
        }
        b.tasks_.push_back(std::move(t));
    }
    return b;
}

bool operator==(const ReplayBuffer& a, const ReplayBuffer& b) {
    if (a.capacity_ != b.capacity_ || a.policy_ != b.policy_ || a.total_tasks_ != b.total_tasks_) return false;
    if (a.tasks_.size() != b.tasks_.size()) return false;
    for (std::size_t i = 0; i < a.tasks_.size(); ++i) {
        const auto& x = a.tasks_[i];
        const auto& y = b.tasks_[i];
        if (x.task != y.task || x.classes.size() != y.classes.size()) return false;
        for (std::size_t c = 0; c < x.classes.size(); ++c) {
            if (x.classes[c].label != y.classes[c].label || x.classes[c].source_rows != y.classes[c].source_rows ||
                !bit_equal(x.classes[c].x, y.classes[c].x)) {
                return false;
            }
        }
    }
    return true;
}

std::vector<std::size_t> herding_select(const Matrix& features, std::size_t m) {
    const auto n = static_cast<std::size_t>(features.rows());
    if (n == 0) throw ContractError("herding_select: empty feature set");
    require(m <= n, "herding_select: cannot pick more exemplars than samples");
    const Eigen::RowVectorXd mu = features.colwise().mean();
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(features.cols());
    std::vector<bool> used(n, false);
    std::vector<std::size_t> out;
    out.reserve(m);
    for (std::size_t k = 1; k <= m; ++k) {
        double best = 0.0;
        std::size_t arg = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (used[i]) continue;
            const double d =
                (mu - (sum + features.row(static_cast<Eigen::Index>(i))) / static_cast<double>(k)).squaredNorm();
            if (arg == n || d < best - 1e-12 * std::max(1.0, best)) {
                best = d;
                arg = i;
            }
        }
        used[arg] = true;
        sum += features.row(static_cast<Eigen::Index>(arg));
        out.push_back(arg);
    }
    return out;
}

std::vector<std::size_t> random_select(std::size_t n, std::size_t m, Rng& rng) {
    require(m <= n, "random_select: cannot pick more than available");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    idx.resize(m);
    return idx;
}

Matrix l2_normalize_rows(const Matrix& m) {
    Matrix out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double n = out.row(i).norm();
        if (n > 0) out.row(i) /= n;
    }
    return out;
}

std::vector<int> nearest_mean_predict(const Matrix& features, const std::vector<Matrix>& class_features) {
    require(!class_features.empty(), "nearest_mean_predict: no candidate classes");
    Matrix means(static_cast<Eigen::Index>(class_features.size()), features.cols());
    for (std::size_t c = 0; c < class_features.size(); ++c) {
        if (class_features[c].rows() == 0) {
            throw ContractError("nearest_mean_predict: class " + std::to_string(c) + " has no exemplars");
        }
        require(class_features[c].cols() == features.cols(), "nearest_mean_predict: feature width mismatch");
        Eigen::RowVectorXd mu = l2_normalize_rows(class_features[c]).colwise().mean();
        const double n = mu.norm();
        if (n > 0) mu /= n;
        means.row(static_cast<Eigen::Index>(c)) = mu;
    }
    const Matrix f = l2_normalize_rows(features);
    std::vector<int> out(static_cast<std::size_t>(f.rows()));
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        int arg = 0;
        double best = (means.row(0) - f.row(i)).squaredNorm();
        for (Eigen::Index c = 1; c < means.rows(); ++c) {
            const double d = (means.row(c) - f.row(i)).squaredNorm();
            if (d < best) {
                best = d;
                arg = static_cast<int>(c);
            }
        }
        out[static_cast<std::size_t>(i)] = arg;
    }
    return out;
}

std::vector<int> nearest_mean_predict(const MultiHeadNet& net, const Matrix& x, const TaskExemplars& ex) {
    const int classes = net.head_classes(ex.task);
    std::vector<Matrix> per_class(static_cast<std::size_t>(classes), Matrix(0, net.config().feature_dim()));
    for (const auto& c : ex.classes) {
        require(c.label >= 0 && c.label < classes, "exemplar label outside the head's classes");
        if (c.size()) per_class[static_cast<std::size_t>(c.label)] = predict_features(net, c.x);
    }
    return nearest_mean_predict(predict_features(net, x), per_class);
}

std::size_t rehearsal_count(std::size_t batch_size, double mix) {
    if (!(mix >= 0.0 && mix <= 1.0)) throw ContractError("rehearsal mix must lie in [0,1]");
    return std::min(batch_size, static_cast<std::size_t>(std::ceil(mix * static_cast<double>(batch_size))));
}

RehearsalBatch draw_exemplars(const ReplayBuffer& buf, std::size_t k, Rng& rng) {
    std::vector<const TaskExemplars*> stored;
    for (const auto& t : buf.tasks()) {
        if (t.size()) stored.push_back(&t);
    }
    RehearsalBatch out;
    if (k > 0 && stored.empty()) {
        spdlog::warn("rehearsal requested with an empty replay buffer; using new-task samples only");
        k = 0;
    }
    Eigen::Index cols = 0;
    for (auto* t : stored) cols = std::max(cols, t->inputs().cols());
    out.x.resize(static_cast<Eigen::Index>(k), cols);
    for (std::size_t i = 0; i < k; ++i) {
        const TaskExemplars& t = *stored[i % stored.size()];
        std::size_t pick = rng.index(t.size());
        for (const auto& c : t.classes) {
            if (pick < c.size()) {
                out.x.row(static_cast<Eigen::Index>(i)) = c.x.row(static_cast<Eigen::Index>(pick));
                out.y.push_back(c.label);
                break;
            }
            pick -= c.size();
        }
        out.head.push_back(t.task);
    }
    out.exemplar_count = k;
    return out;
}

RehearsalBatch rehearsal_batch(const Matrix& new_x, const std::vector<int>& new_y, int new_head,
                               const ReplayBuffer& buf, double mix, Rng& rng) {
    require(static_cast<std::size_t>(new_x.rows()) == new_y.size(), "rehearsal_batch: label count mismatch");
    const std::size_t B = new_y.size();
    const RehearsalBatch ex = draw_exemplars(buf, rehearsal_count(B, mix), rng);
    const std::size_t k = ex.exemplar_count;
    const std::size_t keep = B - k;
    RehearsalBatch out;
    out.x.resize(static_cast<Eigen::Index>(B), new_x.cols());
    out.x.topRows(static_cast<Eigen::Index>(keep)) = new_x.topRows(static_cast<Eigen::Index>(keep));
    if (k) {
        require(ex.x.cols() == new_x.cols(), "rehearsal_batch: exemplar width mismatch");
        out.x.bottomRows(static_cast<Eigen::Index>(k)) = ex.x;
    }
    out.y.assign(new_y.begin(), new_y.begin() + static_cast<std::ptrdiff_t>(keep));
    out.y.insert(out.y.end(), ex.y.begin(), ex.y.end());
    out.head.assign(keep, new_head);
    out.head.insert(out.head.end(), ex.head.begin(), ex.head.end());
    out.exemplar_count = k;
    return out;
}

Var routed_cross_entropy(Tape& tape, const MultiHeadNet& net, const RehearsalBatch& batch,
                         const ForwardOptions& opt) {
    require(batch.y.size() == batch.head.size() && batch.y.size() == static_cast<std::size_t>(batch.x.rows()),
            "routed_cross_entropy: inconsistent batch");
    require(!batch.y.empty(), "routed_cross_entropy: empty batch");
    // One trunk pass, then per-head row groups.
    ForwardResult fr = forward_pass(tape, net, batch.x, batch.head.front(), opt);
    std::vector<int> heads = batch.head;
    std::sort(heads.begin(), heads.end());
    heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
    Var total = tape.constant(Matrix::Zero(1, 1));
    for (int h : heads) {
        std::vector<int> rows;
        for (std::size_t i = 0; i < batch.y.size(); ++i) {
            if (batch.head[i] == h) rows.push_back(static_cast<int>(i));
        }
        Matrix pick = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(batch.y.size()));
        std::vector<int> y;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            pick(static_cast<Eigen::Index>(r), rows[r]) = 1.0;
            y.push_back(batch.y[static_cast<std::size_t>(rows[r])]);
        }
        Var f = ad::matmul(tape.constant(pick), fr.features);
        Var logits = ad::add_row(ad::matmul(f, tape.param(net.params(), MultiHeadNet::head_weight(h))),
                                 tape.param(net.params(), MultiHeadNet::head_bias(h)));
        const double w = static_cast<double>(rows.size()) / static_cast<double>(batch.y.size());
        total = ad::add(total, ad::scale(ad::softmax_cross_entropy(logits, y), w));
    }
    return total;
}

Matrix gem_ref_grads(const MultiHeadNet& net, const ReplayBuffer& buf, const std::vector<std::string>& ids) {
    std::size_t P = 0;
    for (const auto& id : ids) P += static_cast<std::size_t>(net.params().value(id).size());
    Matrix G(static_cast<Eigen::Index>(buf.tasks().size()), static_cast<Eigen::Index>(P));
    for (std::size_t k = 0; k < buf.tasks().size(); ++k) {
        const auto& t = buf.tasks()[k];
        if (t.size() == 0) throw ContractError("gem_ref_grads: task " + std::to_string(t.task) + " has no exemplars");
        Tape tape;
        const auto out = forward_pass(tape, net, t.inputs(), t.task);
        const auto labels = t.labels();
        GradMap g = tape.backward(ad::softmax_cross_entropy(out.logits, labels));
        G.row(static_cast<Eigen::Index>(k)) = flatten(g, ids, net.params()).transpose();
    }
    return G;
}

namespace {

double kkt_residual(const Matrix& A, const Vector& b, const Vector& v) {
    const Vector grad = A * v + b;
    double r = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) r = std::max(r, std::abs(std::min(v(i), grad(i))));
    return r;
}

// Solves the problem restricted to the support of v exactly and keeps it if it satisfies KKT.
std::optional<Vector> polish(const Matrix& A, const Vector& b, const Vector& v, double tol) {
    std::vector<Eigen::Index> s;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (v(i) > 0) s.push_back(i);
    }
    Vector cand = Vector::Zero(v.size());
    if (!s.empty()) {
        const auto n = static_cast<Eigen::Index>(s.size());
        Matrix As(n, n);
        Vector bs(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            bs(i) = b(s[static_cast<std::size_t>(i)]);
            for (Eigen::Index j = 0; j < n; ++j) As(i, j) = A(s[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(j)]);
        }
        const Vector vs = As.completeOrthogonalDecomposition().solve(-bs);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (vs(i) < 0) return std::nullopt;
            cand(s[static_cast<std::size_t>(i)]) = vs(i);
        }
    }
    if (kkt_residual(A, b, cand) <= tol) return cand;
    return std::nullopt;
}

}  // namespace

std::optional<Vector> solve_nonneg_qp(const Matrix& A, const Vector& b, const QpOptions& opt, int* iterations) {
    const Eigen::Index k = b.size();
    require(A.rows() == k && A.cols() == k, "solve_nonneg_qp: shape mismatch");
    const double scale = std::max({1.0, b.cwiseAbs().maxCoeff(), A.cwiseAbs().maxCoeff()});
    const double tol = opt.tolerance * scale;
    Eigen::SelfAdjointEigenSolver<Matrix> es(A, Eigen::EigenvaluesOnly);
    const double L = es.eigenvalues().maxCoeff();
    Vector v = Vector::Zero(k);
    if (iterations) *iterations = 0;
    if (kkt_residual(A, b, v) <= tol) return v;
    if (!(L > 0)) return std::nullopt;
    // Accelerated projected gradient with a 1/L step, restarted when the objective rises.
    Vector y = v;
    double t = 1.0;
    auto objective = [&](const Vector& z) { return 0.5 * z.dot(A * z) + b.dot(z); };
    double fprev = objective(v);
    for (int it = 1; it <= opt.max_iterations; ++it) {
        Vector next = (y - (A * y + b) / L).cwiseMax(0.0);
        const double fn = objective(next);
        double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        if (fn > fprev) {
            tn = 1.0;
            next = (v - (A * v + b) / L).cwiseMax(0.0);
        }
        y = next + ((t - 1.0) / tn) * (next - v);
        v = next;
        t = tn;
        fprev = objective(v);
        if (iterations) *iterations = it;
        if (kkt_residual(A, b, v) <= tol) return v;
        if (it % 25 == 0) {
            if (auto p = polish(A, b, v, tol)) return p;
        }
    }
    return polish(A, b, v, tol);
}

GemProjection gem_project(const Vector& g, const Matrix& G, double gamma, const QpOptions& opt) {
    if (!(gamma >= 0)) throw ContractError("GEM margin must be non-negative");
    GemProjection res;
    res.g = g;
    if (G.rows() == 0) return res;
    require(G.cols() == g.size(), "gem_project: gradient length mismatch");
    const Vector dots = G * g;
    if (dots.minCoeff() >= 0.0) return res;
    const Matrix A = G * G.transpose();
    const Vector b = dots;
    int iters = 0;
    auto v = solve_nonneg_qp(A, b, opt, &iters);
    res.iterations = iters;
    res.projected = true;
    if (v) {
        res.v = *v;
        res.g = G.transpose() * (v->array() + gamma).matrix() + g;
        return res;
    }
    spdlog::warn("GEM QP did not converge after {} iterations; projecting violated constraints one by one", iters);
    res.fallback = true;
    Vector out = g;
    for (Eigen::Index k = 0; k < G.rows(); ++k) {
        const double d = G.row(k).dot(out);
        const double nn = G.row(k).squaredNorm();
        if (d < 0 && nn > 0) out -= (d / nn) * G.row(k).transpose();
    }
    res.g = out;
    return res;
}

TaskExemplars select_exemplars(const MultiHeadNet& net, const TaskData& task, int head, std::size_t quota,
                               const ClassSelector& select) {
    TaskExemplars ex;
    ex.task = head;
    const int C = net.head_classes(head);
    const auto shares = split_evenly(quota, static_cast<std::size_t>(C));
    const Matrix feats = predict_features(net, task.train.x);
    for (int c = 0; c < C; ++c) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < task.train.y.size(); ++i) {
            if (task.train.y[i] == c) rows.push_back(i);
        }
        ClassExemplars ce;
        ce.label = c;
        const std::size_t m = std::min(shares[static_cast<std::size_t>(c)], rows.size());
        if (m > 0) {
            Matrix fc(static_cast<Eigen::Index>(rows.size()), feats.cols());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                fc.row(static_cast<Eigen::Index>(i)) = feats.row(static_cast<Eigen::Index>(rows[i]));
            }
            const auto picked = select(fc, m);
            ce.x.resize(static_cast<Eigen::Index>(picked.size()), task.train.x.cols());
            for (std::size_t i = 0; i < picked.size(); ++i) {
                const std::size_t src = rows[picked[i]];
                ce.x.row(static_cast<Eigen::Index>(i)) = task.train.x.row(static_cast<Eigen::Index>(src));
                ce.source_rows.push_back(src);
            }
        } else {
            ce.x.resize(0, task.train.x.cols());
        }
        ex.classes.push_back(std::move(ce));
    }
    return ex;
}

namespace {

ClassSelector random_selector(std::uint64_t seed, int head) {
    return [seed, head](const Matrix& f, std::size_t m) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(head), static_cast<std::uint64_t>(f.rows())}));
        return random_select(static_cast<std::size_t>(f.rows()), m, rng);
    };
}

void check_replay(const ReplayConfig& cfg) {
    require(cfg.total_tasks >= 1, "replay configuration needs the total task count");
}

}  // namespace

RehearsalPlugin::RehearsalPlugin(BufferPolicy policy, ReplayConfig cfg, double mix)
    : buffer_(cfg.capacity, policy, cfg.total_tasks), mix_(mix) {
    check_replay(cfg);
    rehearsal_count(1, mix);
}

std::size_t RehearsalPlugin::new_task_batch_size(std::size_t b) const {
    batch_ = b;
    return buffer_.empty() ? b : b - std::min(b - 1, rehearsal_count(b, mix_));
}

std::optional<Var> RehearsalPlugin::penalty(BatchContext& ctx) {
    if (buffer_.empty()) return std::nullopt;
    const std::size_t k = std::min(batch_ - 1, rehearsal_count(batch_, mix_));
    if (k == 0) return std::nullopt;
    const RehearsalBatch ex = draw_exemplars(buffer_, k, ctx.rng);
    const Var ce = routed_cross_entropy(ctx.tape, ctx.net, ex, {Mode::train, &ctx.rng, nullptr});
    // Weighted so the total equals the new-plus-exemplar batch mean up to a constant factor.
    return ad::scale(ce, static_cast<double>(k) / static_cast<double>(ctx.y.size()));
}

void RehearsalPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    const std::size_t q = buffer_.next_quota();
    buffer_.store(select_exemplars(net, task, head, q, random_selector(0x7265, head)));
}

void RehearsalPlugin::save_state(ByteWriter& w) const { buffer_.save(w); }
void RehearsalPlugin::load_state(ByteReader& r) { buffer_ = ReplayBuffer::load(r); }

IcarlPlugin::IcarlPlugin(ReplayConfig cfg, double kd_strength, double tau, double mix)
    : buffer_(cfg.capacity, BufferPolicy::full, cfg.total_tasks), tau_(tau), mix_(mix) {
    check_replay(cfg);
    rehearsal_count(1, mix);
    require(tau > 0, "distillation temperature must be positive");
    hyper_.add({"kd_strength", kd_strength, true});
}

void IcarlPlugin::on_task_start(MultiHeadNet& net, const TaskData&, int head) {
    if (head > 0) {
        previous_ = net;
    } else {
        previous_.reset();
    }
}

bool IcarlPlugin::replaying() const {
    return hyper_.get("kd_strength") != 0.0 && previous_.has_value() && !buffer_.empty();
}

std::size_t IcarlPlugin::new_task_batch_size(std::size_t b) const {
    batch_ = b;
    return replaying() ? b - std::min(b - 1, rehearsal_count(b, mix_)) : b;
}

std::optional<Var> IcarlPlugin::penalty(BatchContext& ctx) {
    const double kd = hyper_.get("kd_strength");
    if (kd == 0.0 || !previous_ || ctx.head == 0) return std::nullopt;
    Matrix x = ctx.x;
    if (replaying()) {
        const std::size_t k = std::min(batch_ - 1, rehearsal_count(batch_, mix_));
        if (k > 0) {
            const RehearsalBatch ex = draw_exemplars(buffer_, k, ctx.rng);
            x.conservativeResize(ctx.x.rows() + ex.x.rows(), Eigen::NoChange);
            x.bottomRows(ex.x.rows()) = ex.x;
        }
    }
    // Features of new samples and exemplars under the current trunk; old heads stay fixed.
    const ForwardResult fr = forward_pass(ctx.tape, ctx.net, x, ctx.head, {Mode::train, &ctx.rng, nullptr});
    Var total = ctx.tape.constant(Matrix::Zero(1, 1));
    for (int h = 0; h < ctx.head; ++h) {
        const Matrix& w = ctx.net.params().value(MultiHeadNet::head_weight(h));
        const Matrix& b = ctx.net.params().value(MultiHeadNet::head_bias(h));
        Var cur = ad::add_row(ad::matmul(fr.features, ctx.tape.constant(w)), ctx.tape.constant(b));
        total = ad::add(total, distill_loss(cur, predict_logits(*previous_, x, h), tau_));
    }
    return ad::scale(total, kd / static_cast<double>(ctx.head));
}

void IcarlPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    const std::size_t q = buffer_.next_quota();
    buffer_.store(select_exemplars(net, task, head, q, [](const Matrix& f, std::size_t m) {
        return herding_select(l2_normalize_rows(f), m);
    }));
}

std::vector<int> IcarlPlugin::predict(const MultiHeadNet& net, const Matrix& x, int head) const {
    const TaskExemplars* ex = buffer_.find(head);
    bool complete = ex != nullptr && static_cast<int>(ex->classes.size()) == net.head_classes(head);
    if (complete) {
        for (const auto& c : ex->classes) complete = complete && c.size() > 0;
    }
    // Without an exemplar for every class (task still training, or a tiny buffer) use the head.
    if (!complete) return MethodPlugin::predict(net, x, head);
    return nearest_mean_predict(net, x, *ex);
}

void IcarlPlugin::save_state(ByteWriter& w) const {
    buffer_.save(w);
    w.u8(previous_ ? 1 : 0);
    if (previous_) previous_->save(w);
}

void IcarlPlugin::load_state(ByteReader& r) {
    buffer_ = ReplayBuffer::load(r);
    if (r.u8()) {
        previous_ = MultiHeadNet::load(r);
    } else {
        previous_.reset();
    }
}

GemPlugin::GemPlugin(ReplayConfig cfg, double gamma, int epochs)
    : buffer_(cfg.capacity, BufferPolicy::partial, cfg.total_tasks), epochs_(epochs) {
    check_replay(cfg);
    require(epochs >= 1, "GEM needs at least one epoch");
    if (!(gamma >= 0)) throw ContractError("GEM margin must be non-negative");
    hyper_.add({"gamma", gamma, true});
}

void GemPlugin::transform_gradients(GradMap& grads, const MultiHeadNet& net, BatchContext&) {
    if (buffer_.tasks().empty()) return;
    const auto ids = net.trunk_ids();
    const Matrix G = gem_ref_grads(net, buffer_, ids);
    const Vector g = flatten(grads, ids, net.params());
    const GemProjection p = gem_project(g, G, hyper_.get("gamma"));
    if (!p.projected) return;
    ++projections_;
    if (p.fallback) ++fallbacks_;
    unflatten(p.g, ids, net.params(), grads);
}

void GemPlugin::on_task_end(MultiHeadNet& net, const TaskData& task, int head) {
    const std::size_t q = buffer_.next_quota();
    if (q == 0) return;
    buffer_.store(select_exemplars(net, task, head, q, random_selector(0x67656d, head)));
}

TrainSchedule GemPlugin::adjust_schedule(TrainSchedule s) const {
    s.max_epochs = epochs_;
    return s;
}

void GemPlugin::save_state(ByteWriter& w) const {
    buffer_.save(w);
    w.u64(projections_);
    w.u64(fallbacks_);
}

void GemPlugin::load_state(ByteReader& r) {
    buffer_ = ReplayBuffer::load(r);
    projections_ = r.u64();
    fallbacks_ = r.u64();
}

}  // namespace clf
