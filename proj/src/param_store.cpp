#include "clf/param_store.hpp"

#include <cstring>

namespace clf {

namespace {

void check_shape(const Matrix& a, const Matrix& b, const std::string& id, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractError(std::string(what) + " shape mismatch for parameter '" + id + "'");
    }
}

void write_optional(ByteWriter& w, const std::optional<Matrix>& m) {
    w.u8(m ? 1 : 0);
    if (m) w.matrix(*m);
}

std::optional<Matrix> read_optional(ByteReader& r) {
    if (r.u8() == 0) return std::nullopt;
    return r.matrix();
}

}  // namespace

void ParamStore::add(const std::string& id, Matrix value, bool weight_decay) {
    if (contains(id)) throw ContractError("duplicate parameter id '" + id + "'");
    ParamEntry e;
    e.value = std::move(value);
    e.weight_decay = weight_decay;
    entries_.emplace(id, std::move(e));
}

ParamEntry& ParamStore::at(const std::string& id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ContractError("unknown parameter id '" + id + "'");
    return it->second;
}

const ParamEntry& ParamStore::at(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw ContractError("unknown parameter id '" + id + "'");
    return it->second;
}

void ParamStore::set_velocity(const std::string& id, Matrix v) {
    auto& e = at(id);
    check_shape(e.value, v, id, "velocity");
    e.velocity = std::move(v);
}

void ParamStore::set_importance(const std::string& id, Matrix v) {
    auto& e = at(id);
    check_shape(e.value, v, id, "importance");
    e.importance = std::move(v);
}

void ParamStore::set_mask(const std::string& id, Matrix v) {
    auto& e = at(id);
    check_shape(e.value, v, id, "mask");
    e.mask = std::move(v);
}

void ParamStore::clear_velocities() {
    for (auto& [id, e] : entries_) e.velocity.reset();
}

std::vector<std::string> ParamStore::ids() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [id, e] : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
}

MatrixMap ParamStore::values() const {
    MatrixMap out;
    for (const auto& [id, e] : entries_) out.emplace(id, e.value);
    return out;
}

bool ParamStore::all_finite() const {
    for (const auto& [id, e] : entries_) {
        if (!e.value.allFinite()) return false;
    }
    return true;
}

void ParamStore::save(ByteWriter& w) const {
    w.u64(entries_.size());
    for (const auto& [id, e] : entries_) {
        w.str(id);
        w.u8(e.weight_decay ? 1 : 0);
        w.matrix(e.value);
        write_optional(w, e.velocity);
        write_optional(w, e.importance);
        write_optional(w, e.mask);
    }
}

ParamStore ParamStore::load(ByteReader& r) {
    ParamStore s;
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        auto id = r.str();
        ParamEntry e;
        e.weight_decay = r.u8() != 0;
        e.value = r.matrix();
        e.velocity = read_optional(r);
        e.importance = read_optional(r);
        e.mask = read_optional(r);
        s.entries_.emplace(std::move(id), std::move(e));
    }
    return s;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool bit_equal(const MatrixMap& a, const MatrixMap& b) {
    if (a.size() != b.size()) return false;
    auto ib = b.begin();
    for (const auto& [id, m] : a) {
        if (ib->first != id || !bit_equal(m, ib->second)) return false;
        ++ib;
    }
    return true;
}

namespace {
bool optional_equal(const std::optional<Matrix>& a, const std::optional<Matrix>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || bit_equal(*a, *b);
}
}  // namespace

bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    auto ib = b.entries_.begin();
    for (const auto& [id, e] : a.entries_) {
        const auto& f = ib->second;
        if (ib->first != id || e.weight_decay != f.weight_decay || !bit_equal(e.value, f.value) ||
            !optional_equal(e.velocity, f.velocity) || !optional_equal(e.importance, f.importance) ||
            !optional_equal(e.mask, f.mask)) {
            return false;
        }
        ++ib;
    }
    return true;
}

Vector flatten(const MatrixMap& m, const std::vector<std::string>& ids, const ParamStore& shapes) {
    Eigen::Index total = 0;
    for (const auto& id : ids) total += shapes.value(id).size();
    Vector out = Vector::Zero(total);
    Eigen::Index off = 0;
    for (const auto& id : ids) {
        const auto n = shapes.value(id).size();
        auto it = m.find(id);
        if (it != m.end()) {
            check_shape(shapes.value(id), it->second, id, "flatten");
            out.segment(off, n) = Eigen::Map<const Vector>(it->second.data(), n);
        }
        off += n;
    }
    return out;
}

void unflatten(const Vector& v, const std::vector<std::string>& ids, const ParamStore& shapes, MatrixMap& out) {
    Eigen::Index off = 0;
    for (const auto& id : ids) {
        const auto& ref = shapes.value(id);
        Matrix m(ref.rows(), ref.cols());
        Eigen::Map<Vector>(m.data(), m.size()) = v.segment(off, m.size());
        off += m.size();
        out[id] = std::move(m);
    }
    if (off != v.size()) throw ContractError("unflatten: vector length does not match parameter layout");
}

}  // namespace clf
