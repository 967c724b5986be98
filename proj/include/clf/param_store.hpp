#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clf/binary_io.hpp"
#include "clf/types.hpp"

namespace clf {

/// A parameter array plus its optional same-shape companions.
struct ParamEntry {
    Matrix value;
    std::optional<Matrix> velocity;
    std::optional<Matrix> importance;
    std::optional<Matrix> mask;
    bool weight_decay = true;  // false for entries excluded from L2 decay (e.g. attention embeddings)
};

using GradMap = std::map<std::string, Matrix>;
using MatrixMap = std::map<std::string, Matrix>;

/// Flat, name-ordered store of trainable arrays. Iteration order is the
/// lexicographic order of ids, which fixes every reduction order downstream.
class ParamStore {
public:
    void add(const std::string& id, Matrix value, bool weight_decay = true);
    bool contains(const std::string& id) const { return entries_.count(id) != 0; }
    void erase(const std::string& id) { entries_.erase(id); }

    const Matrix& value(const std::string& id) const { return at(id).value; }
    Matrix& value(const std::string& id) { return at(id).value; }

    ParamEntry& at(const std::string& id);
    const ParamEntry& at(const std::string& id) const;

    void set_velocity(const std::string& id, Matrix v);
    void set_importance(const std::string& id, Matrix v);
    void set_mask(const std::string& id, Matrix v);
    void clear_velocities();

    std::vector<std::string> ids() const;
    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;

    const std::map<std::string, ParamEntry>& entries() const { return entries_; }

    /// Value-only view (companions dropped).
    MatrixMap values() const;
    bool all_finite() const;

    void save(ByteWriter& w) const;
    static ParamStore load(ByteReader& r);

    friend bool operator==(const ParamStore& a, const ParamStore& b);

private:
    std::map<std::string, ParamEntry> entries_;
};

/// True when both maps have the same ids and bit-identical arrays.
bool bit_equal(const MatrixMap& a, const MatrixMap& b);
bool bit_equal(const Matrix& a, const Matrix& b);

/// Concatenate the arrays of `ids` (in the given order) into one vector.
Vector flatten(const MatrixMap& m, const std::vector<std::string>& ids, const ParamStore& shapes);
void unflatten(const Vector& v, const std::vector<std::string>& ids, const ParamStore& shapes, MatrixMap& out);

}  // namespace clf
