#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clf/binary_io.hpp"
#include "clf/param_iso.hpp"

namespace clf {

/// acc[j][i]: accuracy on task i after training task j (0-based, i ≤ j).
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::size_t tasks);

    std::size_t tasks() const { return n_; }
    void set(std::size_t j, std::size_t i, double acc);
    double at(std::size_t j, std::size_t i) const;
    bool has(std::size_t j, std::size_t i) const;
    bool row_complete(std::size_t j) const;
    /// Number of leading complete rows.
    std::size_t rows_complete() const;

    void save(ByteWriter& w) const;
    static AccuracyMatrix load(ByteReader& r);
    friend bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b);

private:
    std::size_t index(std::size_t j, std::size_t i) const;

    std::size_t n_ = 0;
    std::vector<double> v_;
    std::vector<bool> set_;
};

/// Mean of row T−1 (T is the 1-based task count), as a fraction.
double avg_accuracy(const AccuracyMatrix& m, std::size_t T);
/// Mean of acc[i][i] − acc[T][i] over old tasks, in percentage points.
double avg_forgetting(const AccuracyMatrix& m, std::size_t T, bool include_last = false);

/// Two decimals, rounding half away from zero.
std::string format_fixed2(double value);
/// "xx.xx (yy.yy)": accuracy fraction shown in percent, forgetting already in percent.
std::string format_result(double acc_fraction, double forgetting_pct);

struct LedgerInput {
    double T = 0;      // tasks seen
    double M = 0;      // model parameter bytes
    double R = 0;      // replay buffer bytes
    double A = 0;      // autoencoder bytes
    double U = 0;      // embedding bytes
    double M_bit = 0;  // one bit per trunk parameter, in bytes
};

struct LedgerEntry {
    double bytes = 0;
    std::string formula;
};

const std::vector<std::string>& ledger_methods();
bool has_ledger_formula(const std::string& method);
LedgerEntry storage_ledger(const std::string& method, const LedgerInput& in);

/// used[layer][task]; columns are monotone by construction.
struct CapacitySeries {
    std::vector<std::string> layers;
    std::vector<std::vector<double>> used;
    bool saturated = false;  // some layer has under `threshold` free at the last task
};

CapacitySeries capacity_series(const std::vector<CapacityReport>& per_task, double saturation_threshold = 0.05);

struct SummaryRow {
    std::string method;
    std::string model;
    double avg_acc = 0;         // fraction
    double avg_forgetting = 0;  // percentage points
};

struct AttemptRow {
    std::size_t task = 0;
    std::string phase;       // "search" | "decay" | "joint"
    std::string setting;     // learning rate or hyperparameter snapshot
    double val_acc = 0;
    std::string decision;    // e.g. "best", "accept", "reject", "floor-accept"
};

std::string results_csv(const AccuracyMatrix& m);
AccuracyMatrix parse_results_csv(const std::string& text);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string capacity_csv(const CapacitySeries& s);
std::string ledger_csv(const std::string& method, const LedgerInput& in);
std::string attempts_csv(const std::vector<AttemptRow>& rows);

/// Exact decimal text for a double (shortest round-trip form).
std::string exact_double(double v);

void write_text_file(const std::filesystem::path& p, const std::string& text);
std::string read_text_file(const std::filesystem::path& p);

}  // namespace clf
