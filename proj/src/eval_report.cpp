#include "clf/eval_report.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <cmath>
#include <fstream>
#include <sstream>

namespace clf {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : n_(tasks), v_(tasks * tasks, 0.0), set_(tasks * tasks, false) {}

std::size_t AccuracyMatrix::index(std::size_t j, std::size_t i) const {
    if (j >= n_ || i > j) throw ContractError("accuracy matrix index outside the lower triangle");
    return j * n_ + i;
}

void AccuracyMatrix::set(std::size_t j, std::size_t i, double acc) {
    if (!(acc >= 0.0 && acc <= 1.0)) throw ContractError("accuracy must lie in [0,1]");
    const auto k = index(j, i);
    v_[k] = acc;
    set_[k] = true;
}

double AccuracyMatrix::at(std::size_t j, std::size_t i) const {
    const auto k = index(j, i);
    if (!set_[k]) throw ContractError("accuracy matrix entry not filled");
    return v_[k];
}

bool AccuracyMatrix::has(std::size_t j, std::size_t i) const { return set_[index(j, i)]; }

bool AccuracyMatrix::row_complete(std::size_t j) const {
    if (j >= n_) return false;
    for (std::size_t i = 0; i <= j; ++i) {
        if (!set_[index(j, i)]) return false;
    }
    return true;
}

std::size_t AccuracyMatrix::rows_complete() const {
    std::size_t k = 0;
    while (k < n_ && row_complete(k)) ++k;
    return k;
}

void AccuracyMatrix::save(ByteWriter& w) const {
    w.magic("ACCM");
    w.u64(n_);
    for (std::size_t k = 0; k < v_.size(); ++k) {
        w.u8(set_[k] ? 1 : 0);
        w.f64(v_[k]);
    }
}

AccuracyMatrix AccuracyMatrix::load(ByteReader& r) {
    r.expect_magic("ACCM");
    AccuracyMatrix m(r.u64());
    for (std::size_t k = 0; k < m.v_.size(); ++k) {
        m.set_[k] = r.u8() != 0;
        m.v_[k] = r.f64();
    }
    return m;
}

bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b) {
    if (a.n_ != b.n_ || a.set_ != b.set_) return false;
    for (std::size_t k = 0; k < a.v_.size(); ++k) {
        if (std::memcmp(&a.v_[k], &b.v_[k], sizeof(double)) != 0) return false;
    }
    return true;
}

double avg_accuracy(const AccuracyMatrix& m, std::size_t T) {
    if (T == 0 || T > m.tasks()) throw ContractError("avg_accuracy: task count out of range");
    if (!m.row_complete(T - 1)) throw ContractError("avg_accuracy: row " + std::to_string(T) + " is incomplete");
    double s = 0;
    for (std::size_t i = 0; i < T; ++i) s += m.at(T - 1, i);
    return s / static_cast<double>(T);
}

double avg_forgetting(const AccuracyMatrix& m, std::size_t T, bool include_last) {
    if (T == 0 || T > m.tasks()) throw ContractError("avg_forgetting: task count out of range");
    if (!m.row_complete(T - 1)) throw ContractError("avg_forgetting: row " + std::to_string(T) + " is incomplete");
    const std::size_t count = include_last ? T : T - 1;
    if (count == 0) return 0.0;
    double s = 0;
    for (std::size_t i = 0; i < count; ++i) {
        if (!m.has(i, i)) throw ContractError("avg_forgetting: diagonal entry missing");
        s += m.at(i, i) - m.at(T - 1, i);
    }
    return 100.0 * s / static_cast<double>(count);
}

std::string format_fixed2(double value) {
    if (!std::isfinite(value)) throw ContractError("cannot format a non-finite value");
    // Snap to 1e-8 first so decimal halves written as x.xx5 are not lost to binary representation.
    const double scaled = std::round(value * 1e10) / 1e8;
    const double r = std::round(scaled);
    const long long cents = static_cast<long long>(r);
    const bool neg = cents < 0;
    const unsigned long long a = static_cast<unsigned long long>(neg ? -cents : cents);
    std::ostringstream os;
    os << (neg ? "-" : "") << a / 100 << '.' << (a % 100 < 10 ? "0" : "") << a % 100;
    return os.str();
}

std::string format_result(double acc_fraction, double forgetting_pct) {
    return format_fixed2(100.0 * acc_fraction) + " (" + format_fixed2(forgetting_pct) + ")";
}

const std::vector<std::string>& ledger_methods() {
    static const std::vector<std::string> m{"lwf",      "ebll",    "si",  "ewc",   "mas", "mean-imm",
                                            "mode-imm", "packnet", "hat", "icarl", "gem"};
    return m;
}

bool has_ledger_formula(const std::string& method) {
    const auto& m = ledger_methods();
    return std::find(m.begin(), m.end(), method) != m.end();
}

LedgerEntry storage_ledger(const std::string& method, const LedgerInput& in) {
    for (double v : {in.T, in.M, in.R, in.A, in.U, in.M_bit}) {
        if (!(v >= 0)) throw ContractError("ledger inputs must be non-negative");
    }
    if (method == "lwf") return {in.M, "M"};
    if (method == "ebll") return {in.M + in.T * in.A, "M + T · A"};
    if (method == "si") return {3 * in.M, "3 · M"};
    if (method == "ewc") return {2 * in.M, "2 · M"};
    if (method == "mas") return {2 * in.M, "2 · M"};
    if (method == "mean-imm") return {in.T * in.M, "T · M"};
    if (method == "mode-imm") return {2 * in.T * in.M, "2 · T · M"};
    if (method == "packnet") return {in.T * in.M_bit, "T · M[bit]"};
    if (method == "hat") return {in.T * in.U, "T · U"};
    if (method == "icarl") return {in.M + in.R, "M + R"};
    if (method == "gem") return {in.T * in.M + in.R, "T · M + R"};
    throw ContractError("no storage formula for method '" + method + "'");
}

CapacitySeries capacity_series(const std::vector<CapacityReport>& per_task, double saturation_threshold) {
    if (per_task.empty()) throw ContractError("capacity_series: no reports");
    CapacitySeries s;
    s.layers = per_task.front().layers;
    s.used.assign(s.layers.size(), {});
    for (std::size_t t = 0; t < per_task.size(); ++t) {
        const auto& rep = per_task[t];
        if (rep.layers != s.layers || rep.used.size() != s.layers.size()) {
            throw ContractError("capacity_series: inconsistent layer sets");
        }
        for (std::size_t l = 0; l < s.layers.size(); ++l) {
            if (t > 0 && rep.used[l] < s.used[l].back()) {
                throw ContractError("capacity_series: used fraction of " + s.layers[l] + " decreased at task " +
                                    std::to_string(t + 1));
            }
            s.used[l].push_back(rep.used[l]);
        }
    }
    for (const auto& col : s.used) {
        if (1.0 - col.back() < saturation_threshold) s.saturated = true;
    }
    return s;
}

std::string exact_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string results_csv(const AccuracyMatrix& m) {
    std::ostringstream os;
    os << "after_task";
    for (std::size_t i = 0; i < m.tasks(); ++i) os << ",task_" << i + 1;
    os << '\n';
    for (std::size_t j = 0; j < m.rows_complete(); ++j) {
        os << j + 1;
        for (std::size_t i = 0; i < m.tasks(); ++i) {
            os << ',';
            if (i <= j) os << exact_double(m.at(j, i));
        }
        os << '\n';
    }
    return os.str();
}

AccuracyMatrix parse_results_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ContractError("results csv: empty");
    const auto n = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    AccuracyMatrix m(n);
    std::size_t j = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string cell;
        std::getline(row, cell, ',');
        for (std::size_t i = 0; i < n && std::getline(row, cell, ','); ++i) {
            if (cell.empty()) continue;
            double v = 0;
            const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc()) throw ContractError("results csv: bad number '" + cell + "'");
            m.set(j, i, v);
        }
        ++j;
    }
    return m;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream os;
    os << "method,model,avg_acc,avg_forgetting,report\n";
    for (const auto& r : rows) {
        os << r.method << ',' << r.model << ',' << format_fixed2(100.0 * r.avg_acc) << ','
           << format_fixed2(r.avg_forgetting) << ",\"" << format_result(r.avg_acc, r.avg_forgetting) << "\"\n";
    }
    return os.str();
}

std::string capacity_csv(const CapacitySeries& s) {
    std::ostringstream os;
    os << "layer";
    const std::size_t T = s.used.empty() ? 0 : s.used.front().size();
    for (std::size_t t = 0; t < T; ++t) os << ",task_" << t + 1;
    os << '\n';
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
        os << s.layers[l];
        for (double u : s.used[l]) os << ',' << exact_double(u);
        os << '\n';
    }
    return os.str();
}

std::string ledger_csv(const std::string& method, const LedgerInput& in) {
    std::ostringstream os;
    os << "method,formula,bytes,T,M,R,A,U,M_bit\n";
    const LedgerEntry e = storage_ledger(method, in);
    os << method << ",\"" << e.formula << "\"," << exact_double(e.bytes) << ',' << exact_double(in.T) << ','
       << exact_double(in.M) << ',' << exact_double(in.R) << ',' << exact_double(in.A) << ',' << exact_double(in.U)
       << ',' << exact_double(in.M_bit) << '\n';
    return os.str();
}

std::string attempts_csv(const std::vector<AttemptRow>& rows) {
    std::ostringstream os;
    os << "task,phase,setting,val_acc,decision\n";
    for (const auto& r : rows) {
        os << r.task << ',' << r.phase << ",\"" << r.setting << "\"," << exact_double(r.val_acc) << ',' << r.decision
           << '\n';
    }
    return os.str();
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    const auto tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeError("cannot write " + tmp);
        out << text;
        if (!out) throw RuntimeError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, p);
}

std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw RuntimeError("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace clf
