#include "clf/taskstream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "clf/binary_io.hpp"

namespace clf {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_number(const std::string& tok, T& out) {
    const auto t = trim(tok);
    if (t.empty()) return false;
    const char* first = t.data();
    if (*first == '+') ++first;
    auto [p, ec] = std::from_chars(first, t.data() + t.size(), out);
    return ec == std::errc() && p == t.data() + t.size();
}

void fill_vocabulary(LabeledDataset& ds) {
    std::set<int> vocab(ds.labels.begin(), ds.labels.end());
    ds.classes.assign(vocab.begin(), vocab.end());
}

LabeledDataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw RuntimeError("cannot open dataset '" + path.string() + "'");
    std::vector<int> labels;
    std::vector<double> values;
    long dim = -1;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        std::vector<std::string> toks;
        while (std::getline(ss, tok, ',')) toks.push_back(tok);
        if (toks.size() < 2) {
            throw RuntimeError("malformed row at line " + std::to_string(lineno) + ": expected label and features");
        }
        int label = 0;
        if (!parse_number(toks[0], label) || label < 0) {
            throw RuntimeError("unknown class token '" + trim(toks[0]) + "' at line " + std::to_string(lineno));
        }
        if (dim < 0) dim = static_cast<long>(toks.size()) - 1;
        if (static_cast<long>(toks.size()) - 1 != dim) {
            throw RuntimeError("malformed row at line " + std::to_string(lineno) + ": expected " +
                               std::to_string(dim) + " features");
        }
        for (std::size_t j = 1; j < toks.size(); ++j) {
            double v = 0;
            if (!parse_number(toks[j], v) || !std::isfinite(v)) {
                throw RuntimeError("malformed row at line " + std::to_string(lineno) + ": bad feature '" +
                                   trim(toks[j]) + "'");
            }
            values.push_back(v);
        }
        labels.push_back(label);
    }
    if (labels.empty()) throw RuntimeError("dataset '" + path.string() + "' is empty");
    LabeledDataset ds;
    ds.labels = std::move(labels);
    ds.features = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(ds.labels.size()), dim);
    fill_vocabulary(ds);
    return ds;
}

LabeledDataset load_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeError("cannot open dataset '" + path.string() + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.empty()) throw RuntimeError("dataset '" + path.string() + "' is empty");
    ByteReader r(buf);
    r.expect_magic("CLDS");
    const auto version = r.u32();
    if (version != kDatasetVersion) throw RuntimeError("unsupported dataset version " + std::to_string(version));
    const auto n = r.u64();
    const auto d = r.u32();
    const auto nclass = r.u32();
    if (n == 0) throw RuntimeError("dataset '" + path.string() + "' is empty");
    LabeledDataset ds;
    ds.labels.resize(n);
    for (auto& l : ds.labels) l = static_cast<int>(r.u32());
    ds.features.resize(static_cast<Eigen::Index>(n), d);
    r.bytes(ds.features.data(), sizeof(double) * n * d);
    if (!r.at_end()) throw RuntimeError("trailing bytes in dataset '" + path.string() + "'");
    fill_vocabulary(ds);
    if (ds.classes.size() != nclass) throw RuntimeError("class count in header does not match labels");
    return ds;
}

}  // namespace

DatasetFormat parse_dataset_format(const std::string& s) {
    if (s == "csv") return DatasetFormat::csv;
    if (s == "binary" || s == "raw-binary") return DatasetFormat::binary;
    throw ContractError("unknown dataset format '" + s + "'");
}

LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
    return format == DatasetFormat::csv ? load_csv(path) : load_binary(path);
}

void save_dataset_binary(const LabeledDataset& ds, const std::filesystem::path& path) {
    ByteWriter w;
    w.magic("CLDS");
    w.u32(kDatasetVersion);
    w.u64(ds.labels.size());
    w.u32(static_cast<std::uint32_t>(ds.dim()));
    w.u32(static_cast<std::uint32_t>(ds.classes.size()));
    for (int l : ds.labels) w.u32(static_cast<std::uint32_t>(l));
    w.bytes(ds.features.data(), sizeof(double) * static_cast<std::size_t>(ds.features.size()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
}

void save_dataset_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
    out.precision(17);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.labels[i];
        for (Eigen::Index j = 0; j < ds.dim(); ++j) out << ',' << ds.features(static_cast<Eigen::Index>(i), j);
        out << '\n';
    }
}

LabeledDataset make_gaussian_clusters(int classes, int per_class, int dim, double spread, double noise,
                                      std::uint64_t seed) {
    require(classes >= 1 && per_class >= 1 && dim >= 1, "cluster generator needs positive sizes");
    Rng rng(seed);
    Matrix centers(classes, dim);
    for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = spread * rng.normal();
    LabeledDataset ds;
    ds.features.resize(static_cast<Eigen::Index>(classes) * per_class, dim);
    for (int c = 0; c < classes; ++c) {
        for (int k = 0; k < per_class; ++k) {
            const Eigen::Index row = static_cast<Eigen::Index>(c) * per_class + k;
            for (int j = 0; j < dim; ++j) ds.features(row, j) = centers(c, j) + noise * rng.normal();
            ds.labels.push_back(c);
        }
    }
    fill_vocabulary(ds);
    return ds;
}

LabeledDataset make_cluster_mixture(int classes, int modes, int per_mode, int dim, double spread, double noise,
                                    std::uint64_t seed) {
    require(classes >= 1 && modes >= 1 && per_mode >= 1 && dim >= 1, "mixture generator needs positive sizes");
    Rng rng(seed);
    LabeledDataset ds;
    ds.features.resize(static_cast<Eigen::Index>(classes) * modes * per_mode, dim);
    Eigen::Index row = 0;
    for (int c = 0; c < classes; ++c) {
        for (int m = 0; m < modes; ++m) {
            Eigen::RowVectorXd center(dim);
            for (int j = 0; j < dim; ++j) center(j) = spread * rng.normal();
            for (int k = 0; k < per_mode; ++k, ++row) {
                for (int j = 0; j < dim; ++j) ds.features(row, j) = center(j) + noise * rng.normal();
                ds.labels.push_back(c);
            }
        }
    }
    fill_vocabulary(ds);
    return ds;
}

ShiftSequence make_shift_sequence(int tasks, int final_classes, int per_class, double radius, std::uint64_t seed) {
    require(tasks >= 1 && final_classes >= 2 && per_class >= 1, "shift sequence needs positive sizes");
    Rng rng(seed);
    ShiftSequence out;
    auto& ds = out.data;
    const int classes = 2 * tasks + final_classes;
    ds.features = Matrix::Zero(static_cast<Eigen::Index>(classes) * per_class, 4);
    Eigen::Index row = 0;
    for (int t = 0; t < tasks; ++t) {
        out.groups.push_back({2 * t, 2 * t + 1});
        for (int c = 2 * t; c < 2 * t + 2; ++c) {
            const double cx = 2.0 * rng.normal(), cy = 2.0 * rng.normal();
            for (int k = 0; k < per_class; ++k, ++row) {
                ds.features(row, 0) = cx + 0.5 * rng.normal();
                ds.features(row, 1) = cy + 0.5 * rng.normal();
                ds.labels.push_back(c);
            }
        }
    }
    std::vector<int> last;
    for (int c = 0; c < final_classes; ++c) {
        const int label = 2 * tasks + c;
        last.push_back(label);
        const double a = 2.0 * std::numbers::pi * c / final_classes;
        for (int k = 0; k < per_class; ++k, ++row) {
            ds.features(row, 0) = rng.normal();
            ds.features(row, 1) = rng.normal();
            ds.features(row, 2) = radius * std::cos(a) + 0.4 * rng.normal();
            ds.features(row, 3) = radius * std::sin(a) + 0.4 * rng.normal();
            ds.labels.push_back(label);
        }
    }
    out.groups.push_back(std::move(last));
    fill_vocabulary(ds);
    return out;
}

LabeledDataset make_toy_dataset() { return make_cluster_mixture(10, 6, 60, 4, 1.0, 0.4, 2024); }

SplitData SplitData::subset(const std::vector<std::size_t>& idx) const {
    SplitData out;
    out.x.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
        out.y.push_back(y[idx[i]]);
        out.source_rows.push_back(source_rows[idx[i]]);
    }
    return out;
}

TaskStream make_task_stream(const LabeledDataset& ds, const std::vector<std::vector<int>>& groups,
                            const SplitFractions& split, std::uint64_t seed) {
    require(!groups.empty(), "at least one task group is required");
    require(split.train >= 0 && split.val >= 0 && split.test >= 0, "split fractions must be non-negative");
    require(std::abs(split.train + split.val + split.test - 1.0) <= 1e-9, "split fractions must sum to 1");
    std::map<int, std::vector<std::size_t>> rows_of;
    for (std::size_t i = 0; i < ds.size(); ++i) rows_of[ds.labels[i]].push_back(i);

    std::set<int> seen;
    TaskStream stream;
    for (std::size_t t = 0; t < groups.size(); ++t) {
        require(!groups[t].empty(), "task group " + std::to_string(t) + " is empty");
        TaskData task;
        task.id = static_cast<int>(t);
        task.classes = groups[t];
        std::vector<std::size_t> tr, va, te;
        std::vector<int> ytr, yva, yte;
        for (std::size_t k = 0; k < groups[t].size(); ++k) {
            const int cls = groups[t][k];
            require(seen.insert(cls).second, "class " + std::to_string(cls) + " appears in more than one task");
            auto it = rows_of.find(cls);
            require(it != rows_of.end(), "class " + std::to_string(cls) + " has no samples");
            std::vector<std::size_t> rows = it->second;
            const std::size_t n = rows.size();
            const bool all_three = split.train > 0 && split.val > 0 && split.test > 0;
            require(!all_three || n >= 3,
                    "class " + std::to_string(cls) + " has fewer than 3 samples for a three-way split");
            Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(cls)}));
            rng.shuffle(rows);
            auto count = [n](double f) { return static_cast<std::size_t>(std::llround(f * static_cast<double>(n))); };
            std::size_t n_tr = std::min(count(split.train), n);
            std::size_t n_te = std::min(count(split.test), n - n_tr);
            if (all_three) {
                n_tr = std::clamp<std::size_t>(n_tr, 1, n - 2);
                n_te = std::clamp<std::size_t>(n_te, 1, n - n_tr - 1);
            }
            const std::size_t n_va = n - n_tr - n_te;
            auto take = [&](std::size_t from, std::size_t cnt, std::vector<std::size_t>& dst, std::vector<int>& lab) {
                for (std::size_t i = from; i < from + cnt; ++i) {
                    dst.push_back(rows[i]);
                    lab.push_back(static_cast<int>(k));
                }
            };
            take(0, n_tr, tr, ytr);
            take(n_tr, n_va, va, yva);
            take(n_tr + n_va, n_te, te, yte);
        }
        auto build = [&](std::vector<std::size_t>& idx, std::vector<int>& lab) {
            std::vector<std::size_t> order(idx.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::sort(order.begin(), order.end(), [&](auto a, auto b) { return idx[a] < idx[b]; });
            SplitData s;
            s.x.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
            for (std::size_t i = 0; i < order.size(); ++i) {
                s.x.row(static_cast<Eigen::Index>(i)) = ds.features.row(static_cast<Eigen::Index>(idx[order[i]]));
                s.y.push_back(lab[order[i]]);
                s.source_rows.push_back(idx[order[i]]);
            }
            return s;
        };
        task.train = build(tr, ytr);
        task.val = build(va, yva);
        task.test = build(te, yte);
        stream.tasks.push_back(std::move(task));
        stream.order.push_back(static_cast<int>(t));
    }
    return stream;
}

std::vector<std::vector<int>> consecutive_groups(const LabeledDataset& ds, int group_size) {
    require(group_size >= 1, "group size must be positive");
    std::vector<std::vector<int>> groups;
    for (std::size_t i = 0; i < ds.classes.size(); i += static_cast<std::size_t>(group_size)) {
        std::vector<int> g;
        for (std::size_t k = i; k < std::min(ds.classes.size(), i + static_cast<std::size_t>(group_size)); ++k) {
            g.push_back(ds.classes[k]);
        }
        groups.push_back(std::move(g));
    }
    return groups;
}

TaskStream apply_ordering(const TaskStream& stream, const std::vector<int>& perm) {
    const std::size_t n = stream.size();
    require(perm.size() == n, "ordering length differs from task count");
    std::vector<bool> hit(n, false);
    for (int p : perm) {
        require(p >= 0 && static_cast<std::size_t>(p) < n && !hit[static_cast<std::size_t>(p)],
                "ordering is not a permutation of task indices");
        hit[static_cast<std::size_t>(p)] = true;
    }
    TaskStream out;
    for (int p : perm) {
        out.tasks.push_back(stream.tasks[static_cast<std::size_t>(p)]);
        out.order.push_back(stream.tasks[static_cast<std::size_t>(p)].id);
    }
    return out;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
    require(batch_size >= 1, "batch size must be at least 1");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, {0xba7c4ULL, epoch}));
    rng.shuffle(idx);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

}  // namespace clf
