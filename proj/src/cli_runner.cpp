#include "clf/cli_runner.hpp"

#include <fstream>
#include <iomanip>
#include <regex>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "clf/param_iso.hpp"

namespace clf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Walks one JSON object; every key must be consumed or the object is rejected.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
    }

    bool has(const std::string& k) const { return j_.contains(k); }

    const json* get(const std::string& k) {
        seen_.insert(k);
        auto it = j_.find(k);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const std::string& k) const { return where_.empty() ? k : where_ + "." + k; }

    template <class T>
    void read(const std::string& k, T& out) {
        const json* v = get(k);
        if (!v) return;
        try {
            if constexpr (std::is_same_v<T, double>) {
                if (!v->is_number()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v->is_number_integer() && !v->is_number_unsigned()) throw ConfigError("");
                if constexpr (std::is_unsigned_v<T>) {
                    if (v->is_number_integer() && v->get<long long>() < 0) throw ConfigError("");
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v->is_string()) throw ConfigError("");
            }
            out = v->get<T>();
        } catch (const std::exception&) {
            throw ConfigError(path(k) + " has the wrong type");
        }
    }

    Section sub(const std::string& k) {
        const json* v = get(k);
        static const json empty = json::object();
        return Section(v ? *v : empty, path(k));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown key '" + path(k) + "'");
        }
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute()) return p;
    return (base / p).lexically_normal();
}

std::string to_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string model_name(const ExperimentConfig& cfg) {
    std::string s = "mlp";
    for (int h : cfg.hidden) s += "-" + std::to_string(h);
    return s;
}

}  // namespace

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
    ExperimentConfig c;
    Section root(j, "");
    root.read("schema_version", c.schema_version);
    if (!root.has("schema_version")) throw ConfigError("schema_version is required");
    if (c.schema_version != kConfigSchemaVersion) {
        throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                          std::to_string(kConfigSchemaVersion) + ")");
    }

    {
        if (!root.has("dataset")) throw ConfigError("dataset is required");
        Section d = root.sub("dataset");
        std::string path, format = "csv";
        d.read("path", path);
        if (path.empty()) throw ConfigError("dataset.path is required");
        c.dataset.path = resolve(base_dir, path);
        d.read("format", format);
        try {
            c.dataset.format = parse_dataset_format(format);
        } catch (const std::exception&) {
            throw ConfigError("dataset.format must be 'csv' or 'binary'");
        }
        d.read("group_size", c.dataset.group_size);
        if (c.dataset.group_size < 1) throw ConfigError("dataset.group_size must be at least 1");
        d.read("groups", c.dataset.groups);
        d.read("ordering", c.dataset.ordering);
        d.read("split_seed", c.dataset.split_seed);
        Section s = d.sub("split");
        s.read("train", c.dataset.split.train);
        s.read("val", c.dataset.split.val);
        s.read("test", c.dataset.split.test);
        s.finish();
        const auto& f = c.dataset.split;
        if (f.train <= 0 || f.val < 0 || f.test <= 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
            throw ConfigError("dataset.split must have train > 0, test > 0, val >= 0 and sum to 1");
        }
        d.finish();
    }
    {
        Section n = root.sub("net");
        n.read("hidden", c.hidden);
        n.read("keep_prob", c.keep_prob);
        n.read("weight_decay", c.weight_decay);
        n.read("init_seed", c.init_seed);
        n.finish();
        if (c.hidden.empty()) throw ConfigError("net.hidden needs at least one layer");
        for (int h : c.hidden) {
            if (h < 1) throw ConfigError("net.hidden widths must be positive");
        }
        if (!(c.keep_prob > 0 && c.keep_prob <= 1)) throw ConfigError("net.keep_prob must lie in (0,1]");
        if (!(c.weight_decay >= 0)) throw ConfigError("net.weight_decay must be non-negative");
    }
    {
        Section s = root.sub("schedule");
        s.read("max_epochs", c.sched.max_epochs);
        s.read("anneal_patience", c.sched.anneal_patience);
        s.read("stop_patience", c.sched.stop_patience);
        s.read("anneal_factor", c.sched.anneal_factor);
        s.read("batch_size", c.sched.batch_size);
        s.read("momentum", c.sched.momentum);
        s.finish();
        try {
            c.sched.validate();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("schedule: ") + e.what());
        }
    }
    {
        if (!root.has("method")) throw ConfigError("method is required");
        Section m = root.sub("method");
        m.read("id", c.method);
        if (const json* h = m.get("hyper")) {
            if (!h->is_object()) throw ConfigError("method.hyper must be an object");
            for (const auto& [k, v] : h->items()) {
                if (!v.is_number()) throw ConfigError("method.hyper." + k + " must be a number");
                c.hyper[k] = v.get<double>();
            }
        }
        m.finish();
        if (c.method != "joint" && !is_known_method(c.method)) throw ConfigError("method.id '" + c.method + "' is unknown");
        if (c.method == "joint" && !c.hyper.empty()) throw ConfigError("joint takes no hyperparameters");
    }
    {
        Section f = root.sub("framework");
        f.read("lr_grid", c.framework.lr_grid);
        f.read("first_task_extra", c.framework.first_task_extra);
        f.read("p", c.framework.p);
        f.read("alpha", c.framework.alpha);
        f.finish();
        c.framework.validate();
    }
    {
        Section r = root.sub("replay");
        r.read("capacity", c.replay_capacity);
        r.finish();
    }
    root.read("seed", c.seed);
    std::string out;
    root.read("output_dir", out);
    if (out.empty()) throw ConfigError("output_dir is required");
    c.output_dir = resolve(base_dir, out);
    root.finish();

    if (c.method != "joint") {
        MethodSpec probe = method_spec(c, 1);
        make_method(probe);  // surfaces bad hyper names and missing replay capacity
    }
    return c;
}

ExperimentConfig load_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_config(j, fs::absolute(file).parent_path());
}

json config_echo(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["dataset"] = {{"path", c.dataset.path.string()},
                    {"format", c.dataset.format == DatasetFormat::csv ? "csv" : "binary"},
                    {"group_size", c.dataset.group_size},
                    {"groups", c.dataset.groups},
                    {"ordering", c.dataset.ordering},
                    {"split_seed", c.dataset.split_seed},
                    {"split", {{"train", c.dataset.split.train}, {"val", c.dataset.split.val}, {"test", c.dataset.split.test}}}};
    j["net"] = {{"hidden", c.hidden}, {"keep_prob", c.keep_prob}, {"weight_decay", c.weight_decay}, {"init_seed", c.init_seed}};
    j["schedule"] = {{"max_epochs", c.sched.max_epochs},     {"anneal_patience", c.sched.anneal_patience},
                     {"stop_patience", c.sched.stop_patience}, {"anneal_factor", c.sched.anneal_factor},
                     {"batch_size", c.sched.batch_size},       {"momentum", c.sched.momentum}};
    // Resolved initial hyperparameters, defaults included.
    json hyper = json::object();
    if (c.method != "joint") {
        const auto m = make_method(method_spec(c, 1));
        for (const auto& h : m->hyper().items()) hyper[h.name] = h.value;
    }
    j["method"] = {{"id", c.method}, {"hyper", hyper}};
    j["framework"] = {{"lr_grid", c.framework.lr_grid},
                      {"first_task_extra", c.framework.first_task_extra},
                      {"p", c.framework.p},
                      {"alpha", c.framework.alpha}};
    j["replay"] = {{"capacity", c.replay_capacity}};
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir.string();
    return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
    json j = config_echo(cfg);
    j.erase("output_dir");
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return to_hex(h);
}

TaskStream build_stream(const ExperimentConfig& cfg) {
    if (!fs::exists(cfg.dataset.path)) throw ConfigError("dataset.path does not exist: " + cfg.dataset.path.string());
    const LabeledDataset ds = load_dataset(cfg.dataset.path, cfg.dataset.format);
    const auto groups = cfg.dataset.groups.empty() ? consecutive_groups(ds, cfg.dataset.group_size) : cfg.dataset.groups;
    TaskStream s;
    try {
        s = make_task_stream(ds, groups, cfg.dataset.split, cfg.dataset.split_seed);
        if (!cfg.dataset.ordering.empty()) s = apply_ordering(s, cfg.dataset.ordering);
    } catch (const ContractError& e) {
        throw ConfigError(std::string("dataset: ") + e.what());
    }
    return s;
}

RunSettings run_settings(const ExperimentConfig& cfg, const TaskStream& stream, std::size_t workers) {
    if (stream.size() == 0) throw ConfigError("dataset produced no tasks");
    RunSettings r;
    r.net.widths = {static_cast<int>(stream.tasks.front().train.x.cols())};
    r.net.widths.insert(r.net.widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    r.net.keep_prob = cfg.keep_prob;
    r.net.weight_decay = cfg.weight_decay;
    r.net.init_seed = cfg.init_seed;
    r.sched = cfg.sched;
    r.framework = cfg.framework;
    r.seed = cfg.seed;
    r.workers = std::max<std::size_t>(1, workers);
    return r;
}

MethodSpec method_spec(const ExperimentConfig& cfg, std::size_t total_tasks) {
    MethodSpec m;
    m.id = cfg.method;
    m.hyper = cfg.hyper;
    m.buffer_capacity = cfg.replay_capacity;
    m.total_tasks = total_tasks;
    return m;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    ByteWriter w;
    w.magic("CLCK");
    w.u32(1);
    w.str(c.hash);
    w.u64(c.tasks_done);
    w.u8(c.joint ? 1 : 0);
    w.u64(c.payload.size());
    for (auto b : c.payload) w.u8(b);
    return w.buffer();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    Checkpoint c;
    r.expect_magic("CLCK");
    const auto version = r.u32();
    if (version != 1) throw RuntimeError("unsupported checkpoint version " + std::to_string(version));
    c.hash = r.str();
    c.tasks_done = r.u64();
    c.joint = r.u8() != 0;
    c.payload.resize(r.u64());
    for (auto& b : c.payload) b = r.u8();
    if (!r.at_end()) throw RuntimeError("trailing bytes in checkpoint");
    return c;
}

void write_checkpoint(const fs::path& p, const Checkpoint& c) {
    const auto bytes = encode_checkpoint(c);
    write_text_file(p, std::string(bytes.begin(), bytes.end()));
}

Checkpoint read_checkpoint(const fs::path& p) {
    const std::string s = read_text_file(p);
    return decode_checkpoint(std::vector<std::uint8_t>(s.begin(), s.end()));
}

fs::path checkpoint_path(const fs::path& out_dir, std::size_t task) {
    std::ostringstream os;
    os << "task_" << std::setw(3) << std::setfill('0') << task << ".clck";
    return out_dir / "checkpoints" / os.str();
}

std::optional<fs::path> latest_checkpoint(const fs::path& out_dir) {
    const fs::path dir = out_dir / "checkpoints";
    if (!fs::exists(dir)) return std::nullopt;
    static const std::regex pat(R"(task_(\d+)\.clck)");
    std::optional<fs::path> best;
    long best_n = -1;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string name = e.path().filename().string();
        if (std::regex_match(name, m, pat) && std::stol(m[1]) > best_n) {
            best_n = std::stol(m[1]);
            best = e.path();
        }
    }
    return best;
}

// ---------------------------------------------------------------------------

LedgerInput ledger_input(const ExperimentConfig& cfg, const TaskStream& stream) {
    const RunSettings rs = run_settings(cfg, stream, 1);
    MultiHeadNet net = build_network(rs.net, rs.net.init_seed);
    for (std::size_t t = 0; t < stream.size(); ++t) net.add_head(stream.tasks[t].num_classes(), 0);
    double params = 0, trunk = 0;
    for (const auto& [id, v] : net.params().values()) {
        params += static_cast<double>(v.size());
        if (!MultiHeadNet::is_head_id(id)) trunk += static_cast<double>(v.size());
    }
    const double d = rs.net.widths.front();
    const double f = rs.net.widths.back();
    const double code = 8;  // default autoencoder code size
    double units = 0;
    for (std::size_t l = 1; l < rs.net.widths.size(); ++l) units += rs.net.widths[l];
    LedgerInput in;
    in.T = static_cast<double>(stream.size());
    in.M = 8 * params;
    in.R = 8 * d * static_cast<double>(cfg.replay_capacity);
    in.A = 8 * (f * code + code + code * f + f);
    in.U = 8 * units;
    in.M_bit = std::ceil(trunk / 8);
    return in;
}

namespace {

struct Artifacts {
    AccuracyMatrix matrix;
    std::vector<AttemptRow> attempts;
    std::vector<CapacityReport> capacity;
    std::size_t done = 0;
};

RunSummary write_artifacts(const ExperimentConfig& cfg, const TaskStream& stream, const Artifacts& a) {
    const fs::path& out = cfg.output_dir;
    RunSummary s;
    s.matrix = a.matrix;
    s.tasks_done = a.done;
    write_text_file(out / "results.csv", results_csv(a.matrix));
    write_text_file(out / "attempts.csv", attempts_csv(a.attempts));
    if (a.done > 0) {
        s.avg_acc = avg_accuracy(a.matrix, a.done);
        s.avg_forgetting = avg_forgetting(a.matrix, a.done);
        const std::string label = cfg.method == "joint" ? "joint*" : cfg.method;
        write_text_file(out / "summary.csv", summary_csv({{label, model_name(cfg), s.avg_acc, s.avg_forgetting}}));
    }
    if (has_ledger_formula(cfg.method)) {
        LedgerInput in = ledger_input(cfg, stream);
        in.T = static_cast<double>(std::max<std::size_t>(a.done, 1));
        write_text_file(out / "ledger.csv", ledger_csv(cfg.method, in));
    }
    if (!a.capacity.empty()) write_text_file(out / "capacity.csv", capacity_csv(capacity_series(a.capacity)));
    return s;
}

Artifacts artifacts_of(const SequenceRunner& r) {
    Artifacts a{r.matrix(), r.attempts(), {}, r.next_task()};
    for (const auto& rec : r.records()) {
        if (rec.capacity) a.capacity.push_back(*rec.capacity);
    }
    return a;
}

std::vector<std::uint8_t> encode_joint(const JointRun& j) {
    ByteWriter w;
    j.matrix.save(w);
    w.u64(j.attempts.size());
    for (const auto& a : j.attempts) {
        w.str(a.phase);
        w.str(a.setting);
        w.f64(a.val_acc);
        w.str(a.decision);
    }
    return w.buffer();
}

Artifacts decode_joint(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    Artifacts a;
    a.matrix = AccuracyMatrix::load(r);
    a.attempts.resize(r.u64());
    for (auto& x : a.attempts) {
        x.phase = r.str();
        x.setting = r.str();
        x.val_acc = r.f64();
        x.decision = r.str();
    }
    a.done = a.matrix.tasks();
    return a;
}

void write_config_echo(const ExperimentConfig& cfg) {
    json j = config_echo(cfg);
    j["config_hash"] = config_hash(cfg);
    write_text_file(cfg.output_dir / "config.json", j.dump(2) + "\n");
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& cfg, std::size_t workers, const std::optional<fs::path>& resume,
                          std::optional<std::size_t> stop_after) {
    const std::string hash = config_hash(cfg);
    const TaskStream stream = build_stream(cfg);
    const RunSettings settings = run_settings(cfg, stream, workers);
    fs::create_directories(cfg.output_dir);

    std::optional<Checkpoint> from;
    if (resume) {
        from = read_checkpoint(*resume);
        if (from->hash != hash) {
            throw ConfigError("checkpoint was written for config " + from->hash + ", this config hashes to " + hash);
        }
    }
    write_config_echo(cfg);

    if (cfg.method == "joint") {
        if (from && from->joint) return write_artifacts(cfg, stream, decode_joint(from->payload));
        spdlog::info("joint training over {} tasks", stream.size());
        const JointRun j = run_joint(stream, settings);
        write_checkpoint(checkpoint_path(cfg.output_dir, stream.size()), {hash, stream.size(), true, encode_joint(j)});
        return write_artifacts(cfg, stream, {j.matrix, j.attempts, {}, stream.size()});
    }

    SequenceRunner runner(settings, make_method(method_spec(cfg, stream.size())), stream.size());
    if (from) {
        if (from->joint) throw ConfigError("checkpoint holds a joint run");
        ByteReader r(from->payload);
        runner.load(r);
        spdlog::info("resuming after task {} of {}", runner.next_task(), stream.size());
    }
    StreamSource source(stream);
    std::size_t trained = 0;
    while (!runner.done() && (!stop_after || trained < *stop_after)) {
        runner.step(source);
        ++trained;
        const std::size_t t = runner.next_task();
        ByteWriter w;
        runner.save(w);
        write_checkpoint(checkpoint_path(cfg.output_dir, t), {hash, t, false, w.buffer()});
        write_artifacts(cfg, stream, artifacts_of(runner));
        spdlog::info("task {}/{}: lr {} acc {:.4f}", t, stream.size(), runner.records().back().search.lr,
                     runner.matrix().at(t - 1, t - 1));
    }
    return write_artifacts(cfg, stream, artifacts_of(runner));
}

RunSummary regenerate_reports(const fs::path& out_dir) {
    const fs::path echo = out_dir / "config.json";
    if (!fs::exists(echo)) throw ConfigError("no config.json in " + out_dir.string());
    json j = json::parse(read_text_file(echo));
    const std::string stored_hash = j.value("config_hash", "");
    j.erase("config_hash");
    j["output_dir"] = out_dir.string();
    const ExperimentConfig cfg = parse_config(j, out_dir);
    if (config_hash(cfg) != stored_hash) throw RuntimeError("config.json does not match its recorded hash");
    const auto ck = latest_checkpoint(out_dir);
    if (!ck) throw RuntimeError("no checkpoints in " + out_dir.string());
    const Checkpoint c = read_checkpoint(*ck);
    if (c.hash != stored_hash) throw RuntimeError("checkpoint does not belong to this run");
    const TaskStream stream = build_stream(cfg);
    if (c.joint) return write_artifacts(cfg, stream, decode_joint(c.payload));
    SequenceRunner runner(run_settings(cfg, stream, 1), make_method(method_spec(cfg, stream.size())), stream.size());
    ByteReader r(c.payload);
    runner.load(r);
    return write_artifacts(cfg, stream, artifacts_of(runner));
}

std::string ledger_report(const ExperimentConfig& cfg) {
    if (!has_ledger_formula(cfg.method)) throw ConfigError("method '" + cfg.method + "' has no storage formula");
    return ledger_csv(cfg.method, ledger_input(cfg, build_stream(cfg)));
}

std::string capacity_report_csv(const fs::path& out_dir) {
    regenerate_reports(out_dir);
    const fs::path p = out_dir / "capacity.csv";
    if (!fs::exists(p)) throw ConfigError("run in " + out_dir.string() + " has no capacity data (packnet or hat only)");
    return read_text_file(p);
}

}  // namespace clf
