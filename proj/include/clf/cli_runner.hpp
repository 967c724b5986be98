#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clf/hyperframework.hpp"

namespace clf {

inline constexpr int kConfigSchemaVersion = 1;

struct DatasetConfig {
    std::filesystem::path path;  // resolved against the config file's directory
    DatasetFormat format = DatasetFormat::csv;
    int group_size = 2;                    // used when `groups` is empty
    std::vector<std::vector<int>> groups;  // explicit class groups, one per task
    SplitFractions split{0.6, 0.2, 0.2};
    std::uint64_t split_seed = 0;
    std::vector<int> ordering;  // optional permutation of the tasks
};

struct ExperimentConfig {
    int schema_version = kConfigSchemaVersion;
    DatasetConfig dataset;
    std::vector<int> hidden{64, 64};  // trunk widths after the input layer
    double keep_prob = 1.0;
    double weight_decay = 0.0;
    std::uint64_t init_seed = 0;
    TrainSchedule sched;
    std::string method = "finetune";  // plus "joint"
    std::map<std::string, double> hyper;
    FrameworkConfig framework;
    std::size_t replay_capacity = 0;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir;  // resolved against the config file's directory
};

/// Strict parse: unknown keys, wrong types and out-of-range values raise ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& file);
/// Every field with defaults filled in. Paths are echoed as given after resolution.
nlohmann::json config_echo(const ExperimentConfig& cfg);
/// FNV-1a over the canonical echo, excluding the output directory; 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

TaskStream build_stream(const ExperimentConfig& cfg);
RunSettings run_settings(const ExperimentConfig& cfg, const TaskStream& stream, std::size_t workers);
MethodSpec method_spec(const ExperimentConfig& cfg, std::size_t total_tasks);

/// Checkpoint: "CLCK" | u32 version | str config hash | u64 tasks done | u8 kind | payload.
/// kind 0 carries the sequence runner state, kind 1 a finished joint run.
struct Checkpoint {
    std::string hash;
    std::size_t tasks_done = 0;
    bool joint = false;
    std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::filesystem::path& p, const Checkpoint& c);
Checkpoint read_checkpoint(const std::filesystem::path& p);
std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::size_t task);
/// Highest-numbered checkpoint in `out_dir`, if any.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& out_dir);

LedgerInput ledger_input(const ExperimentConfig& cfg, const TaskStream& stream);

struct RunSummary {
    AccuracyMatrix matrix;
    double avg_acc = 0;
    double avg_forgetting = 0;
    std::size_t tasks_done = 0;
};

/// Runs (or continues from `resume`) and writes every artifact into cfg.output_dir.
/// `stop_after` limits the number of tasks trained in this call.
RunSummary run_experiment(const ExperimentConfig& cfg, std::size_t workers,
                          const std::optional<std::filesystem::path>& resume = std::nullopt,
                          std::optional<std::size_t> stop_after = std::nullopt);

/// Regenerates the CSV artifacts of `out_dir` from its config echo and latest checkpoint.
RunSummary regenerate_reports(const std::filesystem::path& out_dir);

std::string ledger_report(const ExperimentConfig& cfg);
std::string capacity_report_csv(const std::filesystem::path& out_dir);

}  // namespace clf
