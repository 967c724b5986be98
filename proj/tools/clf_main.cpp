#include <CLI11.hpp>

#include <iostream>

#include <spdlog/spdlog.h>

#include "clf/cli_runner.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

std::size_t resolve_workers(int flag) {
    if (flag > 0) return static_cast<std::size_t>(flag);
    return clf::workers_from_env();
}

void print_summary(const clf::RunSummary& s, const std::string& dir) {
    if (s.tasks_done == 0) {
        std::cout << "no tasks trained yet\n";
        return;
    }
    std::cout << "tasks: " << s.tasks_done << "\n"
              << "avg acc (forgetting): " << clf::format_result(s.avg_acc, s.avg_forgetting) << "\n"
              << "artifacts: " << dir << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual learning runner with per-task hyperparameter selection"};
    app.require_subcommand(1);
    bool quiet = false;
    int workers = 0;
    app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");
    app.add_option("-j,--workers", workers, "Parallel grid candidates (default: CLF_WORKERS or 1)")->check(CLI::PositiveNumber);

    std::string config, checkpoint, dir;
    std::size_t stop_after = 0;

    auto* run = app.add_subcommand("run", "Train a full task sequence from a config file");
    run->add_option("config", config, "Experiment config (JSON)")->required();
    run->add_option("--stop-after", stop_after, "Stop after this many tasks (resume later)");

    auto* resume = app.add_subcommand("resume", "Continue a run from a checkpoint");
    resume->add_option("checkpoint", checkpoint, "Checkpoint file (.clck)")->required();
    resume->add_option("config", config, "The config the run was started with")->required();

    auto* report = app.add_subcommand("report", "Regenerate CSV artifacts of a run directory");
    report->add_option("dir", dir, "Run output directory")->required();

    auto* ledger = app.add_subcommand("ledger", "Print the additional-storage ledger for a config");
    ledger->add_option("config", config, "Experiment config (JSON)")->required();

    auto* capacity = app.add_subcommand("capacity", "Print per-layer capacity usage of a packnet or hat run");
    capacity->add_option("dir", dir, "Run output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }
    spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        if (*run) {
            const auto cfg = clf::load_config(config);
            std::optional<std::size_t> limit;
            if (stop_after > 0) limit = stop_after;
            print_summary(clf::run_experiment(cfg, resolve_workers(workers), std::nullopt, limit), cfg.output_dir.string());
        } else if (*resume) {
            const auto cfg = clf::load_config(config);
            print_summary(clf::run_experiment(cfg, resolve_workers(workers), std::filesystem::path(checkpoint)),
                          cfg.output_dir.string());
        } else if (*report) {
            print_summary(clf::regenerate_reports(dir), dir);
        } else if (*ledger) {
            std::cout << clf::ledger_report(clf::load_config(config));
        } else if (*capacity) {
            std::cout << clf::capacity_report_csv(dir);
        }
    } catch (const clf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kOk;
}
