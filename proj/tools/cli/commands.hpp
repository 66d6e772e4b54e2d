// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cpt::cli {

/// Exit statuses shared by every subcommand.
enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNonFinite = 3 };

struct RunOptions {
    std::string config;  ///< INI config or run manifest (.json); built-in defaults when empty
    std::optional<std::uint64_t> seed;
    std::string out = "runs/latest";
    std::vector<std::string> presets;
    bool reverse = false;
    bool joint = false;  ///< run the joint upper bound instead of the stream
};

struct SweepOptions {
    std::string config;
    std::vector<std::string> presets;  ///< applied to every run
    std::vector<std::string> over;     ///< preset groups or single presets to sweep
    std::vector<std::uint64_t> seeds{0};
    std::string out = "runs/sweep";
    std::size_t workers = 0;  ///< 0: CPT_WORKERS or hardware concurrency
};

struct BudgetOptions {
    std::string table;  ///< bundled table when empty
    std::vector<std::int64_t> tasks{20, 50, 100, 200};
    double total = 1.8e9;
    std::int64_t batch = 512;
};

struct ScheduleOptions {
    std::string kind = "cosine";
    std::string variant;  ///< independent-<kind> when empty
    std::size_t tasks = 20;
    std::int64_t steps = 1000;
    double warmup = 0.1;
    double cooldown = 0.1;
    double eta_max = 1e-5;
    double eta_min = 0.0;
    bool continuous = false;
};

struct StreamOptions {
    std::string kind = "random";
    std::string inventory;   ///< CSV id,dataset,year,frequency[,difficulty]; toy world when empty
    std::string similarity;  ///< CSV similarity matrix for the similarity kind
    std::string config;      ///< world for the toy inventory
    std::size_t tasks = 20;
    std::uint64_t seed = 0;
    bool reverse = false;
    std::string out;  ///< stdout when empty
};

struct EvalOptions {
    std::string config;
    std::string checkpoint;  ///< theta0 when empty
    std::optional<std::uint64_t> seed;
};

int cmd_run(const RunOptions& o, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepOptions& o, std::ostream& out, std::ostream& err);
int cmd_budget(const BudgetOptions& o, std::ostream& out, std::ostream& err);
int cmd_schedule(const ScheduleOptions& o, std::ostream& out, std::ostream& err);
int cmd_stream(const StreamOptions& o, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err);

/// Entry point used by the executable; argv as given to main.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace cpt::cli
