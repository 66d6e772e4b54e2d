// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "config_io.hpp"
#include "cpt/budget.hpp"
#include "cpt/engine.hpp"
#include "cpt/schedules.hpp"
#include "cpt/scoring.hpp"
#include "cpt/streams.hpp"
#include "cpt/version.hpp"

namespace cpt::cli {

namespace fs = std::filesystem;

namespace {

engine::RunConfig base_config(const std::string& path) {
    return path.empty() ? engine::RunConfig{} : load_config(path);
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
    os << text;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return out;
}

std::vector<streams::Concept> read_inventory(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::vector<streams::Concept> out;
    std::size_t lineno = 0;
    for (std::string line; std::getline(in, line);) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto f = split_csv_line(line);
        if (f.size() >= 1 && f[0] == "id") continue;
        if (f.size() < 4 || f.size() > 5)
            throw ConfigError("inventory line " + std::to_string(lineno) + ": expected id,dataset,year,frequency[,difficulty]");
        streams::Concept c;
        c.id = f[0];
        c.dataset_id = f[1];
        try {
            c.year = std::stoi(f[2]);
            c.frequency = std::stod(f[3]);
            if (f.size() == 5 && !f[4].empty()) c.difficulty = std::stod(f[4]);
        } catch (const std::logic_error&) {
            throw ConfigError("inventory line " + std::to_string(lineno) + ": malformed number");
        }
        out.push_back(std::move(c));
    }
    return out;
}

Matrix read_matrix(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::vector<Vector> rows;
    for (std::string line; std::getline(in, line);) {
        if (line.empty() || line[0] == '#') continue;
        Vector row;
        for (const auto& cell : split_csv_line(line)) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::logic_error&) {
                throw ConfigError("similarity matrix: malformed number '" + cell + "'");
            }
        }
        rows.push_back(std::move(row));
    }
    Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != m.cols) throw ConfigError("similarity matrix: ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
}

std::size_t worker_count(std::size_t requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("CPT_WORKERS")) {
        try {
            const long n = std::stol(env);
            if (n > 0) return static_cast<std::size_t>(n);
        } catch (const std::logic_error&) {
        }
        throw ConfigError(std::string("CPT_WORKERS: expected a positive integer, got '") + env + "'");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

struct RunOutcome {
    engine::Trajectory trajectory;
    fs::path dir;
};

// Runs one configured stream and writes its artifacts into dir.
RunOutcome execute(const engine::RunConfig& cfg, const fs::path& dir, bool joint) {
    const auto world = engine::make_world(cfg);
    const auto plan = engine::make_plan(cfg, world);
    auto traj = joint ? engine::joint_upper_bound(cfg, world, plan) : engine::run_stream(cfg, world, plan);
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "trajectory.csv");
        if (!os) throw std::runtime_error("cannot write '" + (dir / "trajectory.csv").string() + "'");
        engine::write_trajectory_csv(os, traj);
    }
    write_file(dir / "stream.json", streams::to_manifest(plan));
    model::save_checkpoint(dir / "final.ckpt", model::to_records(traj.final_params));
    RunManifest m;
    m.config = cfg;
    m.seed = cfg.seed;
    m.tool_version = kVersion;
    m.trajectory_path = "trajectory.csv";
    m.stream_path = "stream.json";
    m.checkpoint_path = "final.ckpt";
    write_file(dir / "manifest.json", manifest_to_json(m));
    return {std::move(traj), dir};
}

template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const engine::NonFiniteLoss& e) {
        err << "error: non-finite loss: " << e.what() << "\n";
        return kNonFinite;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

void print_summary(std::ostream& out, const engine::Trajectory& traj) {
    const auto& first = traj.records.front();
    const auto& last = traj.records.back();
    out << std::fixed << std::setprecision(4) << "t=0 a_ka=" << first.a_ka << " a_zs=" << first.a_zs
        << " | t=" << last.t << " a_ka=" << last.a_ka << " a_zs=" << last.a_zs << " geo_mean=" << last.geo_mean
        << " steps/task=" << last.steps << "\n";
    out.unsetf(std::ios::floatfield);
}

}  // namespace

int cmd_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        auto cfg = base_config(o.config);
        for (const auto& p : o.presets) apply_preset(cfg, p);
        if (o.seed) cfg.seed = *o.seed;
        if (o.reverse) cfg.stream.reversed = true;
        try {
            cfg.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        const auto result = execute(cfg, o.out, o.joint);
        print_summary(out, result.trajectory);
        out << "wrote " << (result.dir / "trajectory.csv").string() << " and " << (result.dir / "manifest.json").string()
            << "\n";
        return int{kOk};
    });
}

int cmd_sweep(const SweepOptions& o, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        auto base = base_config(o.config);
        for (const auto& p : o.presets) apply_preset(base, p);
        // One axis per preset group; single presets of the same group share an axis.
        std::vector<std::pair<std::string, std::vector<std::string>>> axes;
        for (const auto& item : o.over) {
            const auto colon = item.find(':');
            const std::string group = item.substr(0, colon);
            auto it = std::find_if(axes.begin(), axes.end(), [&](const auto& a) { return a.first == group; });
            if (it == axes.end()) it = axes.insert(axes.end(), {group, {}});
            for (const auto& v : colon == std::string::npos ? presets_in(item) : std::vector<std::string>{item})
                if (std::find(it->second.begin(), it->second.end(), v) == it->second.end()) it->second.push_back(v);
        }
        // Cartesian product over the axes.
        std::vector<std::vector<std::string>> combos{{}};
        for (const auto& [group, values] : axes) {
            std::vector<std::vector<std::string>> next;
            for (const auto& c : combos)
                for (const auto& v : values) {
                    auto e = c;
                    e.push_back(v);
                    next.push_back(std::move(e));
                }
            combos = std::move(next);
        }
        struct Job {
            std::string label;
            engine::RunConfig cfg;
            fs::path dir;
            std::string status = "pending";
            std::optional<engine::TaskRecord> last;
        };
        std::vector<Job> jobs;
        for (const auto& combo : combos)
            for (const auto seed : o.seeds) {
                Job j;
                j.cfg = base;
                for (const auto& p : combo) apply_preset(j.cfg, p);
                j.cfg.seed = seed;
                j.cfg.validate();
                for (const auto& p : combo) j.label += (j.label.empty() ? "" : "+") + p;
                if (j.label.empty()) j.label = "base";
                std::string dirname = j.label + "_s" + std::to_string(seed);
                std::replace(dirname.begin(), dirname.end(), ':', '-');
                j.dir = fs::path(o.out) / dirname;
                jobs.push_back(std::move(j));
            }
        const std::size_t workers = std::min(worker_count(o.workers), std::max<std::size_t>(jobs.size(), 1));
        std::atomic<std::size_t> next{0};
        std::mutex log_mutex;
        auto work = [&] {
            for (std::size_t i = next++; i < jobs.size(); i = next++) {
                auto& job = jobs[i];
                try {
                    auto r = execute(job.cfg, job.dir, false);
                    job.last = r.trajectory.records.back();
                    job.status = "ok";
                } catch (const engine::NonFiniteLoss& e) {
                    job.status = "non-finite";
                    std::lock_guard lock(log_mutex);
                    err << job.label << " seed " << job.cfg.seed << ": " << e.what() << "\n";
                } catch (const std::exception& e) {
                    job.status = "failed";
                    std::lock_guard lock(log_mutex);
                    err << job.label << " seed " << job.cfg.seed << ": " << e.what() << "\n";
                }
            }
        };
        std::vector<std::thread> pool;
        for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
        work();
        for (auto& t : pool) t.join();

        fs::create_directories(o.out);
        std::ofstream index(fs::path(o.out) / "index.csv");
        index << "run,seed,dir,status,a_ka,a_zs,geo_mean\n" << std::setprecision(17);
        bool all_ok = true;
        for (const auto& j : jobs) {
            index << j.label << ',' << j.cfg.seed << ',' << j.dir.filename().string() << ',' << j.status;
            if (j.last) index << ',' << j.last->a_ka << ',' << j.last->a_zs << ',' << j.last->geo_mean;
            else index << ",,,";
            index << '\n';
            all_ok = all_ok && j.status == "ok";
        }
        out << jobs.size() << " runs on " << workers << " workers; index at "
            << (fs::path(o.out) / "index.csv").string() << "\n";
        return int{all_ok ? kOk : kFailure};
    });
}

int cmd_budget(const BudgetOptions& o, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto table = o.table.empty() ? budget::CostTable::bundled() : budget::CostTable::load(o.table);
        if (table.empty()) return int{kOk};
        if (o.tasks.empty()) throw ConfigError("--tasks: at least one value required");
        for (const auto t : o.tasks)
            if (t < 1) throw ConfigError("--tasks: values must be >= 1");
        out << "method,per_step_gflops,peak_memory_gb,memory_multiplier,maf_per_step";
        for (const auto t : o.tasks) out << ",steps_T" << t;
        out << ",total_steps_T" << o.tasks.back() << ",total_samples_T" << o.tasks.back() << "\n";
        for (const auto& row : table.rows()) {
            const double maf = budget::maf_per_step(row);
            out << row.method << ',' << std::setprecision(12) << row.per_step_gflops << ',' << row.peak_memory_gb << ','
                << std::fixed << std::setprecision(4) << budget::applied_multiplier(row) << ',' << maf;
            out.unsetf(std::ios::floatfield);
            for (const auto t : o.tasks) out << ',' << budget::steps_per_task(o.total, t, maf);
            const auto plan = budget::plan(row, o.total, o.tasks.back(), o.batch);
            out << ',' << plan.total_steps << ',' << plan.total_samples << "\n";
        }
        return int{kOk};
    });
}

int cmd_schedule(const ScheduleOptions& o, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const std::string variant_name = o.variant.empty() ? "independent-" + o.kind : o.variant;
        schedules::MetaVariant variant;
        try {
            variant = schedules::parse_variant(variant_name);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("--variant: ") + e.what());
        }
        if (o.tasks < 1) throw ConfigError("--tasks: must be >= 1");
        if (o.steps < 2) throw ConfigError("--steps: must be >= 2");
        schedules::ScheduleParams base;
        base.eta_min = o.eta_min;
        base.eta_max = o.eta_max;
        base.continuous_rsqrt = o.continuous;
        auto meta = schedules::MetaState::uniform(o.tasks, o.steps, o.warmup, o.cooldown, variant);
        {
            auto probe = schedules::task_params(meta, base);
            try {
                schedules::validate(probe);
            } catch (const std::domain_error& e) {
                throw ConfigError(e.what());
            }
        }
        out << "task,step,global_step,lr\n" << std::setprecision(17);
        std::int64_t global = 0;
        for (std::size_t t = 1; t <= o.tasks; ++t) {
            meta.task_index = t;
            for (std::int64_t n = 1; n <= o.steps; ++n)
                out << t << ',' << n << ',' << ++global << ',' << schedules::meta_lr(meta, n, base) << '\n';
        }
        return int{kOk};
    });
}

int cmd_stream(const StreamOptions& o, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        streams::OrderingKind kind;
        try {
            kind = streams::parse_ordering(o.kind);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("--kind: ") + e.what());
        }
        streams::OrderingInputs inputs;
        if (!o.inventory.empty()) {
            inputs.concepts = read_inventory(o.inventory);
            if (!o.similarity.empty()) inputs.similarity = read_matrix(o.similarity);
        } else {
            auto cfg = base_config(o.config);
            cfg.seed = o.seed;
            const auto world = engine::make_world(cfg);
            inputs = world.ordering_inputs();
            if (kind == streams::OrderingKind::loss)
                inputs.concepts = streams::scored_inventory(world, o.seed, cfg.stream.scoring_samples);
        }
        const auto plan = streams::make_plan(inputs, kind, o.reverse, o.tasks, o.seed);
        streams::check_plan(plan);
        const auto text = streams::to_manifest(plan);
        if (o.out.empty()) {
            out << text << "\n";
        } else {
            write_file(o.out, text);
            out << "wrote " << o.out << " (" << plan.num_tasks() << " tasks, " << plan.ordering.size()
                << " concepts)\n";
        }
        return int{kOk};
    });
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        auto cfg = base_config(o.config);
        if (o.seed) cfg.seed = *o.seed;
        const auto world = engine::make_world(cfg);
        const auto params =
            o.checkpoint.empty() ? world.theta0 : model::from_records(model::load_checkpoint(o.checkpoint));
        if (!params.same_shape(world.theta0)) throw ConfigError("checkpoint shape does not match the configured world");
        const auto acc = engine::evaluate(params, world);
        out << std::setprecision(6) << "a_ka=" << acc.a_ka << " a_zs=" << acc.a_zs
            << " geo_mean=" << std::sqrt(acc.a_ka * acc.a_zs) << "\n";
        return int{kOk};
    });
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"cptsim: desk-scale continual pretraining simulator"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    RunOptions run;
    auto* run_cmd = app.add_subcommand("run", "Run one continual-pretraining stream");
    run_cmd->add_option("--config", run.config, "INI config or run manifest (.json)");
    run_cmd->add_option("--seed", run.seed, "Override the run seed");
    run_cmd->add_option("--out", run.out, "Output directory")->capture_default_str();
    run_cmd->add_option("--preset", run.presets, "Preset group:value (repeatable)");
    run_cmd->add_flag("--reverse", run.reverse, "Reverse the stream ordering");
    run_cmd->add_flag("--joint", run.joint, "Train the joint upper bound instead");

    SweepOptions sweep;
    auto* sweep_cmd = app.add_subcommand("sweep", "Run a grid of presets x seeds in parallel");
    sweep_cmd->add_option("--config", sweep.config, "Base INI config");
    sweep_cmd->add_option("--preset", sweep.presets, "Preset applied to every run (repeatable)");
    sweep_cmd->add_option("--over", sweep.over, "Preset group or group:value to sweep (repeatable)");
    sweep_cmd->add_option("--seeds", sweep.seeds, "Seeds")->delimiter(',');
    sweep_cmd->add_option("--out", sweep.out, "Output directory")->capture_default_str();
    sweep_cmd->add_option("--workers", sweep.workers, "Worker threads (default: $CPT_WORKERS or all cores)");

    BudgetOptions bud;
    auto* budget_cmd = app.add_subcommand("budget", "Print memory-adjusted FLOPs and step counts");
    budget_cmd->add_option("--table", bud.table, "Cost table CSV (bundled when omitted)");
    budget_cmd->add_option("--tasks", bud.tasks, "Task counts")->delimiter(',');
    budget_cmd->add_option("--total", bud.total, "Total budget in GFLOPs")->capture_default_str();
    budget_cmd->add_option("--batch", bud.batch, "Batch size")->capture_default_str();

    ScheduleOptions sch;
    auto* schedule_cmd = app.add_subcommand("schedule", "Dump a (meta-)schedule as task,step,global_step,lr");
    schedule_cmd->add_option("--kind", sch.kind, "cosine or rsqrt")->capture_default_str();
    schedule_cmd->add_option("--variant", sch.variant, "Meta variant (default independent-<kind>)");
    schedule_cmd->add_option("--tasks", sch.tasks, "Number of tasks")->capture_default_str();
    schedule_cmd->add_option("--steps", sch.steps, "Steps per task")->capture_default_str();
    schedule_cmd->add_option("--warmup", sch.warmup, "Warmup fraction")->capture_default_str();
    schedule_cmd->add_option("--cooldown", sch.cooldown, "Cooldown fraction (rsqrt)")->capture_default_str();
    schedule_cmd->add_option("--eta-max", sch.eta_max, "Peak learning rate")->capture_default_str();
    schedule_cmd->add_option("--eta-min", sch.eta_min, "Final learning rate")->capture_default_str();
    schedule_cmd->add_flag("--continuous", sch.continuous, "Continuous rsqrt decay");

    StreamOptions st;
    auto* stream_cmd = app.add_subcommand("stream", "Build a stream manifest");
    stream_cmd->add_option("--kind", st.kind, "Ordering kind")->capture_default_str();
    stream_cmd->add_option("--inventory", st.inventory, "Inventory CSV id,dataset,year,frequency[,difficulty]");
    stream_cmd->add_option("--similarity", st.similarity, "Similarity matrix CSV (rows follow the inventory)");
    stream_cmd->add_option("--config", st.config, "Config whose toy world supplies the inventory");
    stream_cmd->add_option("--tasks", st.tasks, "Number of tasks")->capture_default_str();
    stream_cmd->add_option("--seed", st.seed, "Seed")->capture_default_str();
    stream_cmd->add_flag("--reverse", st.reverse, "Reverse the ordering");
    stream_cmd->add_option("--out", st.out, "Manifest path (stdout when omitted)");

    EvalOptions ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the configured world");
    eval_cmd->add_option("--config", ev.config, "INI config or run manifest");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint (theta0 when omitted)");
    eval_cmd->add_option("--seed", ev.seed, "Override the run seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }
    if (run_cmd->parsed()) return cmd_run(run, out, err);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep, out, err);
    if (budget_cmd->parsed()) return cmd_budget(bud, out, err);
    if (schedule_cmd->parsed()) return cmd_schedule(sch, out, err);
    if (stream_cmd->parsed()) return cmd_stream(st, out, err);
    if (eval_cmd->parsed()) return cmd_eval(ev, out, err);
    return kFailure;
}

}  // namespace cpt::cli
