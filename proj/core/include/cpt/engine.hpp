// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpt/budget.hpp"
#include "cpt/methods.hpp"
#include "cpt/mixture.hpp"
#include "cpt/model.hpp"
#include "cpt/schedules.hpp"
#include "cpt/streams.hpp"
#include "cpt/synthetic.hpp"

namespace cpt::engine {

struct BudgetConfig {
    double total_gflops = budget::kDefaultTotalGflops;
    /// Cost table file; the bundled ViT-B/16 table when empty.
    std::string cost_table;
    /// Cost-table row to charge; the method's own row when empty.
    std::string cost_row;
    /// Charge evaluation forward passes against the task budget.
    bool charge_eval = false;
};

struct ScheduleConfig {
    schedules::MetaVariant variant = schedules::MetaVariant::independent_cosine;
    double base_lr = 1e-5;
    double eta_min = 0.0;
    double warmup_fraction = 0.1;
    double cooldown_fraction = 0.1;
    bool continuous_rsqrt = false;
};

struct ModelConfig {
    double tau_init = 0.01;
    bool clamp_temperature = true;
    double min_temperature = 0.01;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 1.0;
    /// Learning-rate multiplier for the log-temperature alone.
    double temperature_lr_scale = 1.0;
};

struct StreamConfig {
    streams::OrderingKind ordering = streams::OrderingKind::random;
    bool reversed = false;
    std::size_t num_tasks = 20;
    /// Stream manifest to replay instead of building a plan.
    std::string manifest;
    /// Pairs scored per concept for the loss ordering.
    std::size_t scoring_samples = 50;
};

struct RunConfig {
    methods::MethodConfig method;
    mixture::MixtureRatios ratios;
    ScheduleConfig schedule;
    BudgetConfig budget;
    ModelConfig model;
    StreamConfig stream;
    synthetic::WorldConfig world;
    std::size_t batch_size = 512;
    std::uint64_t seed = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
};

struct TaskRecord {
    std::size_t t = 0;
    double a_ka = 0.0;
    double a_zs = 0.0;
    double geo_mean = 0.0;
    std::int64_t steps = 0;
    double mafs_spent = 0.0;  ///< cumulative
    std::int64_t samples_seen = 0;  ///< cumulative
    double lr_start = 0.0;
    double lr_peak = 0.0;
    double lr_end = 0.0;
    bool operator==(const TaskRecord&) const = default;
};

struct Trajectory {
    std::vector<TaskRecord> records;  ///< t = 0 baseline first
    model::ParamSet final_params;
    streams::StreamPlan plan;
    double budget_gflops = 0.0;
};

/// Raised when a training step produces a non-finite loss or gradient.
class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Observation points for tests and tooling.
struct RunHooks {
    std::function<void(std::size_t task, const mixture::Batch&)> on_batch;
    std::function<void(std::size_t task, const model::ParamSet&)> on_task_end;
};

struct Accuracy {
    double a_ka = 0.0;
    double a_zs = 0.0;
};

/// A_KA: mean per-concept accuracy over the adaptation eval set. A_ZS: accuracy over the
/// held-out eval set. Throws std::invalid_argument on an empty set.
Accuracy evaluate(const model::ParamSet& params, const std::map<streams::ConceptId, Vector>& adaptation_prototypes,
                  std::span<const mixture::Sample> adaptation_eval,
                  const std::map<streams::ConceptId, Vector>& heldout_prototypes,
                  std::span<const mixture::Sample> heldout_eval);
Accuracy evaluate(const model::ParamSet& params, const synthetic::World& world);

/// Seed of the synthetic world: the world's own seed if set, else the run seed.
std::uint64_t world_seed(const RunConfig& cfg);
synthetic::World make_world(const RunConfig& cfg);
/// Stream plan from the manifest if one is configured, else built from the world inventory.
streams::StreamPlan make_plan(const RunConfig& cfg, const synthetic::World& world);

/// GFLOPs charged per gradient step and the fixed per-task extras for a config.
struct StepCost {
    double maf_per_step = 0.0;
    double per_task_extra = 0.0;
};
StepCost step_cost(const RunConfig& cfg, const synthetic::World& world);

Trajectory run_stream(const RunConfig& cfg, const synthetic::World& world, const streams::StreamPlan& plan,
                      const RunHooks& hooks = {});
Trajectory run_stream(const RunConfig& cfg);

/// Full finetuning from theta0 on the union of all task pools for the whole T x F budget under
/// one cosine schedule. Returns the baseline and one final record.
Trajectory joint_upper_bound(const RunConfig& cfg, const synthetic::World& world, const streams::StreamPlan& plan);
Trajectory joint_upper_bound(const RunConfig& cfg);

/// Delimited export with header t,a_ka,a_zs,geo_mean,steps,mafs_spent,samples_seen,lr_start,lr_peak,lr_end.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);
std::vector<TaskRecord> read_trajectory_csv(std::istream& is);

std::string config_to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected with their path.
RunConfig config_from_json(const std::string& text);

}  // namespace cpt::engine
