// SPDX-License-Identifier: Apache-2.0
#include "cpt/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cpt/rng.hpp"
#include "cpt/scoring.hpp"

namespace cpt::engine {

namespace {

using nlohmann::json;

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw std::invalid_argument(field + ": " + what);
}

budget::CostTable load_table(const BudgetConfig& b) {
    return b.cost_table.empty() ? budget::CostTable::bundled() : budget::CostTable::load(b.cost_table);
}

std::string charged_row(const RunConfig& cfg) {
    return cfg.budget.cost_row.empty() ? cfg.method.cost_row() : cfg.budget.cost_row;
}

std::int64_t affordable_steps(double gflops, double extra, double maf) {
    if (gflops - extra <= 0.0) return 0;
    return budget::steps_per_task(gflops - extra, 1, maf);
}

struct SegmentStats {
    std::int64_t samples = 0;
    double lr_start = 0.0;
    double lr_peak = 0.0;
    double lr_end = 0.0;
};

model::OptimizerState make_optimizer(const ModelConfig& m, std::size_t n) {
    model::OptimizerState opt;
    opt.weight_decay = m.weight_decay;
    opt.beta1 = m.beta1;
    opt.beta2 = m.beta2;
    opt.epsilon = m.epsilon;
    opt.reset(n);
    return opt;
}

// One task's worth of optimisation on a fresh AdamW state.
SegmentStats train_segment(const RunConfig& cfg, const methods::MethodConfig& method, methods::MethodState& ms,
                           methods::TrainState& ts, const mixture::Pool& pretrain, const mixture::Pool& update,
                           const mixture::Buffer& buffer, const mixture::MixtureRatios& ratios, std::int64_t steps,
                           const std::function<double(std::int64_t)>& lr_at, Rng& rng, std::size_t task,
                           const RunHooks& hooks) {
    SegmentStats st;
    if (steps <= 0) return st;
    auto opt = make_optimizer(cfg.model, ts.size());
    const auto decay = methods::decay_mask(method.kind, ts);
    const bool track_si = method.kind == methods::MethodKind::si;
    Vector flat = methods::flatten(ts);
    const std::size_t tau_index = ts.params.size() - 1;
    for (std::int64_t s = 0; s < steps; ++s) {
        const double lr = lr_at(s);
        if (s == 0) st.lr_start = lr;
        st.lr_peak = std::max(st.lr_peak, lr);
        st.lr_end = lr;

        const auto batch = mixture::sample_batch(pretrain, update, buffer, ratios, cfg.batch_size, rng);
        if (hooks.on_batch) hooks.on_batch(task, batch);
        methods::Objective obj;
        try {
            obj = methods::compute_objective(method, ms, ts, batch.samples);
        } catch (const std::runtime_error& e) {
            throw NonFiniteLoss("task " + std::to_string(task) + " step " + std::to_string(s + 1) + " (lr " +
                                std::to_string(lr) + "): " + e.what());
        }
        Vector before;
        if (track_si) before = model::flatten(ts.params);
        try {
            model::optimizer_step(flat, obj.grad, opt, lr, cfg.model.clip_norm, decay);
        } catch (const std::exception& e) {
            throw NonFiniteLoss("task " + std::to_string(task) + " step " + std::to_string(s + 1) + ": " + e.what());
        }
        if (cfg.model.temperature_lr_scale != 1.0) {
            const double old_log_tau = ts.params.log_temperature;
            flat[tau_index] = old_log_tau + cfg.model.temperature_lr_scale * (flat[tau_index] - old_log_tau);
        }
        methods::unflatten(flat, ts);
        if (cfg.model.clamp_temperature) {
            model::clamp_temperature(ts.params, cfg.model.min_temperature, true);
            flat = methods::flatten(ts);
        }
        if (track_si) {
            const Vector after = model::flatten(ts.params);
            Vector delta(after.size());
            for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = after[k] - before[k];
            methods::si_accumulate(ms.si, obj.contrastive_grad, delta);
        }
        st.samples += static_cast<std::int64_t>(batch.samples.size());
    }
    return st;
}

TaskRecord make_record(std::size_t t, const Accuracy& acc) {
    TaskRecord r;
    r.t = t;
    r.a_ka = acc.a_ka;
    r.a_zs = acc.a_zs;
    r.geo_mean = std::sqrt(acc.a_ka * acc.a_zs);
    return r;
}

void check_world(const synthetic::World& world) {
    std::set<streams::ConceptId> adaptation;
    for (const auto& c : world.adaptation) adaptation.insert(c.meta.id);
    for (const auto& c : world.heldout)
        if (adaptation.contains(c.meta.id))
            throw std::invalid_argument("held-out concept '" + c.meta.id + "' is also an adaptation concept");
}

// ---- JSON config ----------------------------------------------------------------------

json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["batch_size"] = c.batch_size;
    j["method"] = {{"kind", std::string(methods::to_string(c.method.kind))},
                   {"rank", c.method.rank},
                   {"ewc_lambda", c.method.ewc_lambda},
                   {"fisher_batches", c.method.fisher_batches},
                   {"si_c", c.method.si_c},
                   {"si_zeta", c.method.si_zeta},
                   {"merge_w", c.method.merge_w},
                   {"vera_rank_scale_init", c.method.vera_rank_scale_init}};
    j["mixture"] = {{"lambda_p", c.ratios.lambda_p}, {"lambda_d", c.ratios.lambda_d}, {"lambda_b", c.ratios.lambda_b}};
    j["schedule"] = {{"variant", std::string(schedules::to_string(c.schedule.variant))},
                     {"base_lr", c.schedule.base_lr},
                     {"eta_min", c.schedule.eta_min},
                     {"warmup_fraction", c.schedule.warmup_fraction},
                     {"cooldown_fraction", c.schedule.cooldown_fraction},
                     {"continuous_rsqrt", c.schedule.continuous_rsqrt}};
    j["budget"] = {{"total_gflops", c.budget.total_gflops},
                   {"cost_table", c.budget.cost_table},
                   {"cost_row", c.budget.cost_row},
                   {"charge_eval", c.budget.charge_eval}};
    j["model"] = {{"tau_init", c.model.tau_init},
                  {"clamp_temperature", c.model.clamp_temperature},
                  {"min_temperature", c.model.min_temperature},
                  {"weight_decay", c.model.weight_decay},
                  {"beta1", c.model.beta1},
                  {"beta2", c.model.beta2},
                  {"epsilon", c.model.epsilon},
                  {"clip_norm", c.model.clip_norm},
                  {"temperature_lr_scale", c.model.temperature_lr_scale}};
    j["stream"] = {{"ordering", std::string(streams::to_string(c.stream.ordering))},
                   {"reversed", c.stream.reversed},
                   {"num_tasks", c.stream.num_tasks},
                   {"manifest", c.stream.manifest},
                   {"scoring_samples", c.stream.scoring_samples}};
    const auto& w = c.world;
    j["world"] = {{"d_in", w.d_in},
                  {"d_emb", w.d_emb},
                  {"adaptation_concepts", w.adaptation_concepts},
                  {"heldout_concepts", w.heldout_concepts},
                  {"train_samples_per_concept", w.train_samples_per_concept},
                  {"eval_samples_per_concept", w.eval_samples_per_concept},
                  {"noise", w.noise},
                  {"text_noise", w.text_noise},
                  {"min_visibility", w.min_visibility},
                  {"max_visibility", w.max_visibility},
                  {"heldout_leakage", w.heldout_leakage},
                  {"pretrained_weight_noise", w.pretrained_weight_noise},
                  {"num_datasets", w.num_datasets},
                  {"concept_spread", w.concept_spread},
                  {"first_year", w.first_year},
                  {"last_year", w.last_year},
                  {"pretrain_pool", w.pretrain_pool}};
    if (w.seed) j["world"]["seed"] = *w.seed;
    return j;
}

// Reads j[key] into out when present, reporting type errors with the field path.
template <class T>
void read(const json& j, const std::string& section, const std::string& key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw std::invalid_argument((section.empty() ? "" : section + ".") + key + ": wrong type");
    }
}

void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw std::invalid_argument(section + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
            throw std::invalid_argument((section.empty() ? "" : section + ".") + key + ": unknown field");
    }
}

RunConfig from_json(const json& j) {
    RunConfig c;
    reject_unknown(j, "", {"seed", "batch_size", "method", "mixture", "schedule", "budget", "model", "stream", "world"});
    read(j, "", "seed", c.seed);
    read(j, "", "batch_size", c.batch_size);
    if (j.contains("method")) {
        const auto& m = j["method"];
        reject_unknown(m, "method",
                       {"kind", "rank", "ewc_lambda", "fisher_batches", "si_c", "si_zeta", "merge_w",
                        "vera_rank_scale_init"});
        std::string kind(methods::to_string(c.method.kind));
        read(m, "method", "kind", kind);
        try {
            c.method.kind = methods::parse_method(kind);
        } catch (const std::exception& e) {
            throw std::invalid_argument(std::string("method.kind: ") + e.what());
        }
        read(m, "method", "rank", c.method.rank);
        read(m, "method", "ewc_lambda", c.method.ewc_lambda);
        read(m, "method", "fisher_batches", c.method.fisher_batches);
        read(m, "method", "si_c", c.method.si_c);
        read(m, "method", "si_zeta", c.method.si_zeta);
        read(m, "method", "merge_w", c.method.merge_w);
        read(m, "method", "vera_rank_scale_init", c.method.vera_rank_scale_init);
    }
    if (j.contains("mixture")) {
        const auto& m = j["mixture"];
        reject_unknown(m, "mixture", {"lambda_p", "lambda_d", "lambda_b"});
        read(m, "mixture", "lambda_p", c.ratios.lambda_p);
        read(m, "mixture", "lambda_d", c.ratios.lambda_d);
        read(m, "mixture", "lambda_b", c.ratios.lambda_b);
    }
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        reject_unknown(s, "schedule",
                       {"variant", "base_lr", "eta_min", "warmup_fraction", "cooldown_fraction", "continuous_rsqrt"});
        std::string variant(schedules::to_string(c.schedule.variant));
        read(s, "schedule", "variant", variant);
        try {
            c.schedule.variant = schedules::parse_variant(variant);
        } catch (const std::exception& e) {
            throw std::invalid_argument(std::string("schedule.variant: ") + e.what());
        }
        read(s, "schedule", "base_lr", c.schedule.base_lr);
        read(s, "schedule", "eta_min", c.schedule.eta_min);
        read(s, "schedule", "warmup_fraction", c.schedule.warmup_fraction);
        read(s, "schedule", "cooldown_fraction", c.schedule.cooldown_fraction);
        read(s, "schedule", "continuous_rsqrt", c.schedule.continuous_rsqrt);
    }
    if (j.contains("budget")) {
        const auto& b = j["budget"];
        reject_unknown(b, "budget", {"total_gflops", "cost_table", "cost_row", "charge_eval"});
        read(b, "budget", "total_gflops", c.budget.total_gflops);
        read(b, "budget", "cost_table", c.budget.cost_table);
        read(b, "budget", "cost_row", c.budget.cost_row);
        read(b, "budget", "charge_eval", c.budget.charge_eval);
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown(m, "model",
                       {"tau_init", "clamp_temperature", "min_temperature", "weight_decay", "beta1", "beta2", "epsilon",
                        "clip_norm", "temperature_lr_scale"});
        read(m, "model", "tau_init", c.model.tau_init);
        read(m, "model", "clamp_temperature", c.model.clamp_temperature);
        read(m, "model", "min_temperature", c.model.min_temperature);
        read(m, "model", "weight_decay", c.model.weight_decay);
        read(m, "model", "beta1", c.model.beta1);
        read(m, "model", "beta2", c.model.beta2);
        read(m, "model", "epsilon", c.model.epsilon);
        read(m, "model", "clip_norm", c.model.clip_norm);
        read(m, "model", "temperature_lr_scale", c.model.temperature_lr_scale);
    }
    if (j.contains("stream")) {
        const auto& s = j["stream"];
        reject_unknown(s, "stream", {"ordering", "reversed", "num_tasks", "manifest", "scoring_samples"});
        std::string ordering(streams::to_string(c.stream.ordering));
        read(s, "stream", "ordering", ordering);
        try {
            c.stream.ordering = streams::parse_ordering(ordering);
        } catch (const std::exception& e) {
            throw std::invalid_argument(std::string("stream.ordering: ") + e.what());
        }
        read(s, "stream", "reversed", c.stream.reversed);
        read(s, "stream", "num_tasks", c.stream.num_tasks);
        read(s, "stream", "manifest", c.stream.manifest);
        read(s, "stream", "scoring_samples", c.stream.scoring_samples);
    }
    if (j.contains("world")) {
        const auto& w = j["world"];
        reject_unknown(w, "world",
                       {"d_in", "d_emb", "adaptation_concepts", "heldout_concepts", "train_samples_per_concept",
                        "eval_samples_per_concept", "noise", "text_noise", "min_visibility", "max_visibility",
                        "heldout_leakage", "pretrained_weight_noise", "num_datasets", "concept_spread", "first_year", "last_year",
                        "pretrain_pool", "seed"});
        auto& o = c.world;
        read(w, "world", "d_in", o.d_in);
        read(w, "world", "d_emb", o.d_emb);
        read(w, "world", "adaptation_concepts", o.adaptation_concepts);
        read(w, "world", "heldout_concepts", o.heldout_concepts);
        read(w, "world", "train_samples_per_concept", o.train_samples_per_concept);
        read(w, "world", "eval_samples_per_concept", o.eval_samples_per_concept);
        read(w, "world", "noise", o.noise);
        read(w, "world", "text_noise", o.text_noise);
        read(w, "world", "min_visibility", o.min_visibility);
        read(w, "world", "max_visibility", o.max_visibility);
        read(w, "world", "heldout_leakage", o.heldout_leakage);
        read(w, "world", "pretrained_weight_noise", o.pretrained_weight_noise);
        read(w, "world", "num_datasets", o.num_datasets);
        read(w, "world", "concept_spread", o.concept_spread);
        read(w, "world", "first_year", o.first_year);
        read(w, "world", "last_year", o.last_year);
        read(w, "world", "pretrain_pool", o.pretrain_pool);
        if (w.contains("seed")) {
            std::uint64_t s = 0;
            read(w, "world", "seed", s);
            o.seed = s;
        }
    }
    return c;
}

}  // namespace

void RunConfig::validate() const {
    try {
        method.validate();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(e.what());
    }
    try {
        ratios.validate();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("mixture.lambda_p/lambda_d/lambda_b: ") + e.what());
    }
    require(batch_size >= 1, "batch_size", "must be >= 1");
    require(stream.num_tasks >= 1, "stream.num_tasks", "must be >= 1");
    require(stream.num_tasks <= world.adaptation_concepts, "stream.num_tasks",
            "exceeds world.adaptation_concepts");
    require(stream.scoring_samples >= 1, "stream.scoring_samples", "must be >= 1");
    require(stream.scoring_samples <= world.train_samples_per_concept, "stream.scoring_samples",
            "exceeds world.train_samples_per_concept");
    require(budget.total_gflops >= 0.0 && std::isfinite(budget.total_gflops), "budget.total_gflops",
            "must be finite and non-negative");
    require(schedule.base_lr > 0.0, "schedule.base_lr", "must be positive");
    require(schedule.eta_min >= 0.0 && schedule.eta_min < schedule.base_lr, "schedule.eta_min",
            "must lie in [0, base_lr)");
    require(schedule.warmup_fraction >= 0.0 && schedule.warmup_fraction < 1.0, "schedule.warmup_fraction",
            "must lie in [0, 1)");
    require(schedule.cooldown_fraction >= 0.0 && schedule.cooldown_fraction < 1.0, "schedule.cooldown_fraction",
            "must lie in [0, 1)");
    require(model.tau_init > 0.0, "model.tau_init", "must be positive");
    require(model.min_temperature > 0.0, "model.min_temperature", "must be positive");
    require(model.clip_norm > 0.0, "model.clip_norm", "must be positive");
    require(model.temperature_lr_scale >= 0.0, "model.temperature_lr_scale", "must be non-negative");
    require(model.weight_decay >= 0.0, "model.weight_decay", "must be non-negative");
    require(model.beta1 >= 0.0 && model.beta1 < 1.0, "model.beta1", "must lie in [0, 1)");
    require(model.beta2 >= 0.0 && model.beta2 < 1.0, "model.beta2", "must lie in [0, 1)");
    require(model.epsilon > 0.0, "model.epsilon", "must be positive");
    require(world.d_emb >= 1 && world.d_emb < world.d_in, "world.d_emb", "must satisfy 1 <= d_emb < d_in");
    require(world.adaptation_concepts >= 1, "world.adaptation_concepts", "must be >= 1");
    require(world.heldout_concepts >= 1, "world.heldout_concepts", "must be >= 1");
    require(world.train_samples_per_concept >= 1, "world.train_samples_per_concept", "must be >= 1");
    require(world.eval_samples_per_concept >= 1, "world.eval_samples_per_concept", "must be >= 1");
    require(world.min_visibility <= world.max_visibility, "world.min_visibility", "must not exceed max_visibility");
    require(world.concept_spread > 0.0 && world.concept_spread <= 1.0, "world.concept_spread", "must lie in (0, 1]");
    require(world.first_year <= world.last_year, "world.first_year", "must not exceed last_year");
    try {
        (void)synthetic::pretrain_pool_spec(world.pretrain_pool);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("world.pretrain_pool: ") + e.what());
    }
}

Accuracy evaluate(const model::ParamSet& params, const std::map<streams::ConceptId, Vector>& adaptation_prototypes,
                  std::span<const mixture::Sample> adaptation_eval,
                  const std::map<streams::ConceptId, Vector>& heldout_prototypes,
                  std::span<const mixture::Sample> heldout_eval) {
    if (adaptation_eval.empty()) throw std::invalid_argument("empty adaptation eval set");
    if (heldout_eval.empty()) throw std::invalid_argument("empty held-out eval set");
    Accuracy acc;
    const auto counts = model::zero_shot_counts(params, adaptation_prototypes, adaptation_eval);
    for (const auto& [id, c] : counts) acc.a_ka += static_cast<double>(c.first) / static_cast<double>(c.second);
    acc.a_ka /= static_cast<double>(counts.size());
    acc.a_zs = model::zero_shot_eval(params, heldout_prototypes, heldout_eval);
    return acc;
}

Accuracy evaluate(const model::ParamSet& params, const synthetic::World& world) {
    return evaluate(params, world.adaptation_prototypes, world.adaptation_eval, world.heldout_prototypes,
                    world.heldout_eval);
}

std::uint64_t world_seed(const RunConfig& cfg) { return cfg.world.seed.value_or(cfg.seed); }

synthetic::World make_world(const RunConfig& cfg) {
    return synthetic::generate_world(cfg.world, world_seed(cfg), cfg.model.tau_init);
}

streams::StreamPlan make_plan(const RunConfig& cfg, const synthetic::World& world) {
    if (!cfg.stream.manifest.empty()) {
        std::ifstream in(cfg.stream.manifest);
        if (!in) throw std::runtime_error("cannot read stream manifest '" + cfg.stream.manifest + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        auto plan = streams::from_manifest(ss.str());
        streams::check_plan(plan);
        return plan;
    }
    auto inputs = world.ordering_inputs();
    if (cfg.stream.ordering == streams::OrderingKind::loss)
        inputs.concepts = streams::scored_inventory(world, cfg.seed, cfg.stream.scoring_samples);
    return streams::make_plan(inputs, cfg.stream.ordering, cfg.stream.reversed, cfg.stream.num_tasks, cfg.seed);
}

StepCost step_cost(const RunConfig& cfg, const synthetic::World& world) {
    const auto table = load_table(cfg.budget);
    const std::string row = charged_row(cfg);
    StepCost c;
    c.maf_per_step = budget::maf_per_step(table.find(row));
    const bool fisher_charged = cfg.method.kind == methods::MethodKind::ewc && cfg.method.ewc_lambda != 0.0 &&
                                row != "ewc";
    if (fisher_charged || cfg.budget.charge_eval) {
        const auto& ref = table.find("full-ft");
        if (fisher_charged) c.per_task_extra += static_cast<double>(cfg.method.fisher_batches) * budget::maf_per_step(ref);
        if (cfg.budget.charge_eval) {
            // Forward passes only: a third of a training step per batch of eval samples.
            const double eval_samples = static_cast<double>(world.adaptation_eval.size() + world.heldout_eval.size());
            c.per_task_extra += eval_samples / static_cast<double>(cfg.batch_size) * ref.per_step_gflops / 3.0;
        }
    }
    if (methods::is_merge(cfg.method.kind)) c.per_task_extra += 3.0 * static_cast<double>(world.theta0.size()) * 1e-9;
    return c;
}

Trajectory run_stream(const RunConfig& cfg, const synthetic::World& world, const streams::StreamPlan& plan,
                      const RunHooks& hooks) {
    cfg.validate();
    check_world(world);
    streams::check_plan(plan);
    const std::size_t T = plan.num_tasks();
    if (T == 0) throw std::invalid_argument("stream plan has no tasks");

    const StepCost cost = step_cost(cfg, world);
    const double per_task_budget = cfg.budget.total_gflops / static_cast<double>(T);
    const std::int64_t steps = affordable_steps(per_task_budget, cost.per_task_extra, cost.maf_per_step);
    const double task_spend = steps > 0 || cost.per_task_extra <= per_task_budget
                                  ? static_cast<double>(steps) * cost.maf_per_step + cost.per_task_extra
                                  : 0.0;

    const auto& method = cfg.method;
    const auto kind = method.kind;
    auto batch_rng = make_rng(cfg.seed, stream_id::batches);
    auto adapter_rng = make_rng(cfg.seed, stream_id::adapters);
    auto fisher_rng = make_rng(cfg.seed, stream_id::fisher);

    schedules::ScheduleParams base;
    base.eta_min = cfg.schedule.eta_min;
    base.eta_max = cfg.schedule.base_lr;
    base.continuous_rsqrt = cfg.schedule.continuous_rsqrt;

    methods::TrainState ts;
    ts.params = world.theta0;
    if (methods::is_low_rank(kind)) ts.adapters = methods::init_adapters(method, ts.params, adapter_rng);
    methods::MethodState ms;
    model::ParamSet current = world.theta0;
    mixture::Buffer buffer;

    Trajectory traj;
    traj.plan = plan;
    traj.budget_gflops = cfg.budget.total_gflops;
    traj.records.push_back(make_record(0, evaluate(current, world)));

    double spent = 0.0;
    std::int64_t seen = 0;
    for (std::size_t t = 1; t <= T; ++t) {
        const mixture::Pool update = world.task_pool(plan.tasks[t - 1]);
        if (kind == methods::MethodKind::merge_zs) ts.params = world.theta0;
        if (kind == methods::MethodKind::si) methods::si_begin_task(ms.si, model::flatten(ts.params));

        std::function<double(std::int64_t)> lr_at;
        if (steps == 1) {
            lr_at = [&](std::int64_t) { return base.eta_max; };
        } else if (steps > 1) {
            auto meta = schedules::MetaState::uniform(T, steps, cfg.schedule.warmup_fraction,
                                                      cfg.schedule.cooldown_fraction, cfg.schedule.variant);
            meta.task_index = t;
            lr_at = [meta = std::move(meta), &base](std::int64_t s) { return schedules::meta_lr(meta, s + 1, base); };
        }
        const auto st = train_segment(cfg, method, ms, ts, world.pretrain_pool, update, buffer, cfg.ratios, steps,
                                      lr_at, batch_rng, t, hooks);

        if (methods::is_low_rank(kind)) methods::absorb_adapters(method, ts, adapter_rng);
        if (kind == methods::MethodKind::si) methods::si_end_task(ms.si, model::flatten(ts.params), method.si_zeta);
        if (kind == methods::MethodKind::ewc && method.ewc_lambda != 0.0) {
            const auto fisher = methods::estimate_fisher(ts.params, update, method.fisher_batches, cfg.batch_size,
                                                         fisher_rng);
            methods::update_fisher(ms.ewc, fisher, model::flatten(ts.params));
        }
        if (methods::is_merge(kind)) {
            current = methods::merge_end_of_task(kind, world.theta0, current, ts.params, method.merge_w);
            if (kind != methods::MethodKind::merge_zs) ts.params = current;
        } else {
            current = ts.params;
        }
        buffer.add(update);

        spent += task_spend;
        seen += st.samples;
        TaskRecord r = make_record(t, evaluate(current, world));
        r.steps = steps;
        r.mafs_spent = spent;
        r.samples_seen = seen;
        r.lr_start = st.lr_start;
        r.lr_peak = st.lr_peak;
        r.lr_end = st.lr_end;
        traj.records.push_back(r);
        if (hooks.on_task_end) hooks.on_task_end(t, current);
    }
    traj.final_params = current;
    return traj;
}

Trajectory run_stream(const RunConfig& cfg) {
    cfg.validate();
    const auto world = make_world(cfg);
    return run_stream(cfg, world, make_plan(cfg, world));
}

Trajectory joint_upper_bound(const RunConfig& cfg, const synthetic::World& world, const streams::StreamPlan& plan) {
    cfg.validate();
    check_world(world);
    streams::check_plan(plan);
    RunConfig joint = cfg;
    joint.method = methods::MethodConfig{};
    joint.method.kind = methods::MethodKind::full_ft;
    joint.budget.cost_row = "full-ft";
    joint.ratios = mixture::MixtureRatios{0.0, 1.0, 0.0};

    const std::size_t T = plan.num_tasks();
    const StepCost cost = step_cost(joint, world);
    const std::int64_t steps =
        affordable_steps(cfg.budget.total_gflops, static_cast<double>(T) * cost.per_task_extra, cost.maf_per_step);

    mixture::Pool pool;
    for (const auto& task : plan.tasks) {
        auto part = world.task_pool(task);
        pool.insert(pool.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    auto rng = make_rng(cfg.seed, stream_id::joint);
    std::shuffle(pool.begin(), pool.end(), rng);

    schedules::ScheduleParams sched;
    sched.eta_min = cfg.schedule.eta_min;
    sched.eta_max = cfg.schedule.base_lr;
    std::function<double(std::int64_t)> lr_at = [&](std::int64_t) { return sched.eta_max; };
    if (steps > 1) {
        sched.n_task = steps;
        sched.n_warm = schedules::warmup_steps(steps, cfg.schedule.warmup_fraction);
        sched.n_cool = 0;
        lr_at = [&sched](std::int64_t s) { return schedules::cosine_lr(s + 1, sched); };
    }

    methods::TrainState ts;
    ts.params = world.theta0;
    methods::MethodState ms;
    const mixture::Buffer empty;
    const mixture::Pool no_pretrain;
    Trajectory traj;
    traj.plan = plan;
    traj.budget_gflops = cfg.budget.total_gflops;
    traj.records.push_back(make_record(0, evaluate(ts.params, world)));
    const auto st = train_segment(joint, joint.method, ms, ts, no_pretrain, pool, empty, joint.ratios, steps, lr_at,
                                  rng, 1, {});
    TaskRecord r = make_record(T, evaluate(ts.params, world));
    r.steps = steps;
    r.mafs_spent = static_cast<double>(steps) * cost.maf_per_step;
    r.samples_seen = st.samples;
    r.lr_start = st.lr_start;
    r.lr_peak = st.lr_peak;
    r.lr_end = st.lr_end;
    traj.records.push_back(r);
    traj.final_params = ts.params;
    return traj;
}

Trajectory joint_upper_bound(const RunConfig& cfg) {
    cfg.validate();
    const auto world = make_world(cfg);
    return joint_upper_bound(cfg, world, make_plan(cfg, world));
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
    os << "t,a_ka,a_zs,geo_mean,steps,mafs_spent,samples_seen,lr_start,lr_peak,lr_end\n";
    const auto flags = os.flags();
    const auto prec = os.precision();
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& r : traj.records)
        os << r.t << ',' << r.a_ka << ',' << r.a_zs << ',' << r.geo_mean << ',' << r.steps << ',' << r.mafs_spent
           << ',' << r.samples_seen << ',' << r.lr_start << ',' << r.lr_peak << ',' << r.lr_end << '\n';
    os.flags(flags);
    os.precision(prec);
}

std::vector<TaskRecord> read_trajectory_csv(std::istream& is) {
    std::vector<TaskRecord> out;
    std::string line;
    if (!std::getline(is, line) || line.rfind("t,a_ka", 0) != 0) throw std::runtime_error("missing trajectory header");
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 10) throw std::runtime_error("trajectory line " + std::to_string(lineno) + ": expected 10 fields");
        try {
            TaskRecord r;
            r.t = std::stoull(f[0]);
            r.a_ka = std::stod(f[1]);
            r.a_zs = std::stod(f[2]);
            r.geo_mean = std::stod(f[3]);
            r.steps = std::stoll(f[4]);
            r.mafs_spent = std::stod(f[5]);
            r.samples_seen = std::stoll(f[6]);
            r.lr_start = std::stod(f[7]);
            r.lr_peak = std::stod(f[8]);
            r.lr_end = std::stod(f[9]);
            out.push_back(r);
        } catch (const std::logic_error&) {
            throw std::runtime_error("trajectory line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return out;
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2); }

RunConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config JSON: ") + e.what());
    }
    return from_json(j);
}

}  // namespace cpt::engine
