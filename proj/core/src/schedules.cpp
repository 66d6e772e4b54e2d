// SPDX-License-Identifier: Apache-2.0
#include "cpt/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace cpt::schedules {

namespace {

void check_step(std::int64_t n, const ScheduleParams& p) {
    if (n < 0 || n > p.n_task)
        throw std::domain_error("step " + std::to_string(n) + " outside [0, " + std::to_string(p.n_task) + "]");
}

double warmup(std::int64_t n, std::int64_t n_warm, double eta_min, double eta_max) {
    return eta_min + static_cast<double>(n) / static_cast<double>(n_warm) * (eta_max - eta_min);
}

double rsqrt_decay(std::int64_t n, const ScheduleParams& p) {
    const double w = static_cast<double>(p.n_warm);
    if (p.continuous_rsqrt) return p.eta_max * std::sqrt(w) / std::sqrt(std::max(static_cast<double>(n), w));
    return p.eta_max * std::sqrt(w) / std::sqrt(static_cast<double>(n) + w);
}

void validate_meta(const MetaState& m) {
    if (m.task_index < 1) throw std::domain_error("task index is 1-based");
    if (m.task_lengths.size() < m.task_index || m.task_warmups.size() < m.task_index)
        throw std::domain_error("meta schedule needs lengths and warmups for every task up to the current one");
    if (family_of(m.variant) == Family::rsqrt && m.task_cooldowns.size() < m.task_index)
        throw std::domain_error("rsqrt meta schedules need per-task cooldowns");
}

std::int64_t cooldown_of(const MetaState& m, std::size_t task) {
    return task <= m.task_cooldowns.size() ? m.task_cooldowns[task - 1] : 0;
}

}  // namespace

void validate(const ScheduleParams& p) {
    if (!(p.eta_min >= 0.0) || !(p.eta_max > p.eta_min))
        throw std::domain_error("learning rates must satisfy 0 <= eta_min < eta_max");
    if (p.n_warm <= 0 || p.n_warm >= p.n_task) throw std::domain_error("warmup must satisfy 0 < n_warm < n_task");
    if (p.n_cool < 0 || p.n_cool > p.n_task - p.n_warm)
        throw std::domain_error("cooldown must satisfy 0 <= n_cool <= n_task - n_warm");
}

double cosine_lr(std::int64_t n, const ScheduleParams& p) {
    validate(p);
    check_step(n, p);
    if (n < p.n_warm) return warmup(n, p.n_warm, p.eta_min, p.eta_max);
    const double phase = static_cast<double>(n - p.n_warm) / static_cast<double>(p.n_task - p.n_warm);
    return p.eta_min + 0.5 * (p.eta_max - p.eta_min) * (1.0 + std::cos(phase * std::numbers::pi));
}

double rsqrt_lr(std::int64_t n, const ScheduleParams& p) {
    validate(p);
    check_step(n, p);
    if (n < p.n_warm) return warmup(n, p.n_warm, p.eta_min, p.eta_max);
    const std::int64_t decay_end = p.n_task - p.n_cool;
    if (n <= decay_end) return rsqrt_decay(n, p);
    // Linear cooldown over the final n_cool steps, reaching zero at n_task.
    return rsqrt_decay(decay_end, p) * static_cast<double>(p.n_task - n) / static_cast<double>(p.n_cool);
}

double base_lr(Family family, std::int64_t n, const ScheduleParams& p) {
    return family == Family::cosine ? cosine_lr(n, p) : rsqrt_lr(n, p);
}

MetaVariant parse_variant(std::string_view name) {
    for (auto v : {MetaVariant::independent_cosine, MetaVariant::independent_rsqrt, MetaVariant::autoregressive_cosine,
                   MetaVariant::continued_dynamic_cosine, MetaVariant::autoregressive_rsqrt,
                   MetaVariant::continued_dynamic_rsqrt, MetaVariant::peaks_match_rsqrt})
        if (to_string(v) == name) return v;
    throw std::invalid_argument("unknown meta schedule variant '" + std::string(name) + "'");
}

std::string_view to_string(MetaVariant v) {
    switch (v) {
        case MetaVariant::independent_cosine: return "independent-cosine";
        case MetaVariant::independent_rsqrt: return "independent-rsqrt";
        case MetaVariant::autoregressive_cosine: return "autoregressive-cosine";
        case MetaVariant::continued_dynamic_cosine: return "continued-dynamic-cosine";
        case MetaVariant::autoregressive_rsqrt: return "autoregressive-rsqrt";
        case MetaVariant::continued_dynamic_rsqrt: return "continued-dynamic-rsqrt";
        case MetaVariant::peaks_match_rsqrt: return "peaks-match-rsqrt";
    }
    throw std::invalid_argument("unknown meta schedule variant");
}

Family family_of(MetaVariant v) {
    switch (v) {
        case MetaVariant::independent_cosine:
        case MetaVariant::autoregressive_cosine:
        case MetaVariant::continued_dynamic_cosine: return Family::cosine;
        default: return Family::rsqrt;
    }
}

std::int64_t warmup_steps(std::int64_t n_task, double fraction) {
    if (n_task < 2) throw std::domain_error("a warmed-up schedule needs at least two steps");
    const auto w = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(n_task)));
    return std::clamp<std::int64_t>(w, 1, n_task - 1);
}

std::int64_t cooldown_steps(std::int64_t n_task, std::int64_t n_warm, double fraction) {
    const auto c = static_cast<std::int64_t>(std::llround(fraction * static_cast<double>(n_task)));
    return std::clamp<std::int64_t>(c, 0, n_task - n_warm);
}

MetaState MetaState::uniform(std::size_t num_tasks, std::int64_t task_length, double warmup_fraction,
                             double cooldown_fraction, MetaVariant variant) {
    MetaState m;
    m.variant = variant;
    const auto warm = warmup_steps(task_length, warmup_fraction);
    const auto cool = cooldown_steps(task_length, warm, cooldown_fraction);
    m.task_lengths.assign(num_tasks, task_length);
    m.task_warmups.assign(num_tasks, warm);
    m.task_cooldowns.assign(num_tasks, cool);
    return m;
}

ScheduleParams task_params(const MetaState& meta, const ScheduleParams& base) {
    validate_meta(meta);
    ScheduleParams p = base;
    p.n_task = meta.task_lengths[meta.task_index - 1];
    p.n_warm = meta.task_warmups[meta.task_index - 1];
    p.n_cool = cooldown_of(meta, meta.task_index);
    return p;
}

ScheduleParams hypothetical_params(const MetaState& meta, const ScheduleParams& base) {
    validate_meta(meta);
    ScheduleParams p = base;
    p.n_warm = meta.task_warmups.front();
    p.n_task = std::accumulate(meta.task_lengths.begin(), meta.task_lengths.begin() + meta.task_index,
                               std::int64_t{0});
    p.n_cool = cooldown_of(meta, meta.task_index);
    return p;
}

std::int64_t hypothetical_offset(const MetaState& meta) {
    validate_meta(meta);
    return std::accumulate(meta.task_lengths.begin(), meta.task_lengths.begin() + (meta.task_index - 1),
                           std::int64_t{0});
}

double meta_peak(const MetaState& meta, const ScheduleParams& base) {
    validate_meta(meta);
    if (meta.task_lengths.empty()) throw std::domain_error("empty task length sequence");
    if (meta.task_index == 1) return base.eta_max;
    const auto hyp = hypothetical_params(meta, base);
    const auto n_prime = meta.task_warmups[meta.task_index - 1] + hypothetical_offset(meta);
    return base_lr(family_of(meta.variant), n_prime, hyp);
}

double meta_lr(const MetaState& meta, std::int64_t n, const ScheduleParams& base) {
    const ScheduleParams task = task_params(meta, base);
    check_step(n, task);
    switch (meta.variant) {
        case MetaVariant::independent_cosine: return cosine_lr(n, task);
        case MetaVariant::independent_rsqrt: return rsqrt_lr(n, task);
        case MetaVariant::autoregressive_cosine:
        case MetaVariant::autoregressive_rsqrt: {
            ScheduleParams p = task;
            p.eta_max = meta_peak(meta, base);
            return base_lr(family_of(meta.variant), n, p);
        }
        case MetaVariant::continued_dynamic_cosine:
        case MetaVariant::continued_dynamic_rsqrt: {
            if (n < task.n_warm) return warmup(n, task.n_warm, task.eta_min, meta_peak(meta, base));
            return base_lr(family_of(meta.variant), hypothetical_offset(meta) + n, hypothetical_params(meta, base));
        }
        case MetaVariant::peaks_match_rsqrt: {
            // Peak taken from the continued dynamics at warmup end; afterwards a within-task
            // rsqrt decay anchored at that peak, then the linear cooldown.
            const auto hyp = hypothetical_params(meta, base);
            const double peak =
                base_lr(Family::rsqrt, hypothetical_offset(meta) + task.n_warm, hyp);
            if (n < task.n_warm) return warmup(n, task.n_warm, task.eta_min, peak);
            ScheduleParams p = task;
            p.eta_max = peak;
            p.continuous_rsqrt = true;
            return rsqrt_lr(n, p);
        }
    }
    throw std::invalid_argument("unknown meta schedule variant");
}

}  // namespace cpt::schedules
