// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cpt::schedules {

enum class Family { cosine, rsqrt };

/// Iteration-level schedule of a single task. Steps are indexed n = 0..n_task.
struct ScheduleParams {
    double eta_min = 0.0;
    double eta_max = 1e-5;
    std::int64_t n_warm = 100;
    std::int64_t n_task = 1000;
    std::int64_t n_cool = 100;
    /// rsqrt only: decay as sqrt(n_warm / max(n, n_warm)) instead of sqrt(n_warm / (n + n_warm)).
    bool continuous_rsqrt = false;
};

/// Throws std::domain_error unless 0 <= eta_min < eta_max, 0 < n_warm < n_task and
/// 0 <= n_cool <= n_task - n_warm.
void validate(const ScheduleParams& p);

double cosine_lr(std::int64_t n, const ScheduleParams& p);
double rsqrt_lr(std::int64_t n, const ScheduleParams& p);
double base_lr(Family family, std::int64_t n, const ScheduleParams& p);

enum class MetaVariant {
    independent_cosine,
    independent_rsqrt,
    autoregressive_cosine,
    continued_dynamic_cosine,
    autoregressive_rsqrt,
    continued_dynamic_rsqrt,
    peaks_match_rsqrt,
};

MetaVariant parse_variant(std::string_view name);
std::string_view to_string(MetaVariant v);
Family family_of(MetaVariant v);

/// Task-level view of an update cycle. task_index is 1-based.
struct MetaState {
    std::size_t task_index = 1;
    std::vector<std::int64_t> task_lengths;
    std::vector<std::int64_t> task_warmups;
    std::vector<std::int64_t> task_cooldowns;
    MetaVariant variant = MetaVariant::independent_cosine;

    /// num_tasks equal tasks with warmup and cooldown given as fractions of the task length.
    static MetaState uniform(std::size_t num_tasks, std::int64_t task_length, double warmup_fraction,
                             double cooldown_fraction, MetaVariant variant);
};

/// Warmup length for a task of n_task steps: round(fraction * n_task), clamped to [1, n_task - 1].
std::int64_t warmup_steps(std::int64_t n_task, double fraction);
/// Cooldown length: round(fraction * n_task), clamped to [0, n_task - n_warm].
std::int64_t cooldown_steps(std::int64_t n_task, std::int64_t n_warm, double fraction);

/// Schedule of the current task under the independent variants.
ScheduleParams task_params(const MetaState& meta, const ScheduleParams& base);

/// The hypothetical schedule extended over tasks 1..task_index, warmed up once with the
/// first task's warmup.
ScheduleParams hypothetical_params(const MetaState& meta, const ScheduleParams& base);

/// Global step of the current task's warmup end within the hypothetical schedule.
std::int64_t hypothetical_offset(const MetaState& meta);

/// Peak learning rate of the current task: the hypothetical extended schedule evaluated where
/// the current task's warmup ends. The first task peaks at eta_max.
double meta_peak(const MetaState& meta, const ScheduleParams& base);

/// Learning rate at task-local step n under the configured meta variant.
double meta_lr(const MetaState& meta, std::int64_t n, const ScheduleParams& base);

}  // namespace cpt::schedules
