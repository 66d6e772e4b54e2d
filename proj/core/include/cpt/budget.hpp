// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cpt::budget {

/// Default total continual-pretraining budget in GFLOPs (ViT-B/16 scale).
inline constexpr double kDefaultTotalGflops = 1.8e9;

/// Measured cost of one gradient step of an update method at batch 512.
struct MethodCost {
    std::string method;
    double per_step_gflops = 0.0;
    double peak_memory_gb = 0.0;
    double reference_memory_gb = 0.0;
    /// Multiplier as quoted alongside the memory measurement (4 decimals).
    std::optional<double> quoted_multiplier;
};

struct MethodBudget {
    double memory_multiplier = 0.0;
    double maf_per_step = 0.0;
    std::int64_t steps_per_task = 0;
    std::int64_t total_steps = 0;
    std::int64_t total_samples = 0;
};

/// Peak memory relative to full finetuning. Throws std::domain_error on non-positive memory.
double memory_multiplier(const MethodCost& cost);

/// Multiplier applied to FLOPs: the quoted figure if present, else the exact ratio rounded to 4 decimals.
double applied_multiplier(const MethodCost& cost);

/// Memory-adjusted GFLOPs per gradient step.
double maf_per_step(const MethodCost& cost);

/// floor((total_budget / num_tasks) / maf).
std::int64_t steps_per_task(double total_budget_gflops, std::int64_t num_tasks, double maf);

std::int64_t total_samples(std::int64_t steps_per_task, std::int64_t num_tasks, std::int64_t batch_size);

MethodBudget plan(const MethodCost& cost, double total_budget_gflops, std::int64_t num_tasks,
                  std::int64_t batch_size);

/// A cost table: rows of method costs plus the full-finetuning reference memory.
class CostTable {
public:
    CostTable() = default;
    explicit CostTable(std::vector<MethodCost> rows) : rows_(std::move(rows)) {}

    /// Parses "method,per_step_gflops,peak_memory_gb[,memory_multiplier]" rows.
    /// '#' starts a comment; the header line is optional. The row named
    /// reference_method supplies the reference memory for every row.
    static CostTable parse(const std::string& text, const std::string& reference_method = "full-ft");
    static CostTable load(const std::filesystem::path& path, const std::string& reference_method = "full-ft");

    /// Bundled per-step costs measured on a ViT-B/16 backbone.
    static CostTable bundled();

    const std::vector<MethodCost>& rows() const { return rows_; }
    bool empty() const { return rows_.empty(); }
    const MethodCost& find(const std::string& method) const;
    bool contains(const std::string& method) const;

private:
    std::vector<MethodCost> rows_;
};

/// Bundled cost table text, exactly as shipped in data/cost_table_vitb16.csv.
const std::string& bundled_cost_table_text();

}  // namespace cpt::budget
