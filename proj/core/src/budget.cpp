// SPDX-License-Identifier: Apache-2.0
#include "cpt/budget.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cpt::budget {

namespace {

void validate(const MethodCost& cost) {
    if (!(cost.peak_memory_gb > 0.0) || !(cost.reference_memory_gb > 0.0))
        throw std::domain_error("memory figures must be positive (method '" + cost.method + "')");
    if (!(cost.per_step_gflops > 0.0))
        throw std::domain_error("per-step GFLOPs must be positive (method '" + cost.method + "')");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_number(const std::string& field, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("cost table line " + std::to_string(line_no) + ": malformed number '" +
                                    field + "'");
    }
}

}  // namespace

double memory_multiplier(const MethodCost& cost) {
    if (!(cost.peak_memory_gb > 0.0) || !(cost.reference_memory_gb > 0.0))
        throw std::domain_error("memory figures must be positive (method '" + cost.method + "')");
    return cost.peak_memory_gb / cost.reference_memory_gb;
}

double applied_multiplier(const MethodCost& cost) {
    const double exact = memory_multiplier(cost);
    if (cost.quoted_multiplier) return *cost.quoted_multiplier;
    return std::round(exact * 1e4) / 1e4;
}

double maf_per_step(const MethodCost& cost) {
    validate(cost);
    return cost.per_step_gflops * applied_multiplier(cost);
}

std::int64_t steps_per_task(double total_budget_gflops, std::int64_t num_tasks, double maf) {
    if (!(maf > 0.0)) throw std::domain_error("MAF per step must be positive");
    if (num_tasks <= 0) throw std::domain_error("number of tasks must be positive");
    if (total_budget_gflops < 0.0) throw std::domain_error("budget must be non-negative");
    return static_cast<std::int64_t>(std::floor(total_budget_gflops / static_cast<double>(num_tasks) / maf));
}

std::int64_t total_samples(std::int64_t steps_per_task, std::int64_t num_tasks, std::int64_t batch_size) {
    return steps_per_task * num_tasks * batch_size;
}

MethodBudget plan(const MethodCost& cost, double total_budget_gflops, std::int64_t num_tasks,
                  std::int64_t batch_size) {
    MethodBudget b;
    b.memory_multiplier = memory_multiplier(cost);
    b.maf_per_step = maf_per_step(cost);
    b.steps_per_task = steps_per_task(total_budget_gflops, num_tasks, b.maf_per_step);
    b.total_steps = b.steps_per_task * num_tasks;
    b.total_samples = total_samples(b.steps_per_task, num_tasks, batch_size);
    return b;
}

CostTable CostTable::parse(const std::string& text, const std::string& reference_method) {
    struct Raw {
        std::string method;
        double gflops;
        double peak;
        std::optional<double> quoted;
    };
    std::vector<Raw> raw;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ls(line);
        for (std::string f; std::getline(ls, f, ',');) fields.push_back(trim(f));
        if (fields.size() < 3 || fields.size() > 4)
            throw std::invalid_argument("cost table line " + std::to_string(line_no) + ": expected 3 or 4 fields");
        if (fields[0] == "method") continue;  // header
        Raw r{fields[0], parse_number(fields[1], line_no), parse_number(fields[2], line_no), std::nullopt};
        if (fields.size() == 4 && !fields[3].empty()) r.quoted = parse_number(fields[3], line_no);
        if (!(r.gflops > 0.0) || !(r.peak > 0.0))
            throw std::invalid_argument("cost table line " + std::to_string(line_no) + ": values must be positive");
        raw.push_back(std::move(r));
    }
    if (raw.empty()) return CostTable{};

    double reference = 0.0;
    for (const auto& r : raw)
        if (r.method == reference_method) reference = r.peak;
    if (reference <= 0.0) throw std::invalid_argument("cost table has no reference row '" + reference_method + "'");

    std::vector<MethodCost> rows;
    rows.reserve(raw.size());
    for (auto& r : raw) rows.push_back(MethodCost{r.method, r.gflops, r.peak, reference, r.quoted});
    return CostTable(std::move(rows));
}

CostTable CostTable::load(const std::filesystem::path& path, const std::string& reference_method) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open cost table " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), reference_method);
}

CostTable CostTable::bundled() { return parse(bundled_cost_table_text()); }

const MethodCost& CostTable::find(const std::string& method) const {
    for (const auto& r : rows_)
        if (r.method == method) return r;
    throw std::out_of_range("cost table has no row for method '" + method + "'");
}

bool CostTable::contains(const std::string& method) const {
    for (const auto& r : rows_)
        if (r.method == method) return true;
    return false;
}

}  // namespace cpt::budget
