// SPDX-License-Identifier: Apache-2.0
#include "cpt/streams.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <nlohmann/json.hpp>

#include "cpt/rng.hpp"

namespace cpt::streams {

namespace {

Ordering ascending_by(const std::map<ConceptId, double>& score) {
    std::vector<std::pair<double, ConceptId>> items;
    items.reserve(score.size());
    for (const auto& [id, s] : score) items.emplace_back(s, id);
    std::sort(items.begin(), items.end());  // pairs: score, then id
    Ordering out;
    out.reserve(items.size());
    for (auto& [s, id] : items) out.push_back(std::move(id));
    return out;
}

void require_nonempty(const std::vector<Concept>& concepts) {
    if (concepts.empty()) throw std::invalid_argument("empty concept inventory");
}

Ordering ids_of(const std::vector<Concept>& concepts) {
    Ordering ids;
    ids.reserve(concepts.size());
    for (const auto& c : concepts) ids.push_back(c.id);
    return ids;
}

}  // namespace

OrderingKind parse_ordering(std::string_view name) {
    for (auto k : kAllOrderings)
        if (to_string(k) == name) return k;
    if (name == "performance") return OrderingKind::loss;
    if (name == "concept-frequency") return OrderingKind::frequency;
    throw std::invalid_argument("unknown ordering kind '" + std::string(name) + "'");
}

std::string_view to_string(OrderingKind kind) {
    switch (kind) {
        case OrderingKind::random: return "random";
        case OrderingKind::loss: return "loss";
        case OrderingKind::frequency: return "frequency";
        case OrderingKind::similarity: return "similarity";
        case OrderingKind::time: return "time";
        case OrderingKind::dataset: return "dataset";
    }
    throw std::invalid_argument("unknown ordering kind");
}

Ordering order_random(const std::vector<Concept>& concepts, std::uint64_t seed) {
    require_nonempty(concepts);
    Ordering ids = ids_of(concepts);
    auto rng = make_rng(seed, stream_id::ordering);
    std::shuffle(ids.begin(), ids.end(), rng);
    return ids;
}

Ordering order_by_loss(const std::map<ConceptId, double>& difficulty) { return ascending_by(difficulty); }

Ordering order_by_loss(const std::vector<Concept>& concepts) {
    std::map<ConceptId, double> scores;
    for (const auto& c : concepts) {
        if (!c.difficulty) throw std::invalid_argument("concept '" + c.id + "' has no difficulty score");
        scores[c.id] = *c.difficulty;
    }
    return ascending_by(scores);
}

Ordering order_by_frequency(const std::map<ConceptId, double>& frequency) { return ascending_by(frequency); }

double path_distance(const Matrix& similarity, const std::vector<std::size_t>& path) {
    double total = 0.0;
    for (std::size_t i = 1; i < path.size(); ++i) total += 1.0 - similarity(path[i - 1], path[i]);
    return total;
}

std::vector<std::size_t> similarity_path(const Matrix& similarity) {
    const std::size_t n = similarity.rows;
    if (similarity.cols != n) throw std::invalid_argument("similarity matrix must be square");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double s = similarity(i, j);
            if (s != similarity(j, i)) throw std::invalid_argument("similarity matrix must be symmetric");
            if (!(s >= -1.0 && s <= 1.0)) throw std::invalid_argument("similarity entries must lie in [-1, 1]");
        }
    if (n == 0) return {};

    std::vector<std::size_t> best;
    double best_distance = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> path;
    std::vector<char> visited(n);
    for (std::size_t start = 0; start < n; ++start) {
        path.assign(1, start);
        std::fill(visited.begin(), visited.end(), 0);
        visited[start] = 1;
        double distance = 0.0;
        for (std::size_t step = 1; step < n; ++step) {
            const std::size_t cur = path.back();
            std::size_t next = n;
            for (std::size_t j = 0; j < n; ++j) {
                if (visited[j]) continue;
                if (next == n || similarity(cur, j) > similarity(cur, next)) next = j;
            }
            visited[next] = 1;
            distance += 1.0 - similarity(cur, next);
            path.push_back(next);
        }
        if (distance < best_distance) {
            best_distance = distance;
            best = path;
        }
    }
    return best;
}

Ordering order_by_similarity(const std::vector<ConceptId>& ids, const Matrix& similarity) {
    if (ids.size() != similarity.rows) throw std::invalid_argument("similarity matrix does not match concept count");
    Ordering out;
    out.reserve(ids.size());
    for (auto idx : similarity_path(similarity)) out.push_back(ids[idx]);
    return out;
}

Ordering order_dataset_incremental(const std::vector<Concept>& concepts, std::uint64_t seed) {
    require_nonempty(concepts);
    std::map<std::string, Ordering> by_dataset;
    for (const auto& c : concepts) by_dataset[c.dataset_id].push_back(c.id);
    std::vector<std::string> datasets;
    for (const auto& [d, _] : by_dataset) datasets.push_back(d);
    auto rng = make_rng(seed, stream_id::ordering);
    std::shuffle(datasets.begin(), datasets.end(), rng);
    Ordering out;
    for (const auto& d : datasets) {
        auto block = by_dataset[d];
        std::shuffle(block.begin(), block.end(), rng);
        out.insert(out.end(), block.begin(), block.end());
    }
    return out;
}

Ordering order_time(const std::vector<Concept>& concepts, std::uint64_t seed) {
    require_nonempty(concepts);
    std::map<int, Ordering> by_year;
    for (const auto& c : concepts) by_year[c.year].push_back(c.id);
    auto rng = make_rng(seed, stream_id::ordering);
    Ordering out;
    for (auto& [year, block] : by_year) {
        std::shuffle(block.begin(), block.end(), rng);
        out.insert(out.end(), block.begin(), block.end());
    }
    return out;
}

StreamPlan chunk(const Ordering& ordering, std::size_t num_tasks) {
    if (num_tasks == 0) throw std::invalid_argument("number of tasks must be positive");
    if (num_tasks > ordering.size())
        throw std::invalid_argument("cannot split " + std::to_string(ordering.size()) + " concepts into " +
                                    std::to_string(num_tasks) + " tasks");
    StreamPlan plan;
    plan.ordering = ordering;
    const std::size_t base = ordering.size() / num_tasks;
    const std::size_t extra = ordering.size() % num_tasks;
    auto it = ordering.begin();
    for (std::size_t t = 0; t < num_tasks; ++t) {
        const std::size_t size = base + (t < extra ? 1 : 0);
        plan.tasks.emplace_back(it, it + static_cast<std::ptrdiff_t>(size));
        it += static_cast<std::ptrdiff_t>(size);
    }
    return plan;
}

StreamPlan make_plan(const OrderingInputs& inputs, OrderingKind kind, bool reversed, std::size_t num_tasks,
                     std::uint64_t seed) {
    const auto& concepts = inputs.concepts;
    require_nonempty(concepts);
    Ordering ordering;
    switch (kind) {
        case OrderingKind::random: ordering = order_random(concepts, seed); break;
        case OrderingKind::loss: ordering = order_by_loss(concepts); break;
        case OrderingKind::frequency: {
            std::map<ConceptId, double> freq;
            for (const auto& c : concepts) freq[c.id] = c.frequency;
            ordering = order_by_frequency(freq);
            break;
        }
        case OrderingKind::similarity:
            if (!inputs.similarity) throw std::invalid_argument("similarity ordering needs a similarity matrix");
            ordering = order_by_similarity(ids_of(concepts), *inputs.similarity);
            break;
        case OrderingKind::time: ordering = order_time(concepts, seed); break;
        case OrderingKind::dataset: ordering = order_dataset_incremental(concepts, seed); break;
    }
    if (reversed) std::reverse(ordering.begin(), ordering.end());
    StreamPlan plan = chunk(ordering, num_tasks);
    plan.kind = kind;
    plan.reversed = reversed;
    plan.seed = seed;
    return plan;
}

void check_plan(const StreamPlan& plan) {
    std::set<ConceptId> seen;
    Ordering flat;
    for (const auto& task : plan.tasks)
        for (const auto& id : task) {
            if (!seen.insert(id).second) throw std::logic_error("concept '" + id + "' appears in two tasks");
            flat.push_back(id);
        }
    if (flat != plan.ordering) throw std::logic_error("task pools do not reproduce the ordering");
}

std::string to_manifest(const StreamPlan& plan) {
    nlohmann::json j;
    j["ordering_kind"] = std::string(to_string(plan.kind));
    j["reversed"] = plan.reversed;
    j["seed"] = plan.seed;
    j["num_tasks"] = plan.tasks.size();
    j["ordering"] = plan.ordering;
    j["tasks"] = plan.tasks;
    return j.dump(2) + "\n";
}

StreamPlan from_manifest(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    StreamPlan plan;
    plan.kind = parse_ordering(j.at("ordering_kind").get<std::string>());
    plan.reversed = j.at("reversed").get<bool>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.ordering = j.at("ordering").get<Ordering>();
    plan.tasks = j.at("tasks").get<std::vector<std::vector<ConceptId>>>();
    check_plan(plan);
    return plan;
}

}  // namespace cpt::streams
