// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpt/tensor.hpp"

namespace cpt::streams {

using ConceptId = std::string;

struct Concept {
    ConceptId id;
    std::string dataset_id;
    int year = 0;
    double frequency = 0.0;
    std::optional<double> difficulty;
};

enum class OrderingKind { random, loss, frequency, similarity, time, dataset };

OrderingKind parse_ordering(std::string_view name);
std::string_view to_string(OrderingKind kind);
inline constexpr OrderingKind kAllOrderings[] = {OrderingKind::random,     OrderingKind::loss,
                                                 OrderingKind::frequency,  OrderingKind::similarity,
                                                 OrderingKind::time,       OrderingKind::dataset};

using Ordering = std::vector<ConceptId>;

/// An ordering of concepts cut into contiguous, disjoint task pools.
struct StreamPlan {
    OrderingKind kind = OrderingKind::random;
    bool reversed = false;
    std::uint64_t seed = 0;
    Ordering ordering;
    std::vector<std::vector<ConceptId>> tasks;

    std::size_t num_tasks() const { return tasks.size(); }
    bool operator==(const StreamPlan&) const = default;
};

/// Seeded uniform permutation of the inventory.
Ordering order_random(const std::vector<Concept>& concepts, std::uint64_t seed);

/// Ascending mean loss; ties broken by id.
Ordering order_by_loss(const std::map<ConceptId, double>& difficulty);
Ordering order_by_loss(const std::vector<Concept>& concepts);

/// Ascending frequency (long tail first); ties broken by id.
Ordering order_by_frequency(const std::map<ConceptId, double>& frequency);

/// Greedy nearest-neighbour path over distance 1 - similarity, tried from every start; the
/// path with the smallest total distance wins (lowest start index on ties). Returns node indices.
std::vector<std::size_t> similarity_path(const Matrix& similarity);

/// Total 1 - similarity distance along a path of node indices.
double path_distance(const Matrix& similarity, const std::vector<std::size_t>& path);

/// similarity rows/columns follow the order of `ids`.
Ordering order_by_similarity(const std::vector<ConceptId>& ids, const Matrix& similarity);

/// Datasets in seeded random order; concepts shuffled within each dataset.
Ordering order_dataset_incremental(const std::vector<Concept>& concepts, std::uint64_t seed);

/// Years ascending; seeded random order within a year.
Ordering order_time(const std::vector<Concept>& concepts, std::uint64_t seed);

/// Contiguous near-equal partition; earlier tasks take the remainder.
StreamPlan chunk(const Ordering& ordering, std::size_t num_tasks);

/// Inputs an ordering kind may need beyond the inventory itself.
struct OrderingInputs {
    std::vector<Concept> concepts;
    std::optional<Matrix> similarity;  ///< rows follow `concepts`
};

/// Builds the ordering of `kind`, reverses it if requested and chunks it into num_tasks pools.
StreamPlan make_plan(const OrderingInputs& inputs, OrderingKind kind, bool reversed, std::size_t num_tasks,
                     std::uint64_t seed);

/// Checks disjointness, coverage and ordering consistency. Throws std::logic_error on violation.
void check_plan(const StreamPlan& plan);

/// JSON manifest listing kind, reversal, seed, ordering and per-task concept ids.
std::string to_manifest(const StreamPlan& plan);
StreamPlan from_manifest(const std::string& text);

}  // namespace cpt::streams
