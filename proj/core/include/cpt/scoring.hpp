// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>

#include "cpt/model.hpp"
#include "cpt/rng.hpp"
#include "cpt/synthetic.hpp"

namespace cpt::streams {

/// Mean per-sample contrastive loss of each concept: samples_per_concept of its pairs are scored
/// in one batch together with samples_per_concept pairs drawn from the pretraining pool.
std::map<ConceptId, double> score_concepts(const model::ParamSet& params,
                                           const std::map<ConceptId, mixture::Pool>& concept_pools,
                                           std::size_t samples_per_concept, const mixture::Pool& pretrain_pool,
                                           Rng& rng);

/// Fills Concept::difficulty of the world's adaptation inventory using theta0.
std::vector<Concept> scored_inventory(const synthetic::World& world, std::uint64_t seed,
                                      std::size_t samples_per_concept = 50);

}  // namespace cpt::streams
