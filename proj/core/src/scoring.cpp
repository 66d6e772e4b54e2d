// SPDX-License-Identifier: Apache-2.0
#include "cpt/scoring.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace cpt::streams {

std::map<ConceptId, double> score_concepts(const model::ParamSet& params,
                                           const std::map<ConceptId, mixture::Pool>& concept_pools,
                                           std::size_t samples_per_concept, const mixture::Pool& pretrain_pool,
                                           Rng& rng) {
    if (samples_per_concept == 0) throw std::invalid_argument("samples_per_concept must be positive");
    std::map<ConceptId, double> scores;
    std::vector<std::size_t> index;
    for (const auto& [id, pool] : concept_pools) {
        if (pool.size() < samples_per_concept)
            throw std::invalid_argument("concept '" + id + "' has " + std::to_string(pool.size()) +
                                        " samples, fewer than " + std::to_string(samples_per_concept));
        index.resize(pool.size());
        std::iota(index.begin(), index.end(), std::size_t{0});
        std::shuffle(index.begin(), index.end(), rng);
        std::vector<const mixture::Sample*> batch;
        for (std::size_t k = 0; k < samples_per_concept; ++k) batch.push_back(&pool[index[k]]);
        if (!pretrain_pool.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, pretrain_pool.size() - 1);
            for (std::size_t k = 0; k < samples_per_concept; ++k) batch.push_back(&pretrain_pool[pick(rng)]);
        }
        const auto loss = model::loss_and_grad(params, batch);
        double sum = 0.0;
        for (std::size_t k = 0; k < samples_per_concept; ++k) sum += loss.per_sample[k];
        scores[id] = sum / static_cast<double>(samples_per_concept);
    }
    return scores;
}

std::vector<Concept> scored_inventory(const synthetic::World& world, std::uint64_t seed,
                                      std::size_t samples_per_concept) {
    auto rng = make_rng(seed, stream_id::scoring);
    const auto scores = score_concepts(world.theta0, world.train_pools, samples_per_concept, world.pretrain_pool, rng);
    auto inventory = world.adaptation_inventory();
    for (auto& c : inventory) c.difficulty = scores.at(c.id);
    return inventory;
}

}  // namespace cpt::streams
