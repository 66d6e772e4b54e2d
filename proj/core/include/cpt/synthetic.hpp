// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpt/mixture.hpp"
#include "cpt/model.hpp"
#include "cpt/streams.hpp"

namespace cpt::synthetic {

/// A swappable pretraining pool: how many concepts it covers and how noisy its pairs are.
struct PretrainPoolSpec {
    std::string name;
    std::size_t num_concepts = 60;
    double noise = 0.25;
    std::size_t samples_per_concept = 32;
};

/// Known pools: laion400m, cc12m, cc3m, datacomp-small.
PretrainPoolSpec pretrain_pool_spec(std::string_view name);
const std::vector<std::string>& pretrain_pool_names();

/// Toy world layout. Raw features live in d_in dimensions; the first d_emb of them form the
/// subspace the pretrained model encodes, adaptation concepts live mostly in the rest.
struct WorldConfig {
    std::size_t d_in = model::kDefaultInputDim;
    std::size_t d_emb = model::kDefaultEmbeddingDim;
    std::size_t adaptation_concepts = 40;
    std::size_t heldout_concepts = 20;
    std::size_t train_samples_per_concept = 64;
    std::size_t eval_samples_per_concept = 10;
    double noise = 0.5;
    double text_noise = 0.1;
    /// Weight of the pretrained subspace in adaptation prototypes, drawn per concept.
    double min_visibility = 0.1;
    double max_visibility = 1.0;
    /// Off-subspace component of held-out and pretraining concepts.
    double heldout_leakage = 0.3;
    double pretrained_weight_noise = 0.05;
    std::size_t num_datasets = 8;
    /// Share of an adaptation prototype that is concept-specific; the rest is its dataset's
    /// centre, so concepts of one dataset are fine-grained neighbours. 1 makes them independent.
    double concept_spread = 0.5;
    int first_year = 2009;
    int last_year = 2023;
    std::string pretrain_pool = "laion400m";
    /// World seed; the run seed is used when unset.
    std::optional<std::uint64_t> seed;
};

struct ConceptData {
    streams::Concept meta;
    Vector image_prototype;
    Vector text_prototype;
    double visibility = 1.0;
};

struct World {
    std::vector<ConceptData> adaptation;
    std::vector<ConceptData> heldout;
    std::vector<ConceptData> pretrain_concepts;
    std::map<streams::ConceptId, mixture::Pool> train_pools;  ///< adaptation concept -> training pairs
    mixture::Pool pretrain_pool;
    std::vector<mixture::Sample> adaptation_eval;
    std::vector<mixture::Sample> heldout_eval;
    std::map<streams::ConceptId, Vector> adaptation_prototypes;  ///< text prototypes
    std::map<streams::ConceptId, Vector> heldout_prototypes;
    Matrix similarity;  ///< cosine similarity of adaptation text prototypes, rows follow `adaptation`
    model::ParamSet theta0;

    std::vector<streams::Concept> adaptation_inventory() const;
    streams::OrderingInputs ordering_inputs() const;
    /// Concatenated training pairs of the given concepts.
    mixture::Pool task_pool(const std::vector<streams::ConceptId>& concepts) const;
};

/// Deterministic world for (config, seed). theta0 is the pretrained stand-in: projection onto the
/// pretrained subspace plus small noise, unit scales and log-temperature log(tau_init).
World generate_world(const WorldConfig& cfg, std::uint64_t seed, double tau_init);

}  // namespace cpt::synthetic
