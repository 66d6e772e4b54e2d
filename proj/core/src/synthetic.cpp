// SPDX-License-Identifier: Apache-2.0
#include "cpt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "cpt/rng.hpp"

namespace cpt::synthetic {

namespace {

std::string make_id(char prefix, std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%c%03zu", prefix, i);
    return buf;
}

Vector gaussian(std::size_t n, double scale, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Vector v(n);
    for (auto& x : v) x = scale * g(rng);
    return v;
}

Vector perturbed(const Vector& base, double scale, Rng& rng) {
    Vector v = gaussian(base.size(), scale, rng);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += base[i];
    return v;
}

// Prototype with weight `inside` on the encoded subspace and `outside` on the remainder.
Vector prototype(std::size_t d_in, std::size_t d_emb, double inside, double outside, Rng& rng) {
    Vector v = gaussian(d_in, 1.0, rng);
    for (std::size_t i = 0; i < d_in; ++i) v[i] *= i < d_emb ? inside : outside;
    return v;
}

ConceptData make_concept(std::string id, Vector image_proto, double text_noise, Rng& rng) {
    ConceptData c;
    c.meta.id = std::move(id);
    c.text_prototype = perturbed(image_proto, text_noise, rng);
    c.image_prototype = std::move(image_proto);
    return c;
}

mixture::Sample draw_sample(const ConceptData& c, double noise, mixture::PoolTag tag, Rng& rng) {
    return mixture::Sample{perturbed(c.image_prototype, noise, rng), perturbed(c.text_prototype, noise, rng),
                           c.meta.id, tag};
}

double cosine(const Vector& a, const Vector& b) {
    const double s = dot(a, b) / std::sqrt(squared_norm(a) * squared_norm(b));
    return std::clamp(s, -1.0, 1.0);
}

}  // namespace

PretrainPoolSpec pretrain_pool_spec(std::string_view name) {
    if (name == "laion400m") return {"laion400m", 60, 0.25, 32};
    if (name == "cc12m") return {"cc12m", 40, 0.3, 32};
    if (name == "cc3m") return {"cc3m", 20, 0.35, 32};
    if (name == "datacomp-small") return {"datacomp-small", 30, 0.3, 32};
    throw std::invalid_argument("unknown pretraining pool '" + std::string(name) + "'");
}

const std::vector<std::string>& pretrain_pool_names() {
    static const std::vector<std::string> names{"laion400m", "cc12m", "cc3m", "datacomp-small"};
    return names;
}

std::vector<streams::Concept> World::adaptation_inventory() const {
    std::vector<streams::Concept> out;
    out.reserve(adaptation.size());
    for (const auto& c : adaptation) out.push_back(c.meta);
    return out;
}

streams::OrderingInputs World::ordering_inputs() const { return {adaptation_inventory(), similarity}; }

mixture::Pool World::task_pool(const std::vector<streams::ConceptId>& concepts) const {
    mixture::Pool pool;
    for (const auto& id : concepts) {
        const auto it = train_pools.find(id);
        if (it == train_pools.end()) throw std::invalid_argument("unknown adaptation concept '" + id + "'");
        pool.insert(pool.end(), it->second.begin(), it->second.end());
    }
    return pool;
}

World generate_world(const WorldConfig& cfg, std::uint64_t seed, double tau_init) {
    if (cfg.d_emb == 0 || cfg.d_emb >= cfg.d_in) throw std::invalid_argument("world needs 0 < d_emb < d_in");
    if (cfg.adaptation_concepts == 0 || cfg.heldout_concepts == 0)
        throw std::invalid_argument("world needs adaptation and held-out concepts");
    if (!(tau_init > 0.0)) throw std::invalid_argument("initial temperature must be positive");
    const auto pool_spec = pretrain_pool_spec(cfg.pretrain_pool);
    auto rng = make_rng(seed, stream_id::world);
    World w;

    // Adaptation concepts: visibility in the pretrained subspace varies per concept; frequency
    // follows a Zipf law over a noisy visibility ranking (common concepts are easier).
    std::uniform_real_distribution<double> vis(cfg.min_visibility, cfg.max_visibility);
    std::uniform_int_distribution<std::size_t> dataset_pick(0, std::max<std::size_t>(cfg.num_datasets, 1) - 1);
    std::uniform_int_distribution<int> year_pick(cfg.first_year, cfg.last_year);
    std::vector<int> dataset_year(std::max<std::size_t>(cfg.num_datasets, 1));
    for (auto& y : dataset_year) y = year_pick(rng);
    std::bernoulli_distribution next_year(0.3);
    std::vector<Vector> dataset_centre(dataset_year.size());
    for (auto& centre : dataset_centre) centre = gaussian(cfg.d_in, 1.0, rng);
    const double own = cfg.concept_spread;
    const double shared = std::sqrt(std::max(0.0, 1.0 - own * own));
    for (std::size_t i = 0; i < cfg.adaptation_concepts; ++i) {
        const double v = vis(rng);
        const std::size_t ds = dataset_pick(rng);
        Vector proto = gaussian(cfg.d_in, 1.0, rng);
        for (std::size_t k = 0; k < cfg.d_in; ++k)
            proto[k] = (own * proto[k] + shared * dataset_centre[ds][k]) * (k < cfg.d_emb ? v : 1.0);
        auto c = make_concept(make_id('a', i), std::move(proto), cfg.text_noise, rng);
        c.visibility = v;
        c.meta.dataset_id = "ds" + std::to_string(ds);
        c.meta.year = dataset_year[ds] + (next_year(rng) ? 1 : 0);
        w.adaptation.push_back(std::move(c));
    }
    {
        std::normal_distribution<double> jitter(0.0, 0.15);
        std::vector<std::pair<double, std::size_t>> rank;
        for (std::size_t i = 0; i < w.adaptation.size(); ++i)
            rank.emplace_back(-(w.adaptation[i].visibility + jitter(rng)), i);
        std::sort(rank.begin(), rank.end());
        for (std::size_t r = 0; r < rank.size(); ++r)
            w.adaptation[rank[r].second].meta.frequency = std::round(1e6 / std::pow(static_cast<double>(r + 1), 1.1));
    }
    for (std::size_t i = 0; i < cfg.heldout_concepts; ++i)
        w.heldout.push_back(make_concept(make_id('h', i),
                                         prototype(cfg.d_in, cfg.d_emb, 1.0, cfg.heldout_leakage, rng),
                                         cfg.text_noise, rng));
    for (std::size_t i = 0; i < pool_spec.num_concepts; ++i)
        w.pretrain_concepts.push_back(make_concept(make_id('p', i),
                                                   prototype(cfg.d_in, cfg.d_emb, 1.0, cfg.heldout_leakage, rng),
                                                   cfg.text_noise, rng));

    for (const auto& c : w.adaptation) {
        auto& pool = w.train_pools[c.meta.id];
        for (std::size_t k = 0; k < cfg.train_samples_per_concept; ++k)
            pool.push_back(draw_sample(c, cfg.noise, mixture::PoolTag::update, rng));
        for (std::size_t k = 0; k < cfg.eval_samples_per_concept; ++k)
            w.adaptation_eval.push_back(draw_sample(c, cfg.noise, mixture::PoolTag::update, rng));
        w.adaptation_prototypes[c.meta.id] = c.text_prototype;
    }
    for (const auto& c : w.heldout) {
        for (std::size_t k = 0; k < cfg.eval_samples_per_concept; ++k)
            w.heldout_eval.push_back(draw_sample(c, cfg.noise, mixture::PoolTag::update, rng));
        w.heldout_prototypes[c.meta.id] = c.text_prototype;
    }
    for (const auto& c : w.pretrain_concepts)
        for (std::size_t k = 0; k < pool_spec.samples_per_concept; ++k)
            w.pretrain_pool.push_back(draw_sample(c, pool_spec.noise, mixture::PoolTag::pretrain, rng));

    const std::size_t n = w.adaptation.size();
    w.similarity = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j)
            w.similarity(i, j) = w.similarity(j, i) =
                i == j ? 1.0 : cosine(w.adaptation[i].text_prototype, w.adaptation[j].text_prototype);

    w.theta0 = model::ParamSet::zeros(cfg.d_in, cfg.d_emb);
    std::normal_distribution<double> g(0.0, cfg.pretrained_weight_noise);
    for (auto* t : {&w.theta0.image, &w.theta0.text})
        for (std::size_t r = 0; r < cfg.d_emb; ++r)
            for (std::size_t c = 0; c < cfg.d_in; ++c) t->weight(r, c) = (r == c ? 1.0 : 0.0) + g(rng);
    w.theta0.log_temperature = std::log(tau_init);
    return w;
}

}  // namespace cpt::synthetic
