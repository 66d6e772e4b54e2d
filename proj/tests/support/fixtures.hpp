// SPDX-License-Identifier: Apache-2.0
// Small builders and reference implementations shared by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cpt/mixture.hpp"
#include "cpt/model.hpp"
#include "cpt/rng.hpp"
#include "cpt/tensor.hpp"

namespace cpt::testing {

/// Towers that copy the first d_emb input coordinates.
inline model::ParamSet identity_params(std::size_t d_in, std::size_t d_emb, double tau = 1.0) {
    auto p = model::ParamSet::zeros(d_in, d_emb);
    for (std::size_t i = 0; i < d_emb; ++i) {
        p.image.weight(i, i) = 1.0;
        p.text.weight(i, i) = 1.0;
    }
    p.log_temperature = std::log(tau);
    return p;
}

/// Every entry perturbed by N(0, sd); scales kept near one.
inline model::ParamSet random_params(std::size_t d_in, std::size_t d_emb, Rng& rng, double sd = 0.3) {
    auto p = identity_params(d_in, d_emb);
    std::normal_distribution<double> n(0.0, sd);
    for (auto* t : {&p.image, &p.text}) {
        for (auto& w : t->weight.data) w += n(rng);
        for (auto& b : t->bias) b = n(rng);
        for (auto& s : t->scale) s = 1.0 + n(rng);
        for (auto& s : t->shift) s = n(rng);
    }
    p.log_temperature = std::log(0.5) + n(rng);
    return p;
}

inline Vector gaussian(std::size_t d, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Vector v(d);
    for (auto& x : v) x = n(rng);
    return v;
}

/// Pairs whose text is the image plus N(0, noise).
inline mixture::Pool noisy_pairs(const std::string& concept_id, std::size_t count, std::size_t d_in, double noise,
                                 Rng& rng, mixture::PoolTag tag = mixture::PoolTag::update) {
    mixture::Pool pool;
    for (std::size_t i = 0; i < count; ++i) {
        mixture::Sample s;
        s.image_features = gaussian(d_in, rng);
        s.text_features = s.image_features;
        std::normal_distribution<double> n(0.0, noise > 0 ? noise : 1.0);
        if (noise > 0)
            for (auto& x : s.text_features) x += n(rng);
        s.concept_id = concept_id;
        s.pool_tag = tag;
        pool.push_back(std::move(s));
    }
    return pool;
}

inline std::vector<const mixture::Sample*> pointers(const mixture::Pool& pool) {
    std::vector<const mixture::Sample*> out;
    for (const auto& s : pool) out.push_back(&s);
    return out;
}

/// Symmetric matrix with unit diagonal and uniform off-diagonal entries in [-1, 1].
inline Matrix random_similarity(std::size_t n, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix m(n, n, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) m(i, j) = m(j, i) = u(rng);
    return m;
}

/// Reference greedy ordering: from every start, repeatedly move to the most similar unvisited
/// node (lowest index on ties); keep the start with the smallest summed 1 - similarity.
inline std::vector<std::size_t> greedy_path_reference(const Matrix& sim) {
    const std::size_t n = sim.rows;
    std::vector<std::size_t> best;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < n; ++s) {
        std::vector<std::size_t> path{s};
        std::vector<bool> used(n, false);
        used[s] = true;
        double cost = 0;
        while (path.size() < n) {
            double best_sim = -std::numeric_limits<double>::infinity();
            std::size_t pick = n;
            for (std::size_t j = 0; j < n; ++j)
                if (!used[j] && sim(path.back(), j) > best_sim) {
                    best_sim = sim(path.back(), j);
                    pick = j;
                }
            cost += 1.0 - best_sim;
            used[pick] = true;
            path.push_back(pick);
        }
        if (cost < best_cost) {
            best_cost = cost;
            best = path;
        }
    }
    return best;
}

/// Minimum 1 - similarity over all Hamiltonian paths (n <= 8).
inline double optimal_path_cost(const Matrix& sim) {
    std::vector<std::size_t> perm(sim.rows);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    do {
        double c = 0;
        for (std::size_t i = 1; i < perm.size(); ++i) c += 1.0 - sim(perm[i - 1], perm[i]);
        best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

}  // namespace cpt::testing
