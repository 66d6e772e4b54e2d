// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include "cpt/engine.hpp"
#include "cpt/scoring.hpp"
#include "cpt/synthetic.hpp"
#include "doctest.h"

using namespace cpt;
using namespace cpt::synthetic;

TEST_CASE("worlds are deterministic per seed") {
    const WorldConfig cfg;
    const auto a = generate_world(cfg, 3, 0.01);
    const auto b = generate_world(cfg, 3, 0.01);
    const auto c = generate_world(cfg, 4, 0.01);
    CHECK(a.theta0 == b.theta0);
    CHECK(a.similarity == b.similarity);
    CHECK(a.adaptation_inventory().front().id == b.adaptation_inventory().front().id);
    CHECK_FALSE(a.theta0 == c.theta0);
}

TEST_CASE("world layout") {
    WorldConfig cfg;
    const auto w = generate_world(cfg, 1, 0.07);
    CHECK(w.adaptation.size() == cfg.adaptation_concepts);
    CHECK(w.heldout.size() == cfg.heldout_concepts);
    CHECK(w.adaptation_eval.size() == cfg.adaptation_concepts * cfg.eval_samples_per_concept);
    CHECK(w.heldout_eval.size() == cfg.heldout_concepts * cfg.eval_samples_per_concept);
    CHECK(w.theta0.temperature() == doctest::Approx(0.07));
    CHECK(w.theta0.image.d_in() == cfg.d_in);
    CHECK(w.theta0.image.d_emb() == cfg.d_emb);

    std::set<std::string> adapt, held, pre;
    for (const auto& c : w.adaptation) adapt.insert(c.meta.id);
    for (const auto& c : w.heldout) held.insert(c.meta.id);
    for (const auto& c : w.pretrain_concepts) pre.insert(c.meta.id);
    for (const auto& id : held) CHECK_FALSE(adapt.contains(id));
    for (const auto& id : pre) CHECK_FALSE(adapt.contains(id));
    for (const auto& s : w.pretrain_pool) CHECK(s.pool_tag == mixture::PoolTag::pretrain);
    for (const auto& [id, pool] : w.train_pools) {
        CHECK(adapt.contains(id));
        CHECK(pool.size() == cfg.train_samples_per_concept);
        for (const auto& s : pool) CHECK(s.concept_id == id);
    }
    for (const auto& c : w.adaptation) {
        CHECK(c.meta.year >= cfg.first_year);
        CHECK(c.meta.year <= cfg.last_year + 1);
        CHECK(c.meta.frequency >= 1.0);
    }

    REQUIRE(w.similarity.rows == cfg.adaptation_concepts);
    for (std::size_t i = 0; i < w.similarity.rows; ++i) {
        CHECK(w.similarity(i, i) == doctest::Approx(1.0));
        for (std::size_t j = 0; j < i; ++j) {
            CHECK(w.similarity(i, j) == w.similarity(j, i));
            CHECK(std::abs(w.similarity(i, j)) <= 1.0);
        }
    }
}

TEST_CASE("the pretrained stand-in knows held-out concepts better than adaptation concepts") {
    const auto w = generate_world(WorldConfig{}, 0, 0.01);
    const auto acc = engine::evaluate(w.theta0, w);
    CHECK(acc.a_zs > 0.8);
    CHECK(acc.a_ka < acc.a_zs - 0.2);
}

TEST_CASE("pretraining pools") {
    for (const auto& name : pretrain_pool_names()) {
        const auto spec = pretrain_pool_spec(name);
        CHECK(spec.name == name);
        WorldConfig cfg;
        cfg.pretrain_pool = name;
        const auto w = generate_world(cfg, 0, 0.01);
        CHECK(w.pretrain_pool.size() == spec.num_concepts * spec.samples_per_concept);
    }
    CHECK(pretrain_pool_spec("laion400m").num_concepts > pretrain_pool_spec("cc3m").num_concepts);
    CHECK_THROWS_AS(pretrain_pool_spec("openai"), std::invalid_argument);
}

TEST_CASE("world validation") {
    WorldConfig cfg;
    cfg.d_emb = cfg.d_in;
    CHECK_THROWS_AS(generate_world(cfg, 0, 0.01), std::invalid_argument);
    cfg = WorldConfig{};
    cfg.heldout_concepts = 0;
    CHECK_THROWS_AS(generate_world(cfg, 0, 0.01), std::invalid_argument);
    CHECK_THROWS_AS(generate_world(WorldConfig{}, 0, 0.0), std::invalid_argument);
    const auto w = generate_world(WorldConfig{}, 0, 0.01);
    CHECK_THROWS_AS(w.task_pool({"nope"}), std::invalid_argument);
}

TEST_CASE("scored inventory fills every difficulty deterministically") {
    const auto w = generate_world(WorldConfig{}, 2, 0.01);
    const auto a = streams::scored_inventory(w, 5, 20);
    const auto b = streams::scored_inventory(w, 5, 20);
    REQUIRE(a.size() == w.adaptation.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].difficulty.has_value());
        CHECK(*a[i].difficulty > 0.0);
        CHECK(*a[i].difficulty == *b[i].difficulty);
    }
}
