// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include "cpt/methods.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace cpt;
using namespace cpt::methods;

namespace {

MethodConfig config(MethodKind kind, std::size_t rank = 3) {
    MethodConfig c;
    c.kind = kind;
    c.rank = rank;
    return c;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

std::size_t count(const std::vector<char>& mask) { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

/// Plain AdamW steps of a method on one pool.
void train(const MethodConfig& cfg, const MethodState& ms, TrainState& s, const mixture::Pool& pool, int steps,
           Rng& rng) {
    model::OptimizerState opt;
    Vector flat = flatten(s);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    std::vector<const mixture::Sample*> batch(16);
    for (int i = 0; i < steps; ++i) {
        for (auto& b : batch) b = &pool[pick(rng)];
        auto obj = compute_objective(cfg, ms, s, batch);
        model::optimizer_step(flat, obj.grad, opt, 1e-2, 1.0, decay_mask(cfg.kind, s));
        unflatten(flat, s);
    }
}

}  // namespace

TEST_CASE("names and cost rows") {
    for (auto k : kAllMethods) CHECK(parse_method(to_string(k)) == k);
    CHECK(config(MethodKind::lora, 4).cost_row() == "lora-r4");
    CHECK(config(MethodKind::dora, 64).cost_row() == "dora-r64");
    CHECK(config(MethodKind::merge_ema).cost_row() == "merge-ema");
    CHECK_THROWS_AS(parse_method("galore"), std::invalid_argument);
}

TEST_CASE("config validation") {
    auto c = config(MethodKind::lora, 0);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = config(MethodKind::merge_ema);
    c.merge_w = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = config(MethodKind::si);
    c.si_zeta = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_NOTHROW(config(MethodKind::full_ft).validate());
}

TEST_CASE("every adapter starts at the base weight") {
    auto rng = make_rng(1);
    const auto base = testing::random_params(6, 4, rng);
    for (auto k : {MethodKind::lora, MethodKind::dora, MethodKind::vera}) {
        const auto a = init_adapter(config(k), base.image.weight, rng);
        CHECK(max_abs_diff(effective_weight(k, base.image.weight, a), base.image.weight) < 1e-12);
    }
    CHECK(effective_weight(MethodKind::bitfit, base.image.weight, Adapter{}) == base.image.weight);
}

TEST_CASE("rank-one LoRA perturbs a single entry") {
    Matrix w0(3, 4, 0.5);
    Adapter a;
    a.up = Matrix(3, 1);
    a.down = Matrix(1, 4);
    a.up(0, 0) = 1.0;
    a.down(0, 0) = 1.0;
    const auto w = effective_weight(MethodKind::lora, w0, a);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(w(i, j) == (i == 0 && j == 0 ? 1.5 : 0.5));
    a.up = Matrix(2, 1);
    CHECK_THROWS_AS(effective_weight(MethodKind::lora, w0, a), std::invalid_argument);
}

TEST_CASE("DoRA columns carry the magnitude") {
    auto rng = make_rng(2);
    const auto base = testing::random_params(5, 3, rng);
    auto a = init_adapter(config(MethodKind::dora, 2), base.image.weight, rng);
    for (auto& v : a.up.data) v = 0.7;
    for (auto& m : a.magnitude) m = 2.0;
    const auto w = effective_weight(MethodKind::dora, base.image.weight, a);
    for (std::size_t j = 0; j < w.cols; ++j) {
        double norm = 0;
        for (std::size_t i = 0; i < w.rows; ++i) norm += w(i, j) * w(i, j);
        CHECK(std::sqrt(norm) == doctest::Approx(2.0).epsilon(1e-12));
    }
}

TEST_CASE("trainable masks") {
    auto rng = make_rng(3);
    const std::size_t d_emb = 4;
    TrainState s{testing::random_params(6, d_emb, rng), {}};
    CHECK(count(trainable_mask(MethodKind::bitfit, s)) == 2 * d_emb + 1);
    CHECK(count(trainable_mask(MethodKind::lnfit, s)) == 4 * d_emb + 1);
    CHECK(count(trainable_mask(MethodKind::full_ft, s)) == s.size());
    const std::size_t tower = 6 * d_emb + 3 * d_emb;
    CHECK(count(trainable_mask(MethodKind::locked_image, s)) == tower + 1);
    CHECK(count(trainable_mask(MethodKind::locked_text, s)) == tower + 1);
    const auto decay = decay_mask(MethodKind::full_ft, s);
    CHECK(decay.back() == 0);

    TrainState lora{s.params, init_adapters(config(MethodKind::lora, 2), s.params, rng)};
    const auto m = trainable_mask(MethodKind::lora, lora);
    CHECK(count(m) == 2 * (d_emb * 2 + 2 * 6) + 1);
    for (std::size_t k = 0; k + 1 < s.params.size(); ++k) CHECK(m[k] == 0);

    TrainState vera{s.params, init_adapters(config(MethodKind::vera, 2), s.params, rng)};
    CHECK(count(trainable_mask(MethodKind::vera, vera)) == 2 * (d_emb + 2) + 1);
}

TEST_CASE("locked image tower receives no gradient") {
    auto rng = make_rng(4);
    TrainState s{testing::random_params(6, 4, rng), {}};
    const auto pool = testing::noisy_pairs("a", 8, 6, 0.5, rng);
    const auto obj = compute_objective(config(MethodKind::locked_image), {}, s, testing::pointers(pool));
    for (const auto& slot : model::layout(s.params))
        if (slot.name.starts_with("image."))
            for (std::size_t k = 0; k < slot.size; ++k) CHECK(obj.grad[slot.offset + k] == 0.0);
}

TEST_CASE("every kind passes the finite-difference check") {
    auto rng = make_rng(5);
    for (auto k : kAllMethods) {
        CAPTURE(to_string(k));
        for (int trial = 0; trial < 3; ++trial) {
            const auto r = testing::gradcheck_method(k, rng);
            CHECK(r.worst_violation <= 1.0);
            CHECK(r.frozen_leaks == 0);
            CHECK(r.checked > 0);
        }
    }
}

TEST_CASE("EWC penalty") {
    const Vector theta{1.0, 2.0, 3.0}, anchor{0.0, 2.0, 5.0}, ones{1.0, 1.0, 1.0};
    CHECK(ewc_penalty(theta, theta, ones, 3.0) == 0.0);
    CHECK(ewc_penalty(theta, anchor, ones, 2.0) == doctest::Approx(5.0));
    CHECK(ewc_penalty(theta, anchor, ones, 4.0) == doctest::Approx(2 * ewc_penalty(theta, anchor, ones, 2.0)));
    CHECK_THROWS_AS(ewc_penalty(theta, Vector{1.0}, ones, 1.0), std::invalid_argument);
}

TEST_CASE("Fisher estimation") {
    auto rng = make_rng(6);
    const auto p = testing::random_params(6, 4, rng);
    const auto pool = testing::noisy_pairs("a", 20, 6, 0.5, rng);
    auto r1 = make_rng(7), r2 = make_rng(7);
    const auto f1 = estimate_fisher(p, pool, 3, 8, r1);
    CHECK(f1 == estimate_fisher(p, pool, 3, 8, r2));
    for (double f : f1) CHECK(f >= 0.0);
    // A single-pair batch has zero loss everywhere, hence zero gradient.
    mixture::Pool one{pool.front()};
    for (double f : estimate_fisher(p, one, 2, 1, r1)) CHECK(f == 0.0);
    CHECK_THROWS_AS(estimate_fisher(p, {}, 2, 1, r1), std::invalid_argument);

    EwcState st;
    update_fisher(st, Vector{2.0, 4.0}, Vector{1.0, 1.0});
    CHECK(st.fisher == Vector{2.0, 4.0});
    update_fisher(st, Vector{0.0, 2.0}, Vector{3.0, 3.0});
    CHECK(st.fisher == Vector{1.0, 3.0});
    CHECK(st.anchor == Vector{3.0, 3.0});
}

TEST_CASE("SI accumulation and penalty") {
    SiState s;
    const Vector start{1.0, 1.0};
    si_begin_task(s, start);
    si_accumulate(s, Vector{0.5, -1.0}, Vector{0.0, 0.0});
    CHECK(s.omega == Vector{0.0, 0.0});
    // A descent step moves against the gradient: omega grows.
    si_accumulate(s, Vector{0.5, -1.0}, Vector{-0.1, 0.2});
    CHECK(s.omega[0] == doctest::Approx(0.05));
    CHECK(s.omega[1] == doctest::Approx(0.2));
    si_accumulate(s, Vector{0.5, -1.0}, Vector{-0.1, 0.2});
    CHECK(s.omega[1] == doctest::Approx(0.4));

    CHECK(si_penalty(Vector{5.0, 5.0}, s, 1.0) == 0.0);
    si_end_task(s, Vector{1.0, 1.4}, 0.1);
    CHECK(s.importance[0] == doctest::Approx(0.1 / 0.1));
    CHECK(s.importance[1] == doctest::Approx(0.4 / (0.16 + 0.1)));
    CHECK(si_penalty(Vector{1.0, 1.4}, s, 2.0) == 0.0);
    CHECK(si_penalty(Vector{2.0, 1.4}, s, 2.0) == doctest::Approx(2.0 * 1.0 * 1.0));
}

TEST_CASE("merging") {
    auto rng = make_rng(8);
    const auto t0 = testing::random_params(4, 2, rng);
    const auto prev = testing::random_params(4, 2, rng);
    const auto tuned = testing::random_params(4, 2, rng);
    CHECK(merge_end_of_task(MethodKind::merge_ema, t0, prev, tuned, 1.0) == prev);
    CHECK(merge_end_of_task(MethodKind::merge_zs, t0, prev, tuned, 1.0) == prev);
    CHECK(merge_end_of_task(MethodKind::merge_ft, t0, prev, tuned, 1.0) == t0);
    for (auto k : {MethodKind::merge_ema, MethodKind::merge_ft, MethodKind::merge_zs})
        CHECK(merge_end_of_task(k, t0, prev, tuned, 0.0) == tuned);
    CHECK_THROWS_AS(merge_end_of_task(MethodKind::full_ft, t0, prev, tuned, 0.5), std::logic_error);

    // Affine in each argument.
    const auto other = testing::random_params(4, 2, rng);
    const Vector a = model::flatten(tuned), b = model::flatten(other);
    Vector mid(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) mid[i] = 0.25 * a[i] + 0.75 * b[i];
    auto mid_p = tuned;
    model::unflatten(mid, mid_p);
    const auto ma = model::flatten(merge_end_of_task(MethodKind::merge_ema, t0, prev, tuned, 0.9));
    const auto mb = model::flatten(merge_end_of_task(MethodKind::merge_ema, t0, prev, other, 0.9));
    const auto mm = model::flatten(merge_end_of_task(MethodKind::merge_ema, t0, prev, mid_p, 0.9));
    for (std::size_t i = 0; i < mm.size(); ++i) CHECK(mm[i] == doctest::Approx(0.25 * ma[i] + 0.75 * mb[i]).epsilon(1e-12));
}

TEST_CASE("EMA toward a fixed target contracts geometrically") {
    auto rng = make_rng(9);
    const auto t0 = testing::random_params(4, 2, rng);
    const auto star = testing::random_params(4, 2, rng);
    const double w = 0.85;
    auto dist = [](const model::ParamSet& x, const model::ParamSet& y) {
        const Vector a = model::flatten(x), b = model::flatten(y);
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    };
    const double d0 = dist(t0, star);
    auto cur = t0;
    for (int t = 1; t <= 10; ++t) {
        cur = merge_end_of_task(MethodKind::merge_ema, t0, cur, star, w);
        CHECK(dist(cur, star) == doctest::Approx(std::pow(w, t) * d0).epsilon(1e-9));
    }
}

TEST_CASE("absorbing adapters") {
    auto rng = make_rng(10);
    for (auto k : {MethodKind::lora, MethodKind::dora, MethodKind::vera}) {
        const auto cfg = config(k, 2);
        TrainState s{testing::random_params(6, 4, rng), {}};
        s.adapters = init_adapters(cfg, s.params, rng);
        const auto before = effective_params(k, s);
        absorb_adapters(cfg, s, rng);
        CHECK(max_abs_diff(effective_params(k, s).image.weight, before.image.weight) < 1e-12);
        CHECK(max_abs_diff(s.params.text.weight, before.text.weight) < 1e-12);
    }

    // Two LoRA cycles add their low-rank updates.
    const auto cfg = config(MethodKind::lora, 2);
    TrainState s{testing::random_params(6, 4, rng), {}};
    const Matrix w0 = s.params.image.weight;
    s.adapters = init_adapters(cfg, s.params, rng);
    for (auto& v : s.adapters.image.up.data) v = 0.1;
    const Matrix d1 = matmul(s.adapters.image.up, s.adapters.image.down);
    absorb_adapters(cfg, s, rng);
    for (auto& v : s.adapters.image.up.data) v = -0.3;
    const Matrix d2 = matmul(s.adapters.image.up, s.adapters.image.down);
    absorb_adapters(cfg, s, rng);
    Matrix expect = w0;
    for (std::size_t i = 0; i < expect.data.size(); ++i) expect.data[i] += d1.data[i] + d2.data[i];
    CHECK(max_abs_diff(s.params.image.weight, expect) < 1e-12);

    auto r1 = make_rng(11), r2 = make_rng(11);
    const auto vera = config(MethodKind::vera, 2);
    TrainState v1{s.params, init_adapters(vera, s.params, r1)};
    TrainState v2{s.params, init_adapters(vera, s.params, r2)};
    absorb_adapters(vera, v1, r1);
    absorb_adapters(vera, v2, r2);
    CHECK(v1.adapters == v2.adapters);
    CHECK_THROWS_AS(absorb_adapters(config(MethodKind::full_ft), v1, r1), std::logic_error);
}

TEST_CASE("regularisers switched off match full finetuning exactly") {
    auto rng = make_rng(12);
    TrainState s{testing::random_params(6, 4, rng), {}};
    const auto pool = testing::noisy_pairs("a", 8, 6, 0.5, rng);
    MethodState ms;
    ms.ewc.anchor = model::flatten(s.params);
    ms.ewc.fisher.assign(ms.ewc.anchor.size(), 1.0);
    ms.si.anchor = ms.ewc.anchor;
    ms.si.importance.assign(ms.ewc.anchor.size(), 1.0);
    for (auto& v : ms.ewc.anchor) v += 0.5;
    auto ewc = config(MethodKind::ewc);
    ewc.ewc_lambda = 0.0;
    auto si = config(MethodKind::si);
    si.si_c = 0.0;
    const auto base = compute_objective(config(MethodKind::full_ft), ms, s, testing::pointers(pool));
    CHECK(compute_objective(ewc, ms, s, testing::pointers(pool)).grad == base.grad);
    CHECK(compute_objective(si, ms, s, testing::pointers(pool)).grad == base.grad);
}

TEST_CASE("a stiff EWC penalty pins the Fisher-weighted parameters") {
    auto rng = make_rng(13);
    const auto task1 = testing::noisy_pairs("a", 64, 6, 0.3, rng);
    const auto task2 = testing::noisy_pairs("b", 64, 6, 0.3, rng);
    TrainState s{testing::random_params(6, 4, rng), {}};
    auto data_rng = make_rng(14);
    train(config(MethodKind::full_ft), {}, s, task1, 100, data_rng);
    const Vector anchor = model::flatten(s.params);
    MethodState ms;
    auto fisher_rng = make_rng(15);
    update_fisher(ms.ewc, estimate_fisher(s.params, task1, 10, 16, fisher_rng), anchor);

    auto weighted_distance = [&](const TrainState& x) {
        const Vector th = model::flatten(x.params);
        double sum = 0;
        for (std::size_t k = 0; k < th.size(); ++k) sum += ms.ewc.fisher[k] * (th[k] - anchor[k]) * (th[k] - anchor[k]);
        return std::sqrt(sum);
    };
    TrainState ft = s, ewc = s;
    auto r1 = make_rng(16), r2 = make_rng(16);
    train(config(MethodKind::full_ft), {}, ft, task2, 100, r1);
    auto cfg = config(MethodKind::ewc);
    cfg.ewc_lambda = 1e6;
    train(cfg, ms, ewc, task2, 100, r2);
    const double d_ft = weighted_distance(ft);
    const double d_ewc = weighted_distance(ewc);
    CHECK(d_ft > 0.0);
    CHECK(d_ewc <= 0.1 * d_ft);
}
