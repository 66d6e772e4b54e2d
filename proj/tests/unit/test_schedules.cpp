// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "cpt/schedules.hpp"
#include "doctest.h"

using namespace cpt::schedules;

namespace {

ScheduleParams ref() { return ScheduleParams{0.0, 1e-5, 100, 1000, 100, false}; }

MetaState two_tasks(MetaVariant v, std::size_t index) {
    MetaState m = MetaState::uniform(2, 1000, 0.1, 0.1, v);
    m.task_index = index;
    return m;
}

}  // namespace

TEST_CASE("cosine reference points") {
    const auto p = ref();
    CHECK(cosine_lr(0, p) == 0.0);
    CHECK(cosine_lr(50, p) == doctest::Approx(5e-6).epsilon(1e-12));
    CHECK(cosine_lr(100, p) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(cosine_lr(550, p) == doctest::Approx(5e-6).epsilon(1e-12));
    CHECK(std::abs(cosine_lr(1000, p)) < 1e-18);
}

TEST_CASE("rsqrt reference points") {
    const auto p = ref();
    CHECK(rsqrt_lr(100, p) == doctest::Approx(1e-5 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(rsqrt_lr(300, p) == doctest::Approx(5e-6).epsilon(1e-12));
    CHECK(rsqrt_lr(1000, p) == 0.0);
    CHECK(rsqrt_lr(950, p) == doctest::Approx(0.5 * rsqrt_lr(900, p)).epsilon(1e-12));
    auto c = p;
    c.continuous_rsqrt = true;
    CHECK(rsqrt_lr(100, c) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(rsqrt_lr(400, c) == doctest::Approx(5e-6).epsilon(1e-12));
}

TEST_CASE("warmup is exactly linear and every rate lies in [eta_min, eta_max]") {
    auto p = ref();
    p.eta_min = 1e-7;
    for (auto f : {Family::cosine, Family::rsqrt}) {
        for (std::int64_t n = 0; n < p.n_warm; ++n)
            CHECK(base_lr(f, n, p) == doctest::Approx(p.eta_min + n / 100.0 * (p.eta_max - p.eta_min)).epsilon(1e-14));
        for (std::int64_t n = 0; n <= p.n_task; ++n) {
            const double lr = base_lr(f, n, p);
            CHECK(lr >= 0.0);
            CHECK(lr <= p.eta_max * (1 + 1e-12));
        }
    }
}

TEST_CASE("schedule validation") {
    auto p = ref();
    p.n_warm = 0;
    CHECK_THROWS_AS(cosine_lr(10, p), std::domain_error);
    p = ref();
    p.eta_min = 2e-5;
    CHECK_THROWS_AS(cosine_lr(10, p), std::domain_error);
    p = ref();
    p.n_cool = 901;
    CHECK_THROWS_AS(rsqrt_lr(10, p), std::domain_error);
    CHECK_THROWS_AS(cosine_lr(1001, ref()), std::domain_error);
    CHECK_THROWS_AS(cosine_lr(-1, ref()), std::domain_error);
}

TEST_CASE("meta peaks") {
    const auto base = ref();
    CHECK(meta_peak(two_tasks(MetaVariant::autoregressive_cosine, 1), base) == 1e-5);
    const double cos_expected = 0.5e-5 * (1.0 + std::cos(std::numbers::pi * 1000.0 / 1900.0));
    CHECK(meta_peak(two_tasks(MetaVariant::autoregressive_cosine, 2), base) ==
          doctest::Approx(cos_expected).epsilon(1e-12));
    CHECK(cos_expected == doctest::Approx(4.587e-6).epsilon(1e-3));
    CHECK(meta_peak(two_tasks(MetaVariant::autoregressive_rsqrt, 2), base) ==
          doctest::Approx(1e-5 * std::sqrt(100.0) / std::sqrt(1200.0)).epsilon(1e-12));
}

TEST_CASE("continued dynamics reproduce the extended schedule") {
    const auto base = ref();
    // Hypothetical single schedule over 2000 steps, warmed up for 100.
    ScheduleParams hyp = base;
    hyp.n_task = 2000;
    for (auto v : {MetaVariant::continued_dynamic_cosine, MetaVariant::continued_dynamic_rsqrt}) {
        const auto f = family_of(v);
        const auto m2 = two_tasks(v, 2);
        for (std::int64_t n = 100; n <= 1000; n += 10) {
            CAPTURE(n);
            CHECK(meta_lr(m2, n, base) == doctest::Approx(base_lr(f, 1000 + n, hyp)).epsilon(1e-12));
        }
        // Re-warmup ramps linearly to the peak.
        CHECK(meta_lr(m2, 50, base) == doctest::Approx(0.5 * meta_peak(m2, base)).epsilon(1e-12));
    }
}

TEST_CASE("autoregressive peaks strictly decrease") {
    const auto base = ref();
    for (auto v : {MetaVariant::autoregressive_cosine, MetaVariant::autoregressive_rsqrt,
                   MetaVariant::continued_dynamic_cosine, MetaVariant::continued_dynamic_rsqrt,
                   MetaVariant::peaks_match_rsqrt}) {
        MetaState m = MetaState::uniform(10, 500, 0.1, 0.1, v);
        double prev = 2.0 * base.eta_max;
        for (std::size_t t = 1; t <= 10; ++t) {
            m.task_index = t;
            double peak = 0.0;
            for (std::int64_t n = 0; n <= 500; ++n) peak = std::max(peak, meta_lr(m, n, base));
            CAPTURE(to_string(v));
            CAPTURE(t);
            CHECK(peak < prev);
            CHECK(peak <= base.eta_max * (1 + 1e-12));
            prev = peak;
        }
    }
}

TEST_CASE("independent variants restart every task") {
    const auto base = ref();
    MetaState m = MetaState::uniform(5, 1000, 0.1, 0.1, MetaVariant::independent_cosine);
    for (std::size_t t = 1; t <= 5; ++t) {
        m.task_index = t;
        CHECK(meta_lr(m, 100, base) == doctest::Approx(1e-5).epsilon(1e-12));
        CHECK(meta_lr(m, 550, base) == doctest::Approx(cosine_lr(550, base)).epsilon(1e-12));
    }
}

TEST_CASE("variant names round trip") {
    for (auto v : {MetaVariant::independent_cosine, MetaVariant::independent_rsqrt, MetaVariant::autoregressive_cosine,
                   MetaVariant::continued_dynamic_cosine, MetaVariant::autoregressive_rsqrt,
                   MetaVariant::continued_dynamic_rsqrt, MetaVariant::peaks_match_rsqrt})
        CHECK(parse_variant(to_string(v)) == v);
    CHECK_THROWS_AS(parse_variant("linear"), std::invalid_argument);
}

TEST_CASE("warmup and cooldown lengths") {
    CHECK(warmup_steps(1000, 0.1) == 100);
    CHECK(warmup_steps(3, 0.1) == 1);
    CHECK(warmup_steps(2, 0.9) == 1);
    CHECK(cooldown_steps(1000, 100, 0.1) == 100);
    CHECK(cooldown_steps(10, 9, 0.5) == 1);
    CHECK_THROWS_AS(warmup_steps(1, 0.1), std::domain_error);
}
