// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "cpt/engine.hpp"
#include "cpt/streams.hpp"
#include "fixtures.hpp"
#include "toy_config.hpp"

using namespace cpt;

static void BM_LossAndGrad(benchmark::State& state) {
    auto rng = make_rng(1);
    const auto p = testing::random_params(32, 16, rng);
    const auto pool = testing::noisy_pairs("a", static_cast<std::size_t>(state.range(0)), 32, 0.5, rng);
    const auto batch = testing::pointers(pool);
    model::ParamSet g;
    for (auto _ : state) benchmark::DoNotOptimize(model::loss_and_grad(p, batch, &g).loss);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LossAndGrad)->Arg(32)->Arg(128)->Arg(512);

static void BM_SampleBatch(benchmark::State& state) {
    auto rng = make_rng(2);
    const auto pre = testing::noisy_pairs("p", 2000, 32, 0.5, rng, mixture::PoolTag::pretrain);
    const auto upd = testing::noisy_pairs("u", 500, 32, 0.5, rng);
    mixture::Buffer buf;
    buf.add(testing::noisy_pairs("b", 5000, 32, 0.5, rng));
    for (auto _ : state)
        benchmark::DoNotOptimize(mixture::sample_batch(pre, upd, buf, {}, 512, rng).samples.data());
}
BENCHMARK(BM_SampleBatch);

static void BM_SimilarityPath(benchmark::State& state) {
    auto rng = make_rng(3);
    const auto m = testing::random_similarity(static_cast<std::size_t>(state.range(0)), rng);
    for (auto _ : state) benchmark::DoNotOptimize(streams::similarity_path(m).data());
}
BENCHMARK(BM_SimilarityPath)->Arg(40)->Arg(200);

static void BM_RunStream(benchmark::State& state) {
    auto cfg = testing::toy_config();
    cfg.stream.num_tasks = 2;
    cfg.budget.total_gflops = 2e6;
    const auto world = engine::make_world(cfg);
    const auto plan = engine::make_plan(cfg, world);
    for (auto _ : state) benchmark::DoNotOptimize(engine::run_stream(cfg, world, plan).records.size());
}
BENCHMARK(BM_RunStream)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
