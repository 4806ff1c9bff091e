#include <benchmark/benchmark.h>

#include <random>

#include "fedcspc/autodiff.hpp"
#include "fedcspc/client.hpp"
#include "fedcspc/data.hpp"
#include "fedcspc/model.hpp"
#include "fedcspc/prototype.hpp"
#include "fedcspc/server.hpp"

using namespace fedcspc;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = g(rng);
    return t;
}

std::vector<double> random_vector(std::size_t dim, std::uint64_t seed) {
    auto t = random_matrix(1, dim, seed);
    return {t.data().begin(), t.data().end()};
}

ModelConfig bench_arch() {
    ModelConfig c;
    c.input_dim = 32;
    c.encoder_hidden = {64};
    c.feature_dim = 32;
    c.head_hidden = {32};
    c.embed_dim = 16;
    c.class_count = 8;
    return c;
}

void BM_MatmulBackward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : state) {
        auto x = ad::parameter(a), y = ad::parameter(b);
        auto g = ad::backward(ad::sum(ad::matmul(x, y)));
        benchmark::DoNotOptimize(g.of(x).data().data());
    }
}
BENCHMARK(BM_MatmulBackward)->Arg(16)->Arg(64);

void BM_KmeansBestOf(benchmark::State& state) {
    Tensor pts = random_matrix(static_cast<std::size_t>(state.range(0)), 32, 3);
    for (auto _ : state) benchmark::DoNotOptimize(kmeans_best_of(pts, 3, 7, 10).inertia);
}
BENCHMARK(BM_KmeansBestOf)->Arg(50)->Arg(250);

void BM_ClientEpoch(benchmark::State& state) {
    auto data = make_synthetic({8, 32, 25, 1.0, 1});
    auto model = init_model(bench_arch(), 1);
    ClientHyper hp;
    hp.epochs = 1;
    hp.align = state.range(0) != 0;
    GlobalPrototypeSet globals;
    for (ClassId c = 0; c < 8; ++c) globals[c] = random_vector(32, 10 + c);
    for (auto _ : state) {
        auto u = train_client(model, data, hp.align ? &globals : nullptr, hp, 0, 5);
        benchmark::DoNotOptimize(u.sample_count);
    }
}
BENCHMARK(BM_ClientEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_CalibrateRound(benchmark::State& state) {
    auto model = init_model(bench_arch(), 2);
    std::vector<Prototype> pool;
    std::mt19937_64 rng(4);
    for (ClientId k = 0; k < 10; ++k)
        for (ClassId c = 0; c < 8; ++c)
            for (std::size_t t = 0; t < 2; ++t) pool.push_back({random_vector(32, rng()), c, k, 0, t});
    ServerHyper hp;
    hp.epochs = 1;
    for (auto _ : state) benchmark::DoNotOptimize(calibrate(model, pool, hp, 3).trace.size());
}
BENCHMARK(BM_CalibrateRound)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
