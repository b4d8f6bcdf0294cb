// Benchmarks the serial reference kernels against their OpenMP
// counterparts, plus the per-sample batch gradient path both ways.
// Build target: sermtl_bench.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "sermtl/data.hpp"
#include "sermtl/kernels.hpp"
#include "sermtl/rng.hpp"
#include "sermtl/trainer.hpp"

namespace {

using namespace sermtl;

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  auto eng = make_engine(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = unif(eng);
  return v;
}

void bm_matmul_serial(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 1);
  const auto b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    kernels::matmul_serial(a.data(), b.data(), c.data(), n, n, n);
    benchmark::ClobberMemory();
  }
}
BENCHMARK(bm_matmul_serial)->Arg(32)->Arg(128)->Arg(256);

void bm_matmul_omp(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const auto a = random_buffer(n * n, 1);
  const auto b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    kernels::matmul_omp(a.data(), b.data(), c.data(), n, n, n);
    benchmark::ClobberMemory();
  }
}
BENCHMARK(bm_matmul_omp)->Arg(32)->Arg(128)->Arg(256);

struct BatchFixture {
  std::vector<Utterance> corpus;
  TrainConfig cfg;
  ModelParams params;
  std::vector<long> counts;
  std::vector<const Utterance*> batch;
  std::vector<std::size_t> keys;

  BatchFixture() {
    GeneratorConfig gen;
    gen.n_utterances = 32;
    gen.n_speakers = 6;
    gen.n_layers = 4;
    gen.t_min = 12;
    gen.t_max = 16;
    gen.feature_dim = 24;
    gen.seed = 3;
    corpus = generate_corpus(gen);
    corpus.resize(16);
    cfg = desk_config();
    params = init_params(infer_dims(corpus), cfg);
    counts = emotion_counts(corpus);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      batch.push_back(&corpus[i]);
      keys.push_back(i);
    }
  }
};

void bm_batch_gradients_serial(benchmark::State& state) {
  static BatchFixture fx;
  for (auto _ : state) {
    auto r = batch_gradients(fx.params, fx.batch, fx.keys, fx.cfg, fx.counts,
                             0, false);
    benchmark::DoNotOptimize(r.losses.total);
  }
}
BENCHMARK(bm_batch_gradients_serial);

void bm_batch_gradients_parallel(benchmark::State& state) {
  static BatchFixture fx;
  for (auto _ : state) {
    auto r = batch_gradients(fx.params, fx.batch, fx.keys, fx.cfg, fx.counts,
                             0, true);
    benchmark::DoNotOptimize(r.losses.total);
  }
}
BENCHMARK(bm_batch_gradients_parallel);

}  // namespace

BENCHMARK_MAIN();
