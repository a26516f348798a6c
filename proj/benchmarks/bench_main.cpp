#include "prism/client.hpp"
#include "prism/oracle.hpp"
#include "prism/subspace.hpp"
#include "prism/tasks.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace prism;

namespace {

Matrix gaussian(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

void BM_ThinSvdUnion(benchmark::State& state) {
  const Index d = state.range(0);
  const Index k = state.range(1);
  const auto carry = OrthonormalBasis::from_columns(oracle::random_orthonormal(d, k, 1));
  const Spectrum spectrum{Vector::LinSpaced(k, 2.0 * k, 1.0)};
  std::vector<WeightedFactor> factors;
  for (int c = 0; c < 3; ++c) factors.push_back({1.0 / 3.0, {gaussian(d, k, 2 + c)}});
  for (auto _ : state) benchmark::DoNotOptimize(thin_svd_union(carry, spectrum, factors, std::min(2 * k, d)));
}
BENCHMARK(BM_ThinSvdUnion)->Args({32, 4})->Args({64, 8})->Args({128, 16})->Args({256, 32});

void BM_MaterializedUnion(benchmark::State& state) {
  const Index d = state.range(0);
  const Index k = state.range(1);
  const Matrix carry = oracle::random_orthonormal(d, k, 1);
  const Vector spectrum = Vector::LinSpaced(k, 2.0 * k, 1.0);
  std::vector<Matrix> factors;
  for (int c = 0; c < 3; ++c) factors.push_back(gaussian(d, k, 2 + c));
  const std::vector<double> w(3, 1.0 / 3.0);
  for (auto _ : state)
    benchmark::DoNotOptimize(oracle::materialized_union(carry, spectrum, factors, w, std::min(2 * k, d)));
}
BENCHMARK(BM_MaterializedUnion)->Args({32, 4})->Args({64, 8})->Args({128, 16})->Args({256, 32});

void BM_BilateralProject(benchmark::State& state) {
  const Index d = state.range(0);
  const Index k = state.range(1);
  const Index r = 8;
  const auto basis = OrthonormalBasis::from_columns(oracle::random_orthonormal(d, k, 3));
  const Matrix ga = gaussian(r, d, 4);
  const Matrix gb = gaussian(d, r, 5);
  for (auto _ : state) benchmark::DoNotOptimize(bilateral_project(basis, ga, gb, 1.0));
}
BENCHMARK(BM_BilateralProject)->Args({32, 8})->Args({128, 32})->Args({512, 128});

void BM_LocalTrainEpoch(benchmark::State& state) {
  ModelConfig mc;
  mc.dim = state.range(0);
  mc.experts = 4;
  MoeLoraModel model(mc);
  TaskSequenceConfig tc;
  tc.n_tasks = 1;
  tc.dim = mc.dim;
  tc.classes = mc.classes;
  tc.samples_per_task = 200;
  const SampleBatch data = generate_sequence(tc).front().train;
  ExpertBases bases;
  for (Index slot = 0; slot < model.num_adapted(); ++slot) {
    std::vector<OrthonormalBasis> row;
    for (Index e = 0; e < mc.experts; ++e)
      row.push_back(OrthonormalBasis::from_columns(oracle::random_orthonormal(mc.dim, 6, 10 + slot * 4 + e)));
    bases.push_back(row);
  }
  for (auto _ : state) {
    state.PauseTiming();
    ClientState client = make_client(0, model, {}, 7);
    state.ResumeTiming();
    benchmark::DoNotOptimize(local_train_epoch(client, data, bases));
  }
  state.SetItemsProcessed(state.iterations() * data.size());
}
BENCHMARK(BM_LocalTrainEpoch)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
