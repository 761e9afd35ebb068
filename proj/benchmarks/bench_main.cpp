#include <benchmark/benchmark.h>

#include <random>

#include <forge/let_objective.hpp>
#include <forge/metrics.hpp>
#include <forge/operator_store.hpp>
#include <forge/rng.hpp>
#include <forge/stats.hpp>

using namespace forge;

namespace {

Matrix gaussian(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

void BM_Trustworthiness(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Matrix hi = gaussian(n, 64, 1), lo = gaussian(n, 10, 2);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::trustworthiness(hi, lo, 10));
  state.SetComplexityN(n);
}
BENCHMARK(BM_Trustworthiness)->RangeMultiplier(2)->Range(64, 1024)->Complexity();

void BM_AnchorLossGradient(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0)), D = 64, k = 10;
  let::Params p;
  p.w = gaussian(k, D, 3) * 0.1;
  p.b = Vector::Zero(D);
  p.log_beta = 0.0;
  const Matrix X = gaussian(m, D, 4);
  Matrix T = gaussian(m, m, 5).cwiseAbs();
  T = (T + T.transpose()).eval();
  T.diagonal().setZero();
  let::Params g = p.zeros_like();
  for (auto _ : state) benchmark::DoNotOptimize(let::anchor_loss(p, X, T, 1e-3, &g).total);
}
BENCHMARK(BM_AnchorLossGradient)->Arg(50)->Arg(200)->Arg(800);

void BM_TruncateSvd(benchmark::State& state) {
  const int G = static_cast<int>(state.range(0));
  const auto op = dense_operator(gaussian(G, G, 6));
  for (auto _ : state) benchmark::DoNotOptimize(truncate_svd(op, G / 4));
}
BENCHMARK(BM_TruncateSvd)->Arg(64)->Arg(256)->Arg(512);

void BM_WilcoxonExact(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Vector d = gaussian(n, 1, 7).col(0);
  for (auto _ : state) benchmark::DoNotOptimize(stats::wilcoxon_signed_rank(d).p_value);
}
BENCHMARK(BM_WilcoxonExact)->Arg(12)->Arg(25)->Arg(50);

void BM_BlockedPermutation(benchmark::State& state) {
  const int n = 500;
  const Vector x = gaussian(n, 1, 8).col(0), y = gaussian(n, 1, 9).col(0);
  std::vector<int> blocks(n);
  for (int i = 0; i < n; ++i) blocks[static_cast<std::size_t>(i)] = i % 10;
  auto stat = [&](const IndexList& perm) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x(i) * y(perm[static_cast<std::size_t>(i)]);
    return s;
  };
  for (auto _ : state)
    benchmark::DoNotOptimize(stats::blocked_permutation_p(0.0, stat, blocks, static_cast<int>(state.range(0)), 1));
}
BENCHMARK(BM_BlockedPermutation)->Arg(199)->Arg(1999);

}  // namespace

BENCHMARK_MAIN();
