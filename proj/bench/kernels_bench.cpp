// Serial reference vs OpenMP kernels on random row-stochastic operators.
#include "normgame/kernels.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

using Index = Eigen::Index;
namespace k = normgame::kernels;

Eigen::MatrixXd operator_matrix(Index n) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  const double density = std::min(1.0, 8.0 / static_cast<double>(n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j)
      if (i != j && u(rng) < density) P(i, j) = u(rng);
    if (P.row(i).sum() == 0.0) P(i, (i + 1) % n) = 1.0;
    P.row(i) /= P.row(i).sum();
  }
  return P;
}

Eigen::MatrixXd covariates(Index n) {
  std::mt19937_64 rng(18);
  std::normal_distribution<double> z;
  Eigen::MatrixXd X(n, 3);
  for (Index i = 0; i < X.size(); ++i) X.data()[i] = z(rng);
  return X;
}

template <Eigen::MatrixXd (*F)(const Eigen::MatrixXd&, const Eigen::MatrixXd&)>
void pair_kernel(benchmark::State& state) {
  const Index n = state.range(0);
  const Eigen::MatrixXd P = operator_matrix(n), X = covariates(n);
  for (auto _ : state) benchmark::DoNotOptimize(F(P, X));
  state.SetComplexityN(n);
}

template <Eigen::MatrixXd (*F)(const Eigen::MatrixXd&, double, double)>
void dijkstra(benchmark::State& state) {
  const Eigen::MatrixXd P = operator_matrix(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(F(P, 1e-8, k::kNoCutoff));
}

}  // namespace

BENCHMARK(pair_kernel<k::serial::propagate>)->Name("propagate/serial")->RangeMultiplier(2)->Range(64, 1024);
BENCHMARK(pair_kernel<k::propagate>)->Name("propagate/omp")->RangeMultiplier(2)->Range(64, 1024);
BENCHMARK(dijkstra<k::serial::all_pairs_dijkstra>)->Name("dijkstra/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(dijkstra<k::all_pairs_dijkstra>)->Name("dijkstra/omp")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(pair_kernel<k::serial::wedge_torsion>)->Name("torsion/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(pair_kernel<k::wedge_torsion>)->Name("torsion/omp")->RangeMultiplier(2)->Range(32, 256);

BENCHMARK_MAIN();
