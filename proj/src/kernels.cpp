#include "normgame/kernels.hpp"

#include <cmath>
#include <queue>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace normgame::kernels {

using Eigen::Index;

namespace {

struct Adjacency {
  std::vector<Index> start;  // CSR row pointers
  std::vector<Index> col;
  std::vector<double> len;
};

Adjacency friction_graph(const Eigen::MatrixXd& P, double epsilon0) {
  const Index n = P.rows();
  Adjacency adj;
  adj.start.assign(static_cast<std::size_t>(n) + 1, 0);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j || !(P(i, j) > 0.0)) continue;
      adj.col.push_back(j);
      adj.len.push_back(std::max(0.0, -std::log(P(i, j) + epsilon0)));
    }
    adj.start[static_cast<std::size_t>(i) + 1] = static_cast<Index>(adj.col.size());
  }
  return adj;
}

void dijkstra_row(const Adjacency& adj, Index src, double cutoff, double* out, Index n) {
  const double inf = std::numeric_limits<double>::infinity();
  for (Index j = 0; j < n; ++j) out[j] = inf;
  out[src] = 0.0;
  using Item = std::pair<double, Index>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.emplace(0.0, src);
  while (!heap.empty()) {
    const auto [d, u] = heap.top();
    heap.pop();
    if (d > out[u]) continue;
    for (Index e = adj.start[static_cast<std::size_t>(u)]; e < adj.start[static_cast<std::size_t>(u) + 1]; ++e) {
      const Index v = adj.col[static_cast<std::size_t>(e)];
      const double nd = d + adj.len[static_cast<std::size_t>(e)];
      if (nd < out[v] && nd <= cutoff) {
        out[v] = nd;
        heap.emplace(nd, v);
      }
    }
  }
}

void propagate_row(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V, Eigen::MatrixXd& out, Index i) {
  const Index n = P.cols();
  for (Index c = 0; c < V.cols(); ++c) {
    double acc = 0.0;
    for (Index j = 0; j < n; ++j) {
      const double p = P(i, j);
      if (p != 0.0) acc += p * V(j, c);
    }
    out(i, c) = acc;
  }
}

void torsion_row(const Eigen::MatrixXd& P, const Eigen::MatrixXd& X, Eigen::MatrixXd& out, Index i) {
  const Index n = P.rows();
  for (Index c = 0; c < X.cols(); ++c) out(i, c) = 0.0;
  for (Index j = 0; j < n; ++j) {
    const double pij = P(i, j);
    if (!(pij > 0.0)) continue;
    for (Index k = 0; k < n; ++k) {
      const double pjk = P(j, k);
      if (!(pjk > 0.0)) continue;
      const double two = pij * pjk;
      const double w = two * std::abs(P(i, k) - two);
      if (w == 0.0) continue;
      for (Index c = 0; c < X.cols(); ++c) out(i, c) += w * X(k, c);
    }
  }
}

}  // namespace

namespace serial {

Eigen::MatrixXd propagate(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V) {
  Eigen::MatrixXd out(P.rows(), V.cols());
  for (Index i = 0; i < P.rows(); ++i) propagate_row(P, V, out, i);
  return out;
}

Eigen::MatrixXd all_pairs_dijkstra(const Eigen::MatrixXd& P, double epsilon0, double cutoff) {
  const Index n = P.rows();
  const Adjacency adj = friction_graph(P, epsilon0);
  // Row-major scratch so each source writes a contiguous row.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> D(n, n);
  for (Index s = 0; s < n; ++s) dijkstra_row(adj, s, cutoff, D.row(s).data(), n);
  return D;
}

Eigen::MatrixXd wedge_torsion(const Eigen::MatrixXd& P, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd out(P.rows(), X.cols());
  for (Index i = 0; i < P.rows(); ++i) torsion_row(P, X, out, i);
  return out;
}

}  // namespace serial

Eigen::MatrixXd propagate(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V) {
  Eigen::MatrixXd out(P.rows(), V.cols());
  const Index n = P.rows();
#pragma omp parallel for schedule(static) if (n > 64)
  for (Index i = 0; i < n; ++i) propagate_row(P, V, out, i);
  return out;
}

Eigen::MatrixXd all_pairs_dijkstra(const Eigen::MatrixXd& P, double epsilon0, double cutoff) {
  const Index n = P.rows();
  const Adjacency adj = friction_graph(P, epsilon0);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> D(n, n);
#pragma omp parallel for schedule(dynamic, 4) if (n > 32)
  for (Index s = 0; s < n; ++s) dijkstra_row(adj, s, cutoff, D.row(s).data(), n);
  return D;
}

Eigen::MatrixXd wedge_torsion(const Eigen::MatrixXd& P, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd out(P.rows(), X.cols());
  const Index n = P.rows();
#pragma omp parallel for schedule(dynamic, 8) if (n > 32)
  for (Index i = 0; i < n; ++i) torsion_row(P, X, out, i);
  return out;
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace normgame::kernels
