#pragma once

#include <Eigen/Dense>

#include <limits>

// Inner loops of the geometry module. Every kernel has a plain serial
// reference in kernels::serial and an OpenMP version in kernels. Each output
// row is computed by one thread in the same summation order, so both produce
// bitwise identical results regardless of thread count.
namespace normgame::kernels {

inline constexpr double kNoCutoff = std::numeric_limits<double>::infinity();

namespace serial {
Eigen::MatrixXd propagate(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V);
Eigen::MatrixXd all_pairs_dijkstra(const Eigen::MatrixXd& P, double epsilon0, double cutoff = kNoCutoff);
Eigen::MatrixXd wedge_torsion(const Eigen::MatrixXd& P, const Eigen::MatrixXd& X);
}  // namespace serial

/// P V, row by row.
Eigen::MatrixXd propagate(const Eigen::MatrixXd& P, const Eigen::MatrixXd& V);

/// Shortest-path frictions from every source. Edge length max(0, -log(P_ij + eps0))
/// on P_ij > 0; unreachable pairs and pairs beyond the cutoff are +inf.
Eigen::MatrixXd all_pairs_dijkstra(const Eigen::MatrixXd& P, double epsilon0, double cutoff = kNoCutoff);

/// sum_{j,k} P_ij P_jk |P_ik - P_ij P_jk| X_k, over wedges with P_ij, P_jk > 0.
Eigen::MatrixXd wedge_torsion(const Eigen::MatrixXd& P, const Eigen::MatrixXd& X);

/// Threads the OpenMP kernels will use (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace normgame::kernels
