#pragma once

#include "normgame/network.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <random>
#include <string>

namespace normgame::testing {

/// Random nonnegative weights with zero diagonal; each off-diagonal entry is
/// present with probability `density`. Rows are left unnormalized.
inline Eigen::MatrixXd random_weights(std::mt19937_64& rng, Index n, double density = 0.4, bool no_isolates = true) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i != j && u(rng) < density) W(i, j) = 0.1 + u(rng);
    }
    if (no_isolates && n > 1 && W.row(i).sum() == 0.0) W(i, (i + 1) % n) = 1.0;
  }
  return W;
}

inline Network random_network(std::mt19937_64& rng, Index n, double density = 0.4, bool no_isolates = true) {
  return row_normalize(random_weights(rng, n, density, no_isolates));
}

inline Eigen::VectorXd uniform_vector(std::mt19937_64& rng, Index n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

inline Eigen::MatrixXd normal_matrix(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = z(rng);
  return m;
}

/// [1, N(0,1) ...] covariates.
inline Eigen::MatrixXd design(std::mt19937_64& rng, Index n, Index extra = 1) {
  Eigen::MatrixXd X(n, extra + 1);
  X.col(0).setOnes();
  X.rightCols(extra) = normal_matrix(rng, n, extra);
  return X;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("normgame_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double max_abs(const Eigen::MatrixXd& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

}  // namespace normgame::testing
