#pragma once

#include "normgame/aggregators.hpp"
#include "normgame/network.hpp"

#include <optional>

namespace normgame {

struct StructuralParams {
  Eigen::VectorXd gamma;
  double lambda = 0.0;
  Eigen::VectorXd group_effects;  // one per group; empty means zero
  double sigma_eps = 1.0;
  AggregatorSpec aggregator;
};

struct SolveReport {
  int iterations = 0;
  double final_residual = 0.0;  // relative sup-norm change at the last step
  bool converged = false;
  bool damped = false;
  std::optional<double> contraction_bound;
  bool uniqueness_certified = false;
};

struct SolveOptions {
  double tol = 1e-10;
  int max_iter = 500;
  std::optional<Eigen::VectorXd> init;  // defaults to X gamma
  int damping_trigger = 100;           // non-monotone steps before damping kicks in
  double damping = 0.5;
};

struct EquilibriumResult {
  Eigen::VectorXd y;
  SolveReport report;
};

/// Fixed-point iteration y <- X gamma + lambda Phi(y) + zeta + eps, group by
/// group. The report aggregates groups: iterations is the maximum, the
/// residual the worst, converged only if every group converged.
EquilibriumResult solve_equilibrium(const Panel& panel, const StructuralParams& params, const Eigen::VectorXd& shocks,
                                    const SolveOptions& options = {});

/// |lambda| L_Phi, with L_Phi = 1 for LIM, SmoothMax and Quantile and
/// (hi/lo)^|beta-1| for CES on shifted actions in [lo, hi].
double contraction_bound(const StructuralParams& params, double lower, double upper);

/// Shift that keeps every CES argument of the iteration at or above 1, using
/// the a-priori bound |y| <= max(|y0|, |base| / (1 - |lambda|)).
double equilibrium_shift(const Eigen::VectorXd& base, const Eigen::VectorXd& y0, double lambda);

struct LogitResult {
  Eigen::VectorXd p;
  SolveReport report;
};

/// p = Lambda(X gamma + J Phi_SM(p)); certificate attached when |J| / 4 < 1.
LogitResult logit_fixed_point(const Panel& panel, const Eigen::VectorXd& gamma, double J, const AggregatorSpec& spec,
                              double tol = 1e-10, int max_iter = 500);

}  // namespace normgame
