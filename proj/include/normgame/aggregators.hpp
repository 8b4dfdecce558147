#pragma once

#include "normgame/network.hpp"

#include <optional>
#include <string>
#include <vector>

namespace normgame {

enum class Family { LIM, CES, SmoothMax, Quantile };

std::string to_string(Family f);
Family parse_family(const std::string& name);  // "lim", "ces", "smoothmax"/"sm", "quantile"

/// theta is beta (CES), kappa (SmoothMax) or q (Quantile); ignored for LIM.
/// shift is the positivity shift c added inside CES and subtracted again.
struct AggregatorSpec {
  Family family = Family::LIM;
  double theta = 1.0;
  double shift = 0.0;

  static AggregatorSpec lim() { return {Family::LIM, 1.0, 0.0}; }
  static AggregatorSpec ces(double beta, double c = 0.0) { return {Family::CES, beta, c}; }
  static AggregatorSpec smooth_max(double kappa) { return {Family::SmoothMax, kappa, 0.0}; }
  static AggregatorSpec quantile(double q) { return {Family::Quantile, q, 0.0}; }

  bool has_theta() const { return family != Family::LIM; }
  bool smooth() const { return family != Family::Quantile; }
  AggregatorSpec with_theta(double t) const {
    AggregatorSpec s = *this;
    s.theta = t;
    return s;
  }
  /// Throws DomainError when theta or shift is outside the family's domain.
  void validate() const;
  /// True when t is an admissible theta for this family.
  bool theta_in_domain(double t) const;
};

/// max(0, 1 - min(actions)): puts every shifted action at or above 1.
double default_shift(const Eigen::VectorXd& actions);

struct ExposureVector {
  Eigen::VectorXd values;          // 0 where undefined
  std::vector<bool> defined_mask;  // false on isolates
};

ExposureVector exposure(const Network& net, const Eigen::VectorXd& actions, const AggregatorSpec& spec);

/// dPhi_i/da_j. LIM, CES and SmoothMax only.
Eigen::MatrixXd jacobian(const Network& net, const Eigen::VectorXd& actions, const AggregatorSpec& spec);

/// One-hot subgradient selection at the weighted q-quantile; ties share the unit weight.
Eigen::MatrixXd quantile_influence(const Network& net, const Eigen::VectorXd& actions, double q);

struct ThetaDerivative {
  Eigen::VectorXd values;
  bool one_sided = false;
  std::optional<std::string> warning;
};

/// Central difference in theta with h = step * max(1, |theta|). Falls back to
/// a one-sided difference if theta - h or theta + h leaves the domain.
/// Quantile is refused unless allow_quantile is set.
ThetaDerivative dtheta_exposure(const Network& net, const Eigen::VectorXd& actions, const AggregatorSpec& spec,
                                double step = 1e-4, bool allow_quantile = false);

namespace detail {
// Weighted left-continuous q-quantile of (values, weights) over entries with positive weight.
double weighted_quantile(const std::vector<double>& values, const std::vector<double>& weights, double q);
}  // namespace detail

}  // namespace normgame
