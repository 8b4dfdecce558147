#include "normgame/aggregators.hpp"

#include "normgame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace normgame {

std::string to_string(Family f) {
  switch (f) {
    case Family::LIM: return "lim";
    case Family::CES: return "ces";
    case Family::SmoothMax: return "smoothmax";
    case Family::Quantile: return "quantile";
  }
  return "?";
}

Family parse_family(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (s == "lim" || s == "linear") return Family::LIM;
  if (s == "ces") return Family::CES;
  if (s == "smoothmax" || s == "smooth-max" || s == "sm") return Family::SmoothMax;
  if (s == "quantile" || s == "median") return Family::Quantile;
  throw std::invalid_argument("unknown aggregator family '" + name + "'");
}

bool AggregatorSpec::theta_in_domain(double t) const {
  if (!std::isfinite(t)) return false;
  switch (family) {
    case Family::LIM: return true;
    case Family::CES: return t != 0.0;
    case Family::SmoothMax: return t > 0.0;
    case Family::Quantile: return t > 0.0 && t < 1.0;
  }
  return false;
}

void AggregatorSpec::validate() const {
  if (!theta_in_domain(theta)) {
    const char* need = family == Family::CES         ? "beta != 0"
                       : family == Family::SmoothMax ? "kappa > 0"
                                                     : "0 < q < 1";
    throw DomainError(to_string(family) + ": theta = " + std::to_string(theta) + " violates " + need);
  }
  if (!(shift >= 0.0) || !std::isfinite(shift)) {
    throw DomainError("positivity shift must be finite and nonnegative, got " + std::to_string(shift));
  }
}

double default_shift(const Eigen::VectorXd& actions) {
  if (actions.size() == 0) return 0.0;
  return std::max(0.0, 1.0 - actions.minCoeff());
}

namespace detail {

double weighted_quantile(const std::vector<double>& values, const std::vector<double>& weights, double q) {
  std::vector<std::size_t> order;
  double total = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (weights[k] > 0.0) {
      order.push_back(k);
      total += weights[k];
    }
  }
  if (order.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  const double target = q * total * (1.0 - 1e-12);
  double cum = 0.0;
  for (std::size_t k : order) {
    cum += weights[k];
    if (cum >= target) return values[k];
  }
  return values[order.back()];
}

}  // namespace detail

namespace {

void check_actions(const Network& net, const Eigen::VectorXd& a) {
  if (a.size() != net.size()) {
    throw std::invalid_argument("actions have length " + std::to_string(a.size()) + ", network has " +
                                std::to_string(net.size()) + " nodes");
  }
  for (Index j = 0; j < a.size(); ++j) {
    if (!std::isfinite(a(j))) throw DomainError("non-finite action at node " + std::to_string(j));
  }
}

// Stable power mean: scale by the extreme shifted argument so the dominant
// term is exactly 1. A row with a single peer then returns that peer exactly.
double ces_row(const Network& net, const Eigen::VectorXd& a, Index i, double beta, double c) {
  const Index n = net.size();
  double scale = beta > 0 ? 0.0 : std::numeric_limits<double>::infinity();
  for (Index j = 0; j < n; ++j) {
    if (net.weights(i, j) <= 0.0) continue;
    const double s = a(j) + c;
    if (!(s > 0.0)) {
      throw DomainError("CES argument a + c = " + std::to_string(s) + " <= 0 at node " + std::to_string(j) +
                        " (peer of node " + std::to_string(i) + ")");
    }
    scale = beta > 0 ? std::max(scale, s) : std::min(scale, s);
  }
  double acc = 0.0;
  for (Index j = 0; j < n; ++j) {
    const double g = net.weights(i, j);
    if (g <= 0.0) continue;
    acc += g * std::pow((a(j) + c) / scale, beta);
  }
  return scale * std::pow(acc, 1.0 / beta);
}

double smooth_max_row(const Network& net, const Eigen::VectorXd& a, Index i, double kappa) {
  double m = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < net.size(); ++j) {
    if (net.weights(i, j) > 0.0) m = std::max(m, a(j));
  }
  double acc = 0.0;
  for (Index j = 0; j < net.size(); ++j) {
    const double g = net.weights(i, j);
    if (g > 0.0) acc += g * std::exp(kappa * (a(j) - m));
  }
  return m + std::log(acc) / kappa;
}

double quantile_row(const Network& net, const Eigen::VectorXd& a, Index i, double q) {
  std::vector<double> vals;
  std::vector<double> w;
  for (Index j = 0; j < net.size(); ++j) {
    if (net.weights(i, j) > 0.0) {
      vals.push_back(a(j));
      w.push_back(net.weights(i, j));
    }
  }
  return detail::weighted_quantile(vals, w, q);
}

}  // namespace

ExposureVector exposure(const Network& net, const Eigen::VectorXd& actions, const AggregatorSpec& spec) {
  spec.validate();
  check_actions(net, actions);
  const Index n = net.size();
  ExposureVector out;
  out.values = Eigen::VectorXd::Zero(n);
  out.defined_mask.assign(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < n; ++i) {
    if (net.is_isolate(i)) continue;
    double v = 0.0;
    switch (spec.family) {
      case Family::LIM: v = net.weights.row(i).dot(actions); break;
      case Family::CES: v = ces_row(net, actions, i, spec.theta, spec.shift) - spec.shift; break;
      case Family::SmoothMax: v = smooth_max_row(net, actions, i, spec.theta); break;
      case Family::Quantile: v = quantile_row(net, actions, i, spec.theta); break;
    }
    out.values(i) = v;
    out.defined_mask[static_cast<std::size_t>(i)] = true;
  }
  return out;
}

Eigen::MatrixXd jacobian(const Network& net, const Eigen::VectorXd& actions, const AggregatorSpec& spec) {
  spec.validate();
  check_actions(net, actions);
  if (spec.family == Family::Quantile) {
    throw UnsupportedOperation("quantile exposure is not differentiable; use quantile_influence");
  }
  if (spec.family == Family::LIM) return net.weights;

  const Index n = net.size();
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    if (net.is_isolate(i)) continue;
    if (spec.family == Family::CES) {
      const double beta = spec.theta;
      const double phi_c = ces_row(net, actions, i, beta, spec.shift);
      for (Index j = 0; j < n; ++j) {
        const double g = net.weights(i, j);
        if (g > 0.0) W(i, j) = g * std::pow((actions(j) + spec.shift) / phi_c, beta - 1.0);
      }
    } else {
      const double kappa = spec.theta;
      double m = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < n; ++j) {
        if (net.weights(i, j) > 0.0) m = std::max(m, actions(j));
      }
      double total = 0.0;
      for (Index j = 0; j < n; ++j) {
        const double g = net.weights(i, j);
        if (g > 0.0) {
          W(i, j) = g * std::exp(kappa * (actions(j) - m));
          total += W(i, j);
        }
      }
      W.row(i) /= total;
    }
  }
  return W;
}

Eigen::MatrixXd quantile_influence(const Network& net, const Eigen::VectorXd& actions, double q) {
  AggregatorSpec::quantile(q).validate();
  check_actions(net, actions);
  const Index n = net.size();
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    if (net.is_isolate(i)) continue;
    const double t = quantile_row(net, actions, i, q);
    std::vector<Index> hits;
    for (Index j = 0; j < n; ++j) {
      if (net.weights(i, j) > 0.0 && actions(j) == t) hits.push_back(j);
    }
    for (Index j : hits) W(i, j) = 1.0 / static_cast<double>(hits.size());
  }
  return W;
}

ThetaDerivative dtheta_exposure(const Network& net, const Eigen::VectorXd& actions, const AggregatorSpec& spec,
                                double step, bool allow_quantile) {
  if (spec.family == Family::LIM) throw UnsupportedOperation("LIM has no preference parameter");
  if (spec.family == Family::Quantile && !allow_quantile) {
    throw UnsupportedOperation("quantile theta-derivative is off unless explicitly requested");
  }
  if (!(step > 0.0)) throw DomainError("finite-difference step must be positive");
  spec.validate();
  const double t = spec.theta;
  const double h = step * std::max(1.0, std::abs(t));
  const bool up_ok = spec.theta_in_domain(t + h);
  const bool down_ok = spec.theta_in_domain(t - h);

  ThetaDerivative out;
  if (up_ok && down_ok) {
    const auto hi = exposure(net, actions, spec.with_theta(t + h));
    const auto lo = exposure(net, actions, spec.with_theta(t - h));
    out.values = (hi.values - lo.values) / (2.0 * h);
    return out;
  }
  const auto mid = exposure(net, actions, spec);
  out.one_sided = true;
  if (up_ok) {
    out.values = (exposure(net, actions, spec.with_theta(t + h)).values - mid.values) / h;
    out.warning = "theta - h leaves the domain; forward difference used";
  } else if (down_ok) {
    out.values = (mid.values - exposure(net, actions, spec.with_theta(t - h)).values) / h;
    out.warning = "theta + h leaves the domain; backward difference used";
  } else {
    throw DomainError("no admissible finite-difference stencil around theta = " + std::to_string(t));
  }
  return out;
}

}  // namespace normgame
