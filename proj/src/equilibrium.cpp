#include "normgame/equilibrium.hpp"

#include "normgame/errors.hpp"

#include <algorithm>
#include <cmath>

namespace normgame {

namespace {

double rel_change(const Eigen::VectorXd& next, const Eigen::VectorXd& prev) {
  const double denom = prev.lpNorm<Eigen::Infinity>();
  const double diff = (next - prev).lpNorm<Eigen::Infinity>();
  return denom > 0.0 ? diff / denom : diff;
}

struct GroupSolve {
  Eigen::VectorXd y;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
  bool damped = false;
};

GroupSolve solve_group(const Network& net, const Eigen::VectorXd& base, const Eigen::VectorXd& y0, double lambda,
                       const AggregatorSpec& spec, const SolveOptions& opt) {
  GroupSolve out;
  if (lambda == 0.0) {
    out.y = base;
    out.iterations = 1;
    out.converged = true;
    return out;
  }
  Eigen::VectorXd y = y0;
  double prev_res = std::numeric_limits<double>::infinity();
  int non_monotone = 0;
  double step = 1.0;
  for (int t = 1; t <= opt.max_iter; ++t) {
    Eigen::VectorXd next;
    try {
      next = base + lambda * exposure(net, y, spec).values;
    } catch (const DomainError& e) {
      throw DomainError("iteration " + std::to_string(t) + ": " + e.what());
    }
    if (step < 1.0) next = (1.0 - step) * y + step * next;
    const double res = rel_change(next, y);
    y = std::move(next);
    out.iterations = t;
    out.residual = res;
    if (!std::isfinite(res)) break;
    if (res <= opt.tol) {
      out.converged = true;
      break;
    }
    if (res > prev_res) ++non_monotone;
    prev_res = res;
    if (step == 1.0 && non_monotone >= opt.damping_trigger) {
      step = opt.damping;
      out.damped = true;
    }
  }
  out.y = std::move(y);
  return out;
}

}  // namespace

double equilibrium_shift(const Eigen::VectorXd& base, const Eigen::VectorXd& y0, double lambda) {
  if (base.size() == 0) return 0.0;
  const double l = std::abs(lambda);
  if (l >= 1.0) return default_shift(y0);
  const double R = std::max(y0.lpNorm<Eigen::Infinity>(), base.lpNorm<Eigen::Infinity>() / (1.0 - l));
  const double lowest = std::min(y0.minCoeff(), base.minCoeff() - l * R);
  return std::max(0.0, 1.0 - lowest);
}

EquilibriumResult solve_equilibrium(const Panel& panel, const StructuralParams& params, const Eigen::VectorXd& shocks,
                                    const SolveOptions& options) {
  if (!(options.tol > 0.0)) throw std::invalid_argument("solve_equilibrium: tol must be positive");
  if (!(params.sigma_eps >= 0.0)) throw std::invalid_argument("solve_equilibrium: sigma_eps must be nonnegative");
  if (params.gamma.size() != panel.num_covariates()) {
    throw std::invalid_argument("solve_equilibrium: gamma has " + std::to_string(params.gamma.size()) +
                                " entries for " + std::to_string(panel.num_covariates()) + " covariates");
  }
  if (shocks.size() != panel.num_nodes()) throw std::invalid_argument("solve_equilibrium: shock length mismatch");
  if (params.group_effects.size() != 0 && params.group_effects.size() != static_cast<Index>(panel.num_groups())) {
    throw std::invalid_argument("solve_equilibrium: one group effect per group required");
  }
  params.aggregator.validate();

  const Eigen::VectorXd xg = panel.X * params.gamma;
  Eigen::VectorXd base = xg + shocks;
  if (params.group_effects.size() != 0) {
    for (std::size_t g = 0; g < panel.num_groups(); ++g) {
      base.segment(panel.offsets[g], panel.group_size(g)).array() += params.group_effects(static_cast<Index>(g));
    }
  }
  if (options.init && options.init->size() != panel.num_nodes()) {
    throw std::invalid_argument("solve_equilibrium: init length mismatch");
  }
  const Eigen::VectorXd& y0 = options.init ? *options.init : xg;

  EquilibriumResult result;
  result.y.resize(panel.num_nodes());
  result.report.converged = true;
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    const Index off = panel.offsets[g];
    const Index n = panel.group_size(g);
    GroupSolve gs;
    try {
      gs = solve_group(panel.groups[g], base.segment(off, n), y0.segment(off, n), params.lambda, params.aggregator,
                       options);
    } catch (const DomainError& e) {
      throw DomainError("group " + panel.group_labels[g] + ", " + e.what());
    }
    result.y.segment(off, n) = gs.y;
    result.report.iterations = std::max(result.report.iterations, gs.iterations);
    result.report.final_residual = std::max(result.report.final_residual, gs.residual);
    result.report.converged = result.report.converged && gs.converged;
    result.report.damped = result.report.damped || gs.damped;
  }

  if (params.aggregator.family == Family::CES) {
    const double c = params.aggregator.shift;
    const double lo = result.y.minCoeff() + c;
    const double hi = result.y.maxCoeff() + c;
    if (lo > 0.0 && hi > lo) result.report.contraction_bound = contraction_bound(params, lo, hi);
    else if (lo > 0.0) result.report.contraction_bound = std::abs(params.lambda);
  } else {
    result.report.contraction_bound = std::abs(params.lambda);
  }
  result.report.uniqueness_certified = result.report.contraction_bound && *result.report.contraction_bound < 1.0;
  return result;
}

double contraction_bound(const StructuralParams& params, double lower, double upper) {
  const double l = std::abs(params.lambda);
  if (params.aggregator.family != Family::CES) return l;
  if (!(lower > 0.0) || !(upper > lower) || !std::isfinite(upper)) {
    throw DomainError("contraction_bound: need 0 < lower < upper, got [" + std::to_string(lower) + ", " +
                      std::to_string(upper) + "]");
  }
  // sup over the box of (a_j / Phi)^(beta-1): a_j and Phi sit at opposite corners.
  return l * std::pow(upper / lower, std::abs(params.aggregator.theta - 1.0));
}

LogitResult logit_fixed_point(const Panel& panel, const Eigen::VectorXd& gamma, double J, const AggregatorSpec& spec,
                              double tol, int max_iter) {
  if (spec.family != Family::SmoothMax) throw std::invalid_argument("logit_fixed_point: SmoothMax family required");
  spec.validate();
  const auto logistic = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const Eigen::VectorXd index = panel.X * gamma;

  LogitResult out;
  out.p = index.unaryExpr(logistic);
  out.report.converged = true;
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    const Index off = panel.offsets[g];
    const Index n = panel.group_size(g);
    Eigen::VectorXd p = out.p.segment(off, n);
    int it = 0;
    double res = 0.0;
    bool ok = J == 0.0;
    if (ok) it = 1;
    while (!ok && it < max_iter) {
      ++it;
      const Eigen::VectorXd phi = exposure(panel.groups[g], p, spec).values;
      Eigen::VectorXd next = (index.segment(off, n) + J * phi).unaryExpr(logistic);
      res = rel_change(next, p);
      p = std::move(next);
      ok = res <= tol;
    }
    out.p.segment(off, n) = p;
    out.report.iterations = std::max(out.report.iterations, it);
    out.report.final_residual = std::max(out.report.final_residual, res);
    out.report.converged = out.report.converged && ok;
  }
  out.report.contraction_bound = std::abs(J) / 4.0;
  out.report.uniqueness_certified = std::abs(J) < 4.0;
  return out;
}

}  // namespace normgame
