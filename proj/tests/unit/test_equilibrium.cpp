#include "normgame/equilibrium.hpp"
#include "normgame/errors.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace normgame;
using namespace normgame::testing;

namespace {

Panel random_panel(std::mt19937_64& rng, int groups, Index size, double density = 0.3) {
  std::vector<Network> nets;
  for (int g = 0; g < groups; ++g) nets.push_back(random_network(rng, size, density));
  return Panel::assemble(nets, design(rng, groups * size), {"const", "x"});
}

}  // namespace

TEST_SUITE("equilibrium") {

TEST_CASE("lambda = 0 finishes in one iteration") {
  std::mt19937_64 rng(1);
  const Panel p = random_panel(rng, 2, 10);
  StructuralParams sp{Eigen::Vector2d(0.5, 1.0), 0.0, Eigen::Vector2d(0.1, -0.2), 1.0, AggregatorSpec::lim()};
  const Eigen::VectorXd eps = normal_matrix(rng, 20, 1).col(0);
  const auto r = solve_equilibrium(p, sp, eps);
  Eigen::VectorXd expect = p.X * sp.gamma + eps;
  expect.head(10).array() += 0.1;
  expect.tail(10).array() -= 0.2;
  CHECK(r.y == expect);
  CHECK(r.report.iterations == 1);
  CHECK(r.report.converged);
}

TEST_CASE("LIM fixed point equals the linear solve") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  for (int rep = 0; rep < 20; ++rep) {
    const Index n = 5 + rep * 2;
    const Panel p = random_panel(rng, 1, n);
    StructuralParams sp{Eigen::Vector2d(0.3, -1.0), u(rng), Eigen::VectorXd::Constant(1, 0.7), 1.0,
                        AggregatorSpec::lim()};
    const Eigen::VectorXd eps = normal_matrix(rng, n, 1).col(0);
    const auto r = solve_equilibrium(p, sp, eps);
    const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - sp.lambda * p.groups[0].weights;
    const Eigen::VectorXd rhs = (p.X * sp.gamma + eps).array() + 0.7;
    const Eigen::VectorXd oracle = A.partialPivLu().solve(rhs);
    CHECK(r.report.converged);
    CHECK(max_abs(r.y - oracle) <= 1e-8);
  }
}

TEST_CASE("fixed-point residual bound") {
  std::mt19937_64 rng(3);
  const Panel p = random_panel(rng, 3, 15);
  for (const auto& spec : {AggregatorSpec::smooth_max(2.0), AggregatorSpec::quantile(0.4), AggregatorSpec::ces(1.6, 6.0)}) {
    StructuralParams sp{Eigen::Vector2d(0.0, 1.0), 0.5, {}, 1.0, spec};
    const Eigen::VectorXd eps = normal_matrix(rng, 45, 1).col(0);
    const SolveOptions opt;
    const auto r = solve_equilibrium(p, sp, eps, opt);
    REQUIRE(r.report.converged);
    Eigen::VectorXd Ty(45);
    for (std::size_t g = 0; g < 3; ++g) {
      const Index o = p.offsets[g];
      Ty.segment(o, 15) = (p.X * sp.gamma + eps).segment(o, 15) +
                          sp.lambda * exposure(p.groups[g], r.y.segment(o, 15), spec).values;
    }
    CHECK(max_abs(r.y - Ty) <= 10 * opt.tol * (1.0 + max_abs(r.y)));
  }
}

TEST_CASE("SmoothMax with lambda 0.9 converges") {
  std::mt19937_64 rng(4);
  const Panel p = random_panel(rng, 1, 30);
  StructuralParams sp{Eigen::Vector2d(0.0, 1.0), 0.9, {}, 1.0, AggregatorSpec::smooth_max(1.5)};
  const auto r = solve_equilibrium(p, sp, normal_matrix(rng, 30, 1).col(0));
  CHECK(r.report.converged);
  CHECK(r.report.uniqueness_certified);
  CHECK(*r.report.contraction_bound == doctest::Approx(0.9));
}

TEST_CASE("contraction_bound") {
  StructuralParams sp;
  sp.lambda = 0.5;
  sp.aggregator = AggregatorSpec::lim();
  CHECK(contraction_bound(sp, 1.0, 2.0) == 0.5);
  sp.lambda = 1.2;
  sp.aggregator = AggregatorSpec::smooth_max(1.0);
  CHECK(contraction_bound(sp, 1.0, 2.0) == 1.2);
  sp.lambda = 0.4;
  sp.aggregator = AggregatorSpec::ces(2.0);
  CHECK(contraction_bound(sp, 1.0, 2.0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS_AS(contraction_bound(sp, 0.0, 2.0), DomainError);
  CHECK_THROWS_AS(contraction_bound(sp, 2.0, 1.0), DomainError);
}

TEST_CASE("CES constant matches a numerical sup of the partial derivative") {
  // dPhi/da_j / g_j = (sum_k g_k a_k^b)^(1/b - 1) a_j^(b-1), maximized over a in the box and weights.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double beta : {-1.5, 0.5, 2.0, 3.0}) {
    const double lo = 1.0, hi = 2.0;
    double sup = 0.0;
    for (int s = 0; s < 20000; ++s) {
      const double gj = s < 100 ? 1e-6 : u(rng);
      const double aj = s % 2 ? lo : lo + (hi - lo) * u(rng);
      const double ak = s % 3 ? hi : lo + (hi - lo) * u(rng);
      const double aj2 = s < 100 ? (beta > 1 ? hi : lo) : aj;
      const double ak2 = s < 100 ? (beta > 1 ? lo : hi) : ak;
      const double S = gj * std::pow(aj2, beta) + (1 - gj) * std::pow(ak2, beta);
      sup = std::max(sup, std::pow(S, 1.0 / beta - 1.0) * std::pow(aj2, beta - 1.0));
    }
    StructuralParams sp;
    sp.lambda = 1.0;
    sp.aggregator = AggregatorSpec::ces(beta);
    const double C = contraction_bound(sp, lo, hi);
    CHECK(sup <= C * (1 + 1e-12));
    CHECK(sup >= C * (1 - 1e-4));
  }
}

TEST_CASE("contraction implies a unique limit from random starts") {
  std::mt19937_64 rng(6);
  const Panel p = random_panel(rng, 2, 20);
  for (const auto& spec : {AggregatorSpec::lim(), AggregatorSpec::smooth_max(3.0), AggregatorSpec::ces(1.3, 10.0)}) {
    StructuralParams sp{Eigen::Vector2d(0.0, 1.0), 0.45, {}, 1.0, spec};
    const Eigen::VectorXd eps = normal_matrix(rng, 40, 1).col(0);
    SolveOptions opt;
    const auto ref = solve_equilibrium(p, sp, eps, opt);
    REQUIRE(ref.report.contraction_bound.has_value());
    if (*ref.report.contraction_bound >= 1.0) continue;
    for (int s = 0; s < 20; ++s) {
      opt.init = uniform_vector(rng, 40, -3.0, 3.0);
      const auto r = solve_equilibrium(p, sp, eps, opt);
      CHECK(r.report.converged);
      CHECK(max_abs(r.y - ref.y) <= 10 * opt.tol * (1.0 + max_abs(ref.y)));
    }
  }
}

TEST_CASE("CES domain errors carry iteration and group") {
  std::mt19937_64 rng(7);
  const Panel p = random_panel(rng, 1, 8);
  StructuralParams sp{Eigen::Vector2d(-5.0, 0.0), 0.5, {}, 1.0, AggregatorSpec::ces(2.0)};
  try {
    solve_equilibrium(p, sp, Eigen::VectorXd::Zero(8));
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iteration 1") != std::string::npos);
    CHECK(msg.find("group") != std::string::npos);
  }
}

TEST_CASE("equilibrium_shift keeps the iteration in the CES domain") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const Panel p = random_panel(rng, 1, 12);
    StructuralParams sp{Eigen::Vector2d(-1.0, 2.0), 0.6, {}, 1.0, AggregatorSpec::ces(0.7)};
    const Eigen::VectorXd eps = normal_matrix(rng, 12, 1).col(0);
    const Eigen::VectorXd base = p.X * sp.gamma + eps;
    sp.aggregator.shift = equilibrium_shift(base, p.X * sp.gamma, sp.lambda);
    CHECK_NOTHROW(solve_equilibrium(p, sp, eps));
  }
  CHECK(equilibrium_shift(Eigen::Vector2d(2, 3), Eigen::Vector2d(2, 3), 0.0) == 0.0);
}

TEST_CASE("damping engages on persistent oscillation") {
  // lambda = -1 on a 2-cycle: from (3, 0) plain iteration alternates with (1, -2).
  Eigen::MatrixXd W(2, 2);
  W << 0, 1, 1, 0;
  const Panel p = Panel::assemble({row_normalize(W)}, Eigen::MatrixXd::Ones(2, 1), {"const"});
  StructuralParams sp{Eigen::VectorXd::Constant(1, 1.0), -1.0, {}, 1.0, AggregatorSpec::lim()};
  SolveOptions opt;
  opt.damping_trigger = 5;
  opt.init = Eigen::Vector2d(3.0, 0.0);
  const auto r = solve_equilibrium(p, sp, Eigen::Vector2d(0.0, 0.0), opt);
  CHECK(r.report.damped);
  CHECK(r.report.converged);
  CHECK(std::abs(r.y(0) + r.y(1) - 1.0) <= 1e-8);
}

TEST_CASE("logit fixed point") {
  std::mt19937_64 rng(9);
  const Panel p = random_panel(rng, 2, 12);
  const Eigen::Vector2d gamma(0.2, -0.7);
  SUBCASE("J = 0 is the plain logit") {
    const auto r = logit_fixed_point(p, gamma, 0.0, AggregatorSpec::smooth_max(1.0));
    const Eigen::VectorXd v = p.X * gamma;
    for (Index i = 0; i < v.size(); ++i) CHECK(r.p(i) == doctest::Approx(1.0 / (1.0 + std::exp(-v(i)))));
  }
  SUBCASE("J = 3.9 is certified") {
    const auto r = logit_fixed_point(p, gamma, 3.9, AggregatorSpec::smooth_max(2.0));
    CHECK(r.report.converged);
    CHECK(r.report.uniqueness_certified);
    CHECK(r.p.minCoeff() >= 0.0);
    CHECK(r.p.maxCoeff() <= 1.0);
  }
  SUBCASE("symmetric pair") {
    Eigen::MatrixXd W(2, 2);
    W << 0, 1, 1, 0;
    const Panel two = Panel::assemble({row_normalize(W)}, Eigen::MatrixXd::Zero(2, 1), {"x"});
    // J = 0: one half exactly. J = 1: both equal the root of p = Lambda(p).
    const auto r0 = logit_fixed_point(two, Eigen::VectorXd::Zero(1), 0.0, AggregatorSpec::smooth_max(1.0));
    CHECK(r0.p(0) == 0.5);
    CHECK(r0.p(1) == 0.5);
    const auto r = logit_fixed_point(two, Eigen::VectorXd::Zero(1), 1.0, AggregatorSpec::smooth_max(1.0));
    double lo = 0.0, hi = 1.0;
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (lo + hi);
      (mid < 1.0 / (1.0 + std::exp(-mid)) ? lo : hi) = mid;
    }
    CHECK(r.p(0) == r.p(1));
    CHECK(std::abs(r.p(0) - lo) <= 1e-9);
  }
  SUBCASE("J = 6 carries no certificate") {
    const auto r = logit_fixed_point(p, gamma, 6.0, AggregatorSpec::smooth_max(1.0));
    CHECK_FALSE(r.report.uniqueness_certified);
    CHECK(r.p.minCoeff() >= 0.0);
    CHECK(r.p.maxCoeff() <= 1.0);
  }
}

}  // TEST_SUITE
