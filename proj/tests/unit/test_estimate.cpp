#include "normgame/equilibrium.hpp"
#include "normgame/errors.hpp"
#include "normgame/estimate.hpp"
#include "normgame/geometry.hpp"
#include "normgame/montecarlo.hpp"
#include "support.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <doctest.h>
#include <nlohmann/json.hpp>

#include <fstream>

using namespace normgame;
using namespace normgame::testing;

namespace {

/// Stacked LIM panel with BDF instruments [G x, G^2 x] and an equilibrium y.
struct LimData {
  Panel panel;
  Eigen::VectorXd y;
  Eigen::VectorXd w;
  Eigen::MatrixXd Z;
};

LimData lim_data(std::uint64_t seed, int groups, Index size, double lambda) {
  std::mt19937_64 rng(seed);
  std::vector<Network> nets;
  for (int g = 0; g < groups; ++g) nets.push_back(random_network(rng, size, 0.15));
  LimData d;
  d.panel = Panel::assemble(nets, design(rng, groups * size, 1), {"const", "x"});
  const Eigen::VectorXd eps = normal_matrix(rng, groups * size, 1).col(0);
  StructuralParams sp{Eigen::Vector2d(1.0, 1.0), lambda, {}, 1.0, AggregatorSpec::lim()};
  d.y = solve_equilibrium(d.panel, sp, eps).y;
  d.w.resize(d.y.size());
  d.Z.resize(d.y.size(), 2);
  for (std::size_t g = 0; g < d.panel.num_groups(); ++g) {
    const Index o = d.panel.offsets[g];
    const auto& G = d.panel.groups[g].weights;
    const Eigen::VectorXd x = d.panel.X_group(g).col(1);
    d.w.segment(o, size) = G * d.y.segment(o, size);
    d.Z.block(o, 0, size, 1) = G * x;
    d.Z.block(o, 1, size, 1) = G * (G * x);
  }
  return d;
}

Eigen::VectorXd residualize(const Eigen::MatrixXd& X, const Eigen::VectorXd& v) {
  return v - X * X.colPivHouseholderQr().solve(v);
}

}  // namespace

TEST_SUITE("estimate") {

TEST_CASE("exactly identified IV is the closed form") {
  const LimData d = lim_data(31, 10, 30, 0.4);
  const Eigen::MatrixXd z = d.Z.col(0);
  const auto r = two_sls(d.y, d.panel.X, d.w, z, d.panel.cluster_id);
  const Eigen::VectorXd zt = residualize(d.panel.X, z.col(0));
  const Eigen::VectorXd wt = residualize(d.panel.X, d.w);
  const Eigen::VectorXd yt = residualize(d.panel.X, d.y);
  CHECK(r.lambda_hat == doctest::Approx(zt.dot(yt) / zt.dot(wt)).epsilon(1e-10));
}

TEST_CASE("endogenous regressor among the instruments gives OLS") {
  const LimData d = lim_data(32, 8, 25, 0.3);
  Eigen::MatrixXd Z(d.w.size(), 2);
  Z << d.w, d.Z.col(0);
  const auto r = two_sls(d.y, d.panel.X, d.w, Z, d.panel.cluster_id);
  Eigen::MatrixXd R(d.w.size(), 3);
  R << d.panel.X, d.w;
  const Eigen::VectorXd ols = R.colPivHouseholderQr().solve(d.y);
  CHECK(r.lambda_hat == doctest::Approx(ols(2)).epsilon(1e-10));
  CHECK(r.gamma_hat(1) == doctest::Approx(ols(1)).epsilon(1e-10));
}

TEST_CASE("LIM simulation recovers lambda") {
  const LimData d = lim_data(33, 40, 50, 0.3);
  const auto r = two_sls(d.y, d.panel.X, d.w, d.Z, d.panel.cluster_id);
  CHECK(std::abs(r.lambda_hat - 0.3) <= 3 * r.se_lambda);
  CHECK(r.first_stage.partial_r2 > 0.1);
  CHECK(r.clusters == 40);
  CHECK(r.n_used == 2000);
}

TEST_CASE("covariance properties") {
  const LimData d = lim_data(34, 12, 30, 0.5);
  const auto r = two_sls(d.y, d.panel.X, d.w, d.Z, d.panel.cluster_id);
  CHECK(max_abs(r.vcov - r.vcov.transpose()) <= 1e-12);
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(r.vcov).eigenvalues();
  CHECK(ev.minCoeff() >= -1e-8);
  CHECK(r.first_stage.partial_r2 >= 0.0);
  CHECK(r.first_stage.partial_r2 <= 1.0);
  CHECK(r.se_lambda == doctest::Approx(std::sqrt(r.vcov(2, 2))));
}

TEST_CASE("singleton clusters reproduce HC1") {
  const LimData d = lim_data(35, 6, 30, 0.4);
  std::vector<int> singles(static_cast<std::size_t>(d.y.size()));
  for (std::size_t i = 0; i < singles.size(); ++i) singles[i] = static_cast<int>(i);
  const auto r = two_sls(d.y, d.panel.X, d.w, d.Z, singles);
  Eigen::MatrixXd Zf(d.y.size(), 4), R(d.y.size(), 3);
  Zf << d.panel.X, d.Z;
  R << d.panel.X, d.w;
  const Eigen::MatrixXd Rhat = Zf * Zf.colPivHouseholderQr().solve(R);
  Eigen::VectorXd b(3);
  b << r.gamma_hat, r.lambda_hat;
  const Eigen::MatrixXd V = hc1(Rhat, d.y - R * b);
  CHECK(max_abs(V - r.vcov) <= 1e-10 * (1.0 + max_abs(V)));
}

TEST_CASE("scale equivariance") {
  const LimData d = lim_data(36, 10, 30, 0.3);
  const auto a = two_sls(d.y, d.panel.X, d.w, d.Z, d.panel.cluster_id);
  // The exposure is linear in y for LIM, so scaling y scales w as well.
  const auto b = two_sls(10 * d.y, d.panel.X, 10 * d.w, d.Z, d.panel.cluster_id);
  CHECK(b.lambda_hat == doctest::Approx(a.lambda_hat).epsilon(1e-10));
  CHECK(max_abs(b.gamma_hat - 10 * a.gamma_hat) <= 1e-9 * (1 + max_abs(a.gamma_hat)));
  CHECK(std::abs(b.first_stage.partial_r2 - a.first_stage.partial_r2) <= 1e-10);
  // Holding the regressor fixed, every coefficient scales by 10.
  const auto c = two_sls(10 * d.y, d.panel.X, d.w, d.Z, d.panel.cluster_id);
  CHECK(c.lambda_hat == doctest::Approx(10 * a.lambda_hat).epsilon(1e-10));
}

TEST_CASE("first-stage diagnostics") {
  std::mt19937_64 rng(37);
  const Index N = 5000;
  const Eigen::MatrixXd X = design(rng, N, 1);
  const Eigen::MatrixXd Z = normal_matrix(rng, N, 2);
  std::vector<int> cl(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) cl[static_cast<std::size_t>(i)] = static_cast<int>(i % 50);
  SUBCASE("independent instruments are weak") {
    const Eigen::VectorXd w = normal_matrix(rng, N, 1).col(0);
    const FirstStage fs = first_stage_diagnostics(w, X, Z, cl);
    CHECK(fs.partial_r2 < 0.005);
    CHECK(fs.excluded_count == 2);
  }
  SUBCASE("exposure equal to an instrument") {
    const FirstStage fs = first_stage_diagnostics(Z.col(0), X, Z, cl);
    CHECK(fs.partial_r2 == doctest::Approx(1.0));
    CHECK(fs.f_stat > 1e8);
  }
  SUBCASE("homoskedastic F by hand") {
    const Eigen::VectorXd w = Z.col(0) * 0.1 + normal_matrix(rng, N, 1).col(0);
    const FirstStage fs = first_stage_diagnostics(w, X, Z, cl);
    Eigen::MatrixXd F(N, 4);
    F << X, Z;
    const double rss_r = residualize(X, w).squaredNorm();
    const double rss_f = (w - F * F.colPivHouseholderQr().solve(w)).squaredNorm();
    CHECK(fs.f_stat == doctest::Approx(((rss_r - rss_f) / 2) / (rss_f / (N - 4))).epsilon(1e-10));
    CHECK(std::isfinite(fs.f_stat_robust));
  }
}

TEST_CASE("error paths") {
  const LimData d = lim_data(38, 5, 20, 0.3);
  SUBCASE("collinear included covariates") {
    Eigen::MatrixXd X2(d.y.size(), 3);
    X2 << d.panel.X, 2 * d.panel.X.col(1);
    CHECK_THROWS_AS(two_sls(d.y, X2, d.w, d.Z, d.panel.cluster_id), RankError);
  }
  SUBCASE("one cluster") {
    const std::vector<int> one(static_cast<std::size_t>(d.y.size()), 0);
    const auto r = two_sls(d.y, d.panel.X, d.w, d.Z, one);
    REQUIRE(r.inference_error.has_value());
    CHECK(std::isnan(r.se_lambda));
    CHECK(std::isfinite(r.lambda_hat));
  }
  SUBCASE("guard drops duplicate and redundant columns") {
    Eigen::MatrixXd Z(d.y.size(), 4);
    Z << d.Z, 3 * d.Z.col(0), d.panel.X.col(1);
    const auto r = two_sls(d.y, d.panel.X, d.w, Z, d.panel.cluster_id, {"a", "b", "a3", "x"});
    CHECK(r.dropped_instruments == std::vector<std::string>{"a3", "x"});
    const auto base = two_sls(d.y, d.panel.X, d.w, d.Z, d.panel.cluster_id);
    CHECK(r.lambda_hat == doctest::Approx(base.lambda_hat).epsilon(1e-10));
  }
  SUBCASE("no usable instrument") {
    CHECK_THROWS_AS(two_sls(d.y, d.panel.X, d.w, d.panel.X.col(1), d.panel.cluster_id), RankError);
  }
}

TEST_CASE("gmm reductions") {
  const LimData d = lim_data(39, 12, 30, 0.4);
  auto wb = [&](double) { return d.w; };
  auto zb = [&](double) { return d.Z; };
  SUBCASE("fixed theta with 2SLS weighting is two_sls") {
    GmmOptions o;
    o.weighting = GmmWeighting::TwoSls;
    o.theta_lower = o.theta_upper = 1.0;
    const auto g = gmm(d.y, d.panel.X, wb, zb, 1.0, d.panel.cluster_id, o);
    const auto t = two_sls(d.y, d.panel.X, d.w, d.Z, d.panel.cluster_id);
    CHECK(g.lambda_hat == t.lambda_hat);
    CHECK(g.vcov == t.vcov);
    CHECK(*g.theta_used == 1.0);
  }
  SUBCASE("exact identification: two-step equals 2SLS") {
    auto z1 = [&](double) { return Eigen::MatrixXd(d.Z.col(0)); };
    GmmOptions o;
    o.theta_lower = o.theta_upper = 1.0;
    const auto g = gmm(d.y, d.panel.X, wb, z1, 1.0, d.panel.cluster_id, o);
    const auto t = two_sls(d.y, d.panel.X, d.w, d.Z.col(0), d.panel.cluster_id);
    CHECK(std::abs(g.lambda_hat - t.lambda_hat) <= 1e-8);
    CHECK(max_abs(g.gamma_hat - t.gamma_hat) <= 1e-8);
    CHECK(*g.j_stat <= 1e-12);
  }
}

TEST_CASE("gmm J statistic is chi-square sized under valid overidentification") {
  const boost::math::chi_squared chi(1.0);
  const double crit = boost::math::quantile(chi, 0.99);
  int below = 0;
  const int runs = 40;
  for (int s = 0; s < runs; ++s) {
    const LimData d = lim_data(1000 + static_cast<std::uint64_t>(s), 30, 40, 0.3);
    GmmOptions o;
    o.theta_lower = o.theta_upper = 1.0;
    const auto g = gmm(d.y, d.panel.X, [&](double) { return d.w; }, [&](double) { return d.Z; }, 1.0,
                       d.panel.cluster_id, o);
    if (*g.j_stat <= crit) ++below;
  }
  CHECK(below >= runs - 3);
}

TEST_CASE("gmm outer loop moves theta toward the truth") {
  // Exposure of an exogenous action exp(x), so theta is identified without simultaneity.
  std::mt19937_64 rng(40);
  const Index n = 30;
  std::vector<Network> nets;
  for (int g = 0; g < 20; ++g) nets.push_back(random_network(rng, n, 0.2));
  const Panel p = Panel::assemble(nets, design(rng, 20 * n, 1), {"const", "x"});
  const Eigen::VectorXd a = (p.X.col(1).array().exp()).matrix();
  auto expo = [&](double b) {
    Eigen::VectorXd w(p.num_nodes());
    for (std::size_t g = 0; g < p.num_groups(); ++g)
      w.segment(p.offsets[g], n) = exposure(p.groups[g], a.segment(p.offsets[g], n), AggregatorSpec::ces(b)).values;
    return w;
  };
  auto inst = [&](double b) {
    Eigen::MatrixXd Z(p.num_nodes(), 2);
    Z.col(0) = expo(b);
    Eigen::VectorXd d(p.num_nodes());
    for (std::size_t g = 0; g < p.num_groups(); ++g)
      d.segment(p.offsets[g], n) =
          dtheta_exposure(p.groups[g], a.segment(p.offsets[g], n), AggregatorSpec::ces(b)).values;
    Z.col(1) = d;
    return Z;
  };
  const Eigen::VectorXd y = p.X * Eigen::Vector2d(0.5, 1.0) + 0.8 * expo(1.6) + 0.1 * normal_matrix(rng, 20 * n, 1).col(0);
  GmmOptions o;
  o.theta_lower = 0.5;
  o.theta_upper = 3.0;
  const auto g = gmm(y, p.X, expo, inst, 1.0, p.cluster_id, o);
  CHECK(g.converged);
  CHECK(std::abs(*g.theta_used - 1.6) < 0.2);
  CHECK(std::abs(g.lambda_hat - 0.8) < 0.1);
}

TEST_CASE("profile_iv") {
  const LimData d = lim_data(41, 12, 30, 0.4);
  SUBCASE("single-point grid passes through") {
    const auto pr = profile_iv(d.y, d.panel.X, [&](double) { return d.w; }, [&](double) { return d.Z; }, {1.3},
                               d.panel.cluster_id);
    CHECK(pr.trace.argmin == 1.3);
    CHECK_FALSE(pr.trace.flat);
    CHECK(*pr.estimate.theta_used == 1.3);
  }
  SUBCASE("flat profile resolves to the smallest theta") {
    const auto pr = profile_iv(d.y, d.panel.X, [&](double) { return d.w; }, [&](double) { return d.Z; },
                               {2.0, 0.8, 1.2}, d.panel.cluster_id);
    CHECK(pr.trace.flat);
    CHECK(pr.trace.argmin == 0.8);
  }
  SUBCASE("failed points are recorded and skipped") {
    auto zb = [&](double th) {
      if (th > 1.5) return Eigen::MatrixXd(d.panel.X.col(1));  // no excluded variation
      return d.Z;
    };
    const auto pr = profile_iv(d.y, d.panel.X, [&](double) { return d.w; }, zb, {1.0, 2.0}, d.panel.cluster_id);
    CHECK(pr.trace.errors[1].has_value());
    CHECK(std::isnan(pr.trace.criterion[1]));
    CHECK(pr.trace.argmin == 1.0);
    CHECK_THROWS(profile_iv(d.y, d.panel.X, [&](double) { return d.w; }, zb, {2.0, 3.0}, d.panel.cluster_id));
  }
  SUBCASE("argmin attains the minimum") {
    auto zb = [&](double th) {
      Eigen::MatrixXd Z = d.Z;
      Z.col(1) += (th - 1.0) * d.w;  // invalid instrument away from th = 1
      return Z;
    };
    const auto pr = profile_iv(d.y, d.panel.X, [&](double) { return d.w; }, zb, {0.5, 1.0, 1.5}, d.panel.cluster_id);
    const auto& c = pr.trace.criterion;
    CHECK(pr.trace.argmin == 1.0);
    CHECK(c[1] <= c[0]);
    CHECK(c[1] <= c[2]);
  }
}

TEST_CASE("profile argmin on a simulated GEO panel") {
  // 40 dispersion-bridge groups, lambda 0.6, noise sd 0.25.
  const std::vector<double> grid{0.8, 1.2, 1.6, 2.0};
  const int groups = 40, n = 60 * groups, runs = 20;
  int hits = 0;
  for (int s = 0; s < runs; ++s) {
    std::vector<Network> nets;
    Eigen::MatrixXd X(n, 2);
    for (int g = 0; g < groups; ++g) {
      SimGroup sg = dispersion_bridge(60, stream_seed(77, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(g), 1));
      X.middleRows(60 * g, 60) = sg.X;
      nets.push_back(sg.net);
    }
    const Panel p = Panel::assemble(nets, X, {"const", "x"});
    std::mt19937_64 rng(stream_seed(77, static_cast<std::uint64_t>(s), 0, 3));
    const Eigen::VectorXd eps = 0.25 * normal_matrix(rng, n, 1).col(0);
    const Eigen::VectorXd xg = p.X.col(1);
    const double c = equilibrium_shift(xg + eps, xg, 0.6);
    StructuralParams sp{Eigen::Vector2d(0.0, 1.0), 0.6, {}, 1.0, AggregatorSpec::ces(1.2, c)};
    const Eigen::VectorXd y = solve_equilibrium(p, sp, eps).y;
    const double c_inst = std::max(c, default_shift(xg));
    auto expo = [&](double b) {
      Eigen::VectorXd w(n);
      for (std::size_t g = 0; g < p.num_groups(); ++g)
        w.segment(p.offsets[g], 60) = exposure(p.groups[g], y.segment(p.offsets[g], 60), AggregatorSpec::ces(b, c)).values;
      return w;
    };
    auto inst = [&](double b) { return build_menu(p, xg, AggregatorSpec::ces(b, c_inst), MenuOptions::geo()).excluded; };
    const auto pr = profile_iv(y, p.X, expo, inst, grid, p.cluster_id);
    if (pr.trace.argmin == 1.2) ++hits;
  }
  MESSAGE("profile argmin at the true beta in " << hits << " of " << runs << " runs");
  CHECK(2 * hits > runs);
}

TEST_CASE("JSON and CSV emission") {
  const LimData d = lim_data(42, 6, 20, 0.3);
  const auto pr = profile_iv(d.y, d.panel.X, [&](double) { return d.w; }, [&](double) { return d.Z; }, {1.0, 2.0},
                             d.panel.cluster_id);
  const auto j = nlohmann::json::parse(to_json(pr.estimate));
  CHECK(j["lambda_hat"].get<double>() == pr.estimate.lambda_hat);
  CHECK(j.contains("first_stage"));
  const auto t = nlohmann::json::parse(to_json(pr.trace));
  CHECK(t["grid"].size() == 2);
  const auto dir = scratch_dir("estimate_csv");
  write_profile_csv(pr, dir / "p.csv");
  std::ifstream in(dir / "p.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "theta,lambda_hat,se,partial_r2,F,J");
}

}  // TEST_SUITE
