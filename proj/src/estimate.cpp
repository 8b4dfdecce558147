#include "normgame/estimate.hpp"

#include "normgame/csv.hpp"
#include "normgame/errors.hpp"

#include <boost/math/tools/minima.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

namespace normgame {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kRankTol = 1e-10;

struct Clusters {
  std::vector<int> index;  // dense 0..G-1
  int count = 0;
};

Clusters compress(const std::vector<int>& ids, Index n) {
  if (static_cast<Index>(ids.size()) != n) {
    throw std::invalid_argument("cluster_id has " + std::to_string(ids.size()) + " entries for " + std::to_string(n) +
                                " observations");
  }
  Clusters c;
  std::map<int, int> seen;
  c.index.reserve(ids.size());
  for (int id : ids) {
    auto [it, _] = seen.try_emplace(id, static_cast<int>(seen.size()));
    c.index.push_back(it->second);
  }
  c.count = static_cast<int>(seen.size());
  return c;
}

// sum over clusters of s_g s_g' with s_g the within-cluster column sum of scores.
MatrixXd cluster_meat(const MatrixXd& scores, const Clusters& cl) {
  MatrixXd sums = MatrixXd::Zero(cl.count, scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) sums.row(cl.index[static_cast<std::size_t>(i)]) += scores.row(i);
  return sums.transpose() * sums;
}

double small_sample(int G, Index N, Index K) {
  return (static_cast<double>(G) / (G - 1)) * (static_cast<double>(N - 1) / static_cast<double>(N - K));
}

MatrixXd hstack(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

void check_finite(const MatrixXd& M, const std::string& what) {
  if (!M.allFinite()) throw std::invalid_argument(what + " contains non-finite values");
}

std::string column_list(const std::vector<std::string>& names, const std::vector<Index>& cols) {
  std::string s;
  for (Index c : cols) {
    if (!s.empty()) s += ", ";
    s += c < static_cast<Index>(names.size()) ? names[static_cast<std::size_t>(c)] : "col" + std::to_string(c);
  }
  return s;
}

// QR with an explicit rank check; names the trailing pivots if deficient.
Eigen::ColPivHouseholderQR<MatrixXd> checked_qr(const MatrixXd& A, const std::string& what,
                                               const std::vector<std::string>& names) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(A);
  qr.setThreshold(kRankTol);
  if (qr.rank() < A.cols()) {
    std::vector<Index> bad;
    for (Index k = qr.rank(); k < A.cols(); ++k) bad.push_back(qr.colsPermutation().indices()(k));
    throw RankError(what + " is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                    std::to_string(A.cols()) + "); near-collinear: " + column_list(names, bad));
  }
  return qr;
}

std::vector<std::string> default_names(const std::string& prefix, Index n) {
  std::vector<std::string> out;
  for (Index k = 0; k < n; ++k) out.push_back(prefix + std::to_string(k));
  return out;
}

MatrixXd take_cols(const MatrixXd& Z, const std::vector<Index>& cols) {
  MatrixXd out(Z.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(static_cast<Index>(k)) = Z.col(cols[k]);
  return out;
}

struct Prepared {
  MatrixXd Z;  // guarded excluded block
  std::vector<std::string> dropped;
};

Prepared prepare_instruments(const MatrixXd& X, const MatrixXd& Z, const std::vector<std::string>& z_names) {
  const auto names = z_names.size() == static_cast<std::size_t>(Z.cols()) ? z_names : default_names("z", Z.cols());
  const GuardResult g = collinearity_guard(X, Z);
  Prepared p;
  for (Index c : g.dropped) p.dropped.push_back(names[static_cast<std::size_t>(c)]);
  if (g.kept.empty()) {
    throw RankError("no excluded instrument has variation beyond the included covariates (dropped: " +
                    column_list(names, g.dropped) + ")");
  }
  p.Z = take_cols(Z, g.kept);
  return p;
}

}  // namespace

GuardResult collinearity_guard(const MatrixXd& X, const MatrixXd& Z, double max_corr) {
  GuardResult out;
  MatrixXd resid = Z;
  if (X.cols() > 0 && Z.cols() > 0) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
    resid = Z - X * qr.solve(Z);
  }
  std::vector<VectorXd> kept_unit;
  for (Index k = 0; k < Z.cols(); ++k) {
    const double scale = Z.col(k).norm();
    const double rn = resid.col(k).norm();
    if (!(rn > 1e-9 * (1.0 + scale))) {
      out.dropped.push_back(k);
      continue;
    }
    VectorXd u = resid.col(k) / rn;
    bool dup = false;
    for (const auto& v : kept_unit) {
      if (std::abs(u.dot(v)) > max_corr) {
        dup = true;
        break;
      }
    }
    if (dup) {
      out.dropped.push_back(k);
    } else {
      out.kept.push_back(k);
      kept_unit.push_back(std::move(u));
    }
  }
  return out;
}

MatrixXd hc1(const MatrixXd& R, const VectorXd& u) {
  const Index N = R.rows();
  const Index K = R.cols();
  const MatrixXd bread = (R.transpose() * R).inverse();
  const MatrixXd scores = R.array().colwise() * u.array();
  const MatrixXd V = bread * (scores.transpose() * scores) * bread * (static_cast<double>(N) / static_cast<double>(N - K));
  return 0.5 * (V + V.transpose());
}

FirstStage first_stage_diagnostics(const VectorXd& w, const MatrixXd& X, const MatrixXd& Z,
                                   const std::vector<int>& cluster_id) {
  const Index N = w.size();
  const Index p = X.cols();
  const Index m = Z.cols();
  FirstStage fs;
  fs.excluded_count = static_cast<int>(m);
  if (m == 0) return fs;
  const MatrixXd F = hstack(X, Z);
  const auto qr_r = checked_qr(X, "included covariates", {});
  const auto qr_f = checked_qr(F, "first-stage design", {});
  const VectorXd e_r = w - X * qr_r.solve(w);
  const VectorXd pi = qr_f.solve(w);
  const VectorXd e_f = w - F * pi;
  const double rss_r = e_r.squaredNorm();
  const double rss_f = e_f.squaredNorm();
  fs.partial_r2 = rss_r > 0.0 ? std::clamp(1.0 - rss_f / rss_r, 0.0, 1.0) : 0.0;
  const double dof = static_cast<double>(N - p - m);
  fs.f_stat = rss_f > 0.0 ? ((rss_r - rss_f) / static_cast<double>(m)) / (rss_f / dof)
                          : std::numeric_limits<double>::infinity();

  const Clusters cl = compress(cluster_id, N);
  if (cl.count < 2 || rss_f == 0.0) {
    fs.f_stat_robust = rss_f == 0.0 ? std::numeric_limits<double>::infinity() : kNaN;
    return fs;
  }
  const MatrixXd bread = (F.transpose() * F).inverse();
  const MatrixXd scores = F.array().colwise() * e_f.array();
  const MatrixXd V = small_sample(cl.count, N, p + m) * bread * cluster_meat(scores, cl) * bread;
  const MatrixXd Vz = V.bottomRightCorner(m, m);
  const VectorXd pz = pi.tail(m);
  const VectorXd sol = Vz.completeOrthogonalDecomposition().solve(pz);
  fs.f_stat_robust = pz.dot(sol) / static_cast<double>(m);
  return fs;
}

EstimationResult two_sls(const VectorXd& y, const MatrixXd& X, const VectorXd& w, const MatrixXd& Zraw,
                         const std::vector<int>& cluster_id, const std::vector<std::string>& z_names) {
  const Index N = y.size();
  if (X.rows() != N || w.size() != N || Zraw.rows() != N) throw std::invalid_argument("two_sls: row counts differ");
  check_finite(X, "X");
  check_finite(Zraw, "instrument matrix");
  check_finite(w, "endogenous regressor");
  check_finite(y, "outcome");

  const Prepared prep = prepare_instruments(X, Zraw, z_names);
  const MatrixXd& Z = prep.Z;
  const Index p = X.cols();
  const Index K = p + 1;

  EstimationResult res;
  res.dropped_instruments = prep.dropped;
  for (const auto& d : prep.dropped) res.warnings.push_back("instrument '" + d + "' dropped by collinearity guard");
  res.n_used = N;

  const MatrixXd Zf = hstack(X, Z);
  const MatrixXd R = hstack(X, w);
  const auto qz = checked_qr(Zf, "instrument cross-product", {});
  const MatrixXd Rhat = Zf * qz.solve(R);
  const auto qr = checked_qr(Rhat, "first-stage fitted regressors", {});
  const VectorXd b = qr.solve(y);
  res.gamma_hat = b.head(p);
  res.lambda_hat = b(p);

  const VectorXd u = y - R * b;
  const Clusters cl = compress(cluster_id, N);
  res.clusters = cl.count;
  if (cl.count < 2) {
    res.inference_error = "fewer than 2 clusters; covariance not identified";
    res.vcov = MatrixXd::Constant(K, K, kNaN);
    res.se_lambda = kNaN;
  } else {
    const MatrixXd bread = (Rhat.transpose() * Rhat).inverse();
    const MatrixXd scores = Rhat.array().colwise() * u.array();
    MatrixXd V = small_sample(cl.count, N, K) * bread * cluster_meat(scores, cl) * bread;
    res.vcov = 0.5 * (V + V.transpose());
    res.se_lambda = std::sqrt(std::max(0.0, res.vcov(p, p)));
  }
  res.first_stage = first_stage_diagnostics(w, X, Z, cluster_id);
  return res;
}

namespace {

struct FixedTheta {
  MatrixXd Zf;
  MatrixXd R;
  std::vector<std::string> dropped;
};

// Linear GMM pieces at a given theta.
struct LinearGmm {
  const VectorXd& y;
  const MatrixXd& Zf;
  const MatrixXd& R;

  VectorXd solve(const MatrixXd& W) const {
    const MatrixXd ZR = Zf.transpose() * R;
    const VectorXd Zy = Zf.transpose() * y;
    const MatrixXd A = ZR.transpose() * W * ZR;
    return A.ldlt().solve(ZR.transpose() * W * Zy);
  }
  double objective(const MatrixXd& W, const VectorXd& b) const {
    const VectorXd g = Zf.transpose() * (y - R * b) / static_cast<double>(y.size());
    return g.dot(W * g);
  }
};

MatrixXd standardized_identity(const MatrixXd& Zf) {
  VectorXd d = (Zf.array().square().colwise().sum() / static_cast<double>(Zf.rows())).transpose();
  for (Index k = 0; k < d.size(); ++k) d(k) = d(k) > 0.0 ? 1.0 / d(k) : 0.0;
  return d.asDiagonal();
}

MatrixXd moment_cov(const MatrixXd& Zf, const VectorXd& u, const Clusters& cl) {
  const MatrixXd scores = Zf.array().colwise() * u.array();
  return cluster_meat(scores, cl) / static_cast<double>(Zf.rows());
}

MatrixXd pinv(const MatrixXd& S) {
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(S);
  cod.setThreshold(1e-12);
  return cod.pseudoInverse();
}

// Weight used for the outer theta step at a given theta.
MatrixXd weight_at(const VectorXd& y, const MatrixXd& Zf, const MatrixXd& R, const Clusters& cl, GmmWeighting how) {
  if (how == GmmWeighting::TwoSls) return (Zf.transpose() * Zf / static_cast<double>(Zf.rows())).inverse();
  const LinearGmm lg{y, Zf, R};
  const MatrixXd W1 = standardized_identity(Zf);
  const VectorXd b1 = lg.solve(W1);
  return pinv(moment_cov(Zf, y - R * b1, cl));
}

EstimationResult two_step_at(const VectorXd& y, const MatrixXd& X, const VectorXd& w, const MatrixXd& Z,
                             const Clusters& cl, const std::vector<int>& cluster_id) {
  const Index N = y.size();
  const Index p = X.cols();
  const Index K = p + 1;
  const MatrixXd Zf = hstack(X, Z);
  const MatrixXd R = hstack(X, w);
  checked_qr(Zf, "instrument cross-product", {});
  const LinearGmm lg{y, Zf, R};
  const MatrixXd W = weight_at(y, Zf, R, cl, GmmWeighting::TwoStep);
  const VectorXd b = lg.solve(W);
  const VectorXd u = y - R * b;

  EstimationResult res;
  res.gamma_hat = b.head(p);
  res.lambda_hat = b(p);
  res.n_used = N;
  res.clusters = cl.count;
  res.j_stat = static_cast<double>(N) * lg.objective(W, b);
  if (cl.count < 2) {
    res.inference_error = "fewer than 2 clusters; covariance not identified";
    res.vcov = MatrixXd::Constant(K, K, kNaN);
    res.se_lambda = kNaN;
  } else {
    const MatrixXd Gm = Zf.transpose() * R / static_cast<double>(N);
    const MatrixXd A = (Gm.transpose() * W * Gm).inverse();
    const MatrixXd S = moment_cov(Zf, u, cl);
    MatrixXd V = small_sample(cl.count, N, K) * A * Gm.transpose() * W * S * W * Gm * A / static_cast<double>(N);
    res.vcov = 0.5 * (V + V.transpose());
    res.se_lambda = std::sqrt(std::max(0.0, res.vcov(p, p)));
  }
  res.first_stage = first_stage_diagnostics(w, X, Z, cluster_id);
  return res;
}

}  // namespace

EstimationResult gmm(const VectorXd& y, const MatrixXd& X, const ExposureBuilder& exposure_builder,
                     const InstrumentBuilder& z_builder, double theta0, const std::vector<int>& cluster_id,
                     const GmmOptions& opt) {
  const Index N = y.size();
  const Clusters cl = compress(cluster_id, N);
  if (opt.theta_upper < opt.theta_lower) throw std::invalid_argument("gmm: theta_upper < theta_lower");
  const bool fixed = opt.theta_upper == opt.theta_lower;
  double theta = fixed ? opt.theta_lower : std::clamp(theta0, opt.theta_lower, opt.theta_upper);

  // The instrument set is fixed at the starting theta so the moment count
  // does not change while theta moves.
  const MatrixXd Z0 = z_builder(theta);
  const GuardResult guard = collinearity_guard(X, Z0);
  if (guard.kept.empty()) throw RankError("gmm: no usable excluded instrument at theta = " + std::to_string(theta));
  auto inputs = [&](double th) {
    FixedTheta f;
    f.Zf = hstack(X, take_cols(z_builder(th), guard.kept));
    f.R = hstack(X, exposure_builder(th));
    return f;
  };

  bool converged = true;
  int outer = 0;
  if (!fixed) {
    converged = false;
    double q_prev = std::numeric_limits<double>::infinity();
    for (outer = 1; outer <= opt.max_outer; ++outer) {
      const FixedTheta at = inputs(theta);
      const MatrixXd W = weight_at(y, at.Zf, at.R, cl, opt.weighting);
      auto q = [&](double th) {
        try {
          const FixedTheta f = inputs(th);
          const LinearGmm lg{y, f.Zf, f.R};
          const double v = lg.objective(W, lg.solve(W));
          return std::isfinite(v) ? v : std::numeric_limits<double>::max();
        } catch (const std::exception&) {
          return std::numeric_limits<double>::max();
        }
      };
      const double q_here = q(theta);
      boost::uintmax_t iters = 200;
      const auto [th_new, q_new] =
          boost::math::tools::brent_find_minima(q, opt.theta_lower, opt.theta_upper, opt.brent_bits, iters);
      const double step = std::abs(th_new - theta);
      if (q_new < q_here) theta = th_new;
      const double q_cur = std::min(q_new, q_here);
      if (std::abs(q_prev - q_cur) <= opt.tol * (1.0 + std::abs(q_cur)) || step <= opt.tol * (1.0 + std::abs(theta))) {
        converged = true;
        break;
      }
      q_prev = q_cur;
    }
  }

  const FixedTheta at = inputs(theta);
  const MatrixXd Zk = at.Zf.rightCols(at.Zf.cols() - X.cols());
  const VectorXd w = at.R.col(X.cols());
  EstimationResult res = opt.weighting == GmmWeighting::TwoSls ? two_sls(y, X, w, Zk, cluster_id)
                                                               : two_step_at(y, X, w, Zk, cl, cluster_id);
  res.theta_used = theta;
  res.converged = converged;
  for (Index c : guard.dropped) res.dropped_instruments.push_back("z" + std::to_string(c));
  if (!converged) res.warnings.push_back("outer theta loop hit max_outer; best iterate returned");
  return res;
}

ProfileResult profile_iv(const VectorXd& y, const MatrixXd& X, const ExposureBuilder& exposure_builder,
                         const InstrumentBuilder& z_builder, const std::vector<double>& theta_grid,
                         const std::vector<int>& cluster_id) {
  if (theta_grid.empty()) throw std::invalid_argument("profile_iv: empty theta grid");
  const Clusters cl = compress(cluster_id, y.size());
  ProfileResult out;
  out.trace.grid = theta_grid;
  std::vector<std::optional<EstimationResult>> fits(theta_grid.size());
  for (std::size_t k = 0; k < theta_grid.size(); ++k) {
    const double th = theta_grid[k];
    try {
      const VectorXd w = exposure_builder(th);
      const Prepared prep = prepare_instruments(X, z_builder(th), {});
      EstimationResult r = two_step_at(y, X, w, prep.Z, cl, cluster_id);
      r.theta_used = th;
      r.dropped_instruments = prep.dropped;
      out.trace.criterion.push_back(*r.j_stat);
      out.trace.lambda_path.push_back(r.lambda_hat);
      out.trace.se_path.push_back(r.se_lambda);
      out.trace.partial_r2_path.push_back(r.first_stage.partial_r2);
      out.trace.f_path.push_back(r.first_stage.f_stat);
      out.trace.errors.emplace_back(std::nullopt);
      fits[k] = std::move(r);
    } catch (const std::exception& e) {
      out.trace.criterion.push_back(kNaN);
      out.trace.lambda_path.push_back(kNaN);
      out.trace.se_path.push_back(kNaN);
      out.trace.partial_r2_path.push_back(kNaN);
      out.trace.f_path.push_back(kNaN);
      out.trace.errors.emplace_back(e.what());
    }
  }
  std::optional<std::size_t> best;
  std::size_t valid = 0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < theta_grid.size(); ++k) {
    if (!fits[k]) continue;
    ++valid;
    const double c = out.trace.criterion[k];
    lo = std::min(lo, c);
    hi = std::max(hi, c);
    if (!best || c < out.trace.criterion[*best] ||
        (c == out.trace.criterion[*best] && theta_grid[k] < theta_grid[*best])) {
      best = k;
    }
  }
  if (!best) {
    std::string why = out.trace.errors.front().value_or("unknown");
    throw std::runtime_error("profile_iv: every grid point failed (first error: " + why + ")");
  }
  out.trace.flat = valid > 1 && (hi - lo) < 1e-6 * (1.0 + lo);
  if (out.trace.flat) {
    // Flat profile: the smallest admissible theta.
    for (std::size_t k = 0; k < theta_grid.size(); ++k) {
      if (fits[k] && theta_grid[k] < theta_grid[*best]) best = k;
    }
  }
  out.trace.argmin = theta_grid[*best];
  out.estimate = std::move(*fits[*best]);
  if (out.trace.flat) out.estimate.warnings.push_back("profile criterion is flat over the grid");
  return out;
}

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json result_json(const EstimationResult& r) {
  nlohmann::json j;
  std::vector<nlohmann::json> g;
  for (Index k = 0; k < r.gamma_hat.size(); ++k) g.push_back(num(r.gamma_hat(k)));
  j["gamma_hat"] = g;
  j["lambda_hat"] = num(r.lambda_hat);
  j["se_lambda"] = num(r.se_lambda);
  std::vector<std::vector<nlohmann::json>> V;
  for (Index a = 0; a < r.vcov.rows(); ++a) {
    V.emplace_back();
    for (Index b = 0; b < r.vcov.cols(); ++b) V.back().push_back(num(r.vcov(a, b)));
  }
  j["vcov"] = V;
  j["first_stage"] = {{"partial_r2", num(r.first_stage.partial_r2)},
                      {"f_stat", num(r.first_stage.f_stat)},
                      {"f_stat_robust", num(r.first_stage.f_stat_robust)},
                      {"excluded_count", r.first_stage.excluded_count}};
  j["j_stat"] = r.j_stat ? num(*r.j_stat) : nlohmann::json(nullptr);
  j["theta_used"] = r.theta_used ? num(*r.theta_used) : nlohmann::json(nullptr);
  j["n_used"] = r.n_used;
  j["clusters"] = r.clusters;
  j["converged"] = r.converged;
  j["inference_error"] = r.inference_error ? nlohmann::json(*r.inference_error) : nlohmann::json(nullptr);
  j["dropped_instruments"] = r.dropped_instruments;
  j["warnings"] = r.warnings;
  return j;
}

nlohmann::json trace_json(const ProfileTrace& t) {
  nlohmann::json j;
  j["grid"] = t.grid;
  std::vector<nlohmann::json> c, l, s, e;
  for (std::size_t k = 0; k < t.grid.size(); ++k) {
    c.push_back(num(t.criterion[k]));
    l.push_back(num(t.lambda_path[k]));
    s.push_back(num(t.se_path[k]));
    e.push_back(t.errors[k] ? nlohmann::json(*t.errors[k]) : nlohmann::json(nullptr));
  }
  j["criterion"] = c;
  j["lambda_path"] = l;
  j["se_path"] = s;
  j["partial_r2_path"] = t.partial_r2_path;
  j["f_path"] = t.f_path;
  j["errors"] = e;
  j["argmin"] = t.argmin;
  j["flat"] = t.flat;
  return j;
}

}  // namespace

std::string to_json(const EstimationResult& r, int indent) { return result_json(r).dump(indent); }
std::string to_json(const ProfileTrace& t, int indent) { return trace_json(t).dump(indent); }

void write_profile_csv(const ProfileResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "theta,lambda_hat,se,partial_r2,F,J\n";
  const auto& t = r.trace;
  for (std::size_t k = 0; k < t.grid.size(); ++k) {
    out << csv::format_double(t.grid[k]) << ',' << csv::format_double(t.lambda_path[k]) << ','
        << csv::format_double(t.se_path[k]) << ',' << csv::format_double(t.partial_r2_path[k]) << ','
        << csv::format_double(t.f_path[k]) << ',' << csv::format_double(t.criterion[k]) << '\n';
  }
}

}  // namespace normgame
