#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace normgame {

struct FirstStage {
  double partial_r2 = 0.0;
  double f_stat = 0.0;         // homoskedastic Wald / m
  double f_stat_robust = 0.0;  // cluster-robust Wald / m (NaN with < 2 clusters)
  int excluded_count = 0;
};

struct EstimationResult {
  Eigen::VectorXd gamma_hat;
  double lambda_hat = 0.0;
  Eigen::MatrixXd vcov;  // over (gamma, lambda)
  double se_lambda = 0.0;
  FirstStage first_stage;
  std::optional<double> j_stat;
  std::optional<double> theta_used;
  Eigen::Index n_used = 0;
  int clusters = 0;
  bool converged = true;
  std::optional<std::string> inference_error;
  std::vector<std::string> dropped_instruments;
  std::vector<std::string> warnings;
};

/// Excluded-instrument guard: drops columns with no variation left after
/// partialling X, and the later member of any pair with |corr| > max_corr.
struct GuardResult {
  std::vector<Eigen::Index> kept;
  std::vector<Eigen::Index> dropped;
};
GuardResult collinearity_guard(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z, double max_corr = 0.9999);

/// Linear IV with included exogenous X, one endogenous regressor and excluded
/// instruments Z. Covariance is the cluster sandwich with the
/// G/(G-1) (N-1)/(N-K) correction.
EstimationResult two_sls(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, const Eigen::VectorXd& endogenous,
                         const Eigen::MatrixXd& Z, const std::vector<int>& cluster_id,
                         const std::vector<std::string>& z_names = {});

FirstStage first_stage_diagnostics(const Eigen::VectorXd& endogenous, const Eigen::MatrixXd& X,
                                   const Eigen::MatrixXd& Z, const std::vector<int>& cluster_id);

/// White covariance with the N/(N-K) small-sample factor.
Eigen::MatrixXd hc1(const Eigen::MatrixXd& regressors, const Eigen::VectorXd& residuals);

enum class GmmWeighting { TwoStep, TwoSls };

struct GmmOptions {
  GmmWeighting weighting = GmmWeighting::TwoStep;
  double theta_lower = 0.0;
  double theta_upper = 0.0;  // equal to lower: theta held fixed
  int max_outer = 50;
  double tol = 1e-8;
  int brent_bits = 40;
};

using ExposureBuilder = std::function<Eigen::VectorXd(double)>;
using InstrumentBuilder = std::function<Eigen::MatrixXd(double)>;

/// Moments E[Z(theta) (y - X gamma - lambda w(theta))] = 0. (gamma, lambda)
/// are solved in closed form for a given theta and weight; theta is updated by
/// alternating between recomputing the weight at theta_t and a Brent search
/// over [theta_lower, theta_upper] with that weight fixed.
EstimationResult gmm(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, const ExposureBuilder& exposure_builder,
                     const InstrumentBuilder& z_builder, double theta0, const std::vector<int>& cluster_id,
                     const GmmOptions& options = {});

struct ProfileTrace {
  std::vector<double> grid;
  std::vector<double> criterion;  // NaN where the point failed
  std::vector<double> lambda_path;
  std::vector<double> se_path;
  std::vector<double> partial_r2_path;
  std::vector<double> f_path;
  std::vector<std::optional<std::string>> errors;
  double argmin = 0.0;
  bool flat = false;
};

struct ProfileResult {
  ProfileTrace trace;
  EstimationResult estimate;
};

/// Two-step GMM J criterion on each grid point; argmin ties go to the smallest
/// theta. Throws only if every point fails.
ProfileResult profile_iv(const Eigen::VectorXd& y, const Eigen::MatrixXd& X, const ExposureBuilder& exposure_builder,
                         const InstrumentBuilder& z_builder, const std::vector<double>& theta_grid,
                         const std::vector<int>& cluster_id);

std::string to_json(const EstimationResult& r, int indent = 2);
std::string to_json(const ProfileTrace& t, int indent = 2);
/// Flat table: theta, lambda_hat, se, partial_r2, F, J.
void write_profile_csv(const ProfileResult& r, const std::filesystem::path& path);

}  // namespace normgame
