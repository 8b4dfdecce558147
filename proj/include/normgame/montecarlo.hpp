#pragma once

#include "normgame/network.hpp"
#include "normgame/predictor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace normgame {

/// splitmix64 finalizer; the building block for all seed derivation.
std::uint64_t mix64(std::uint64_t x);
/// Independent stream seed for (base, a, b, tag).
std::uint64_t stream_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t tag);

struct DesignParams {
  double d_in = 6.0;     // expected within-block degree
  int bridges = 2;       // undirected cross-block links
  double sigma_a = 0.5;  // covariate scale, low-dispersion block
  double sigma_b = 2.0;  // covariate scale, high-dispersion block
};

struct SimGroup {
  Network net;
  Eigen::MatrixXd X;       // [1, x]
  std::vector<int> block;  // 0 = A, 1 = B; for stars 0 = hub a side, 1 = hub b side
  int attempts = 1;
};

/// Two equal blocks, Erdos-Renyi inside each block (undirected, expected
/// degree d_in) and `bridges` random cross links. Draws are redone with the
/// next sub-seed until no node is isolated and each block is connected;
/// std::runtime_error after 100 attempts.
SimGroup dispersion_bridge(int n, std::uint64_t seed, const DesignParams& params = {});

/// Hub a, its m_a peripherals, hub b, its m_b peripherals. Peripheral rows put
/// weight 1 on their hub; hub rows spread 1/m evenly. Hub covariates are 1 and
/// 1 (equal) or 1 and 2; peripheral covariates are 0.1 k unless a seed is
/// given, in which case they are standard normal draws.
SimGroup two_star(int m_a, int m_b, bool equal_hub_covariates, std::optional<std::uint64_t> seed = std::nullopt);

struct McConfig {
  std::vector<int> n{600, 2400};
  std::vector<double> beta_fix{0.8, 1.2, 1.6, 2.0};
  int group_size = 60;
  double lambda0 = 0.3;
  std::vector<double> gamma0{0.0, 1.0};
  double sigma_eps = 1.0;
  double zeta_scale = 0.5;
  DesignParams design;
  int R = 100;
  PredictorSpec predictor;
  std::vector<std::string> menus{"bruz", "geo"};
  std::uint64_t seed = 20240917;
  double tol = 1e-10;
  int max_iter = 500;
  bool correlated_shocks = false;
  double group_shock_sd = 0.5;  // sd of u_s when correlated_shocks is on
  std::optional<double> shift;  // fixed CES shift; default follows the data
  int K = 3;
  int H = 4;
  double epsilon0 = 1e-8;
  int threads = 0;  // 0: OpenMP default

  void validate() const;
};

/// Applies one `key=value` override using McConfig field names. Lists are
/// comma separated. Throws std::invalid_argument naming an unknown key.
void apply_setting(McConfig& config, const std::string& key, const std::string& value);
/// Canonical `key=value` lines; stable across runs, used for hashing.
std::string serialize(const McConfig& config);

struct McCell {
  int n = 0;
  double beta = 0.0;
  std::string menu;
  double bias_lambda = 0.0;
  double rmse_lambda = 0.0;
  double mean_se = 0.0;
  double mean_partial_r2 = 0.0;
  double mean_f = 0.0;
  double mean_f_robust = 0.0;
  int used = 0;
  int nonconverged_count = 0;
  int failed_count = 0;
  int excluded_replications = 0;
  std::vector<std::string> errors;  // first few failure messages
};

struct DesignDiagnostics {
  int n = 0;
  double beta = 0.0;
  double exposure_dispersion = 0.0;  // sd(w) / mean(w)
  double max_share_mean = 0.0;       // mean_i max_j P_ij
  double max_share_p90 = 0.0;
  double intensity_dispersion = 0.0;  // sd(s) / mean(s), s_i = sum_j g_ij yhat_j^(beta-1)
  double contraction_bound_mean = 0.0;
  int contraction_warnings = 0;  // replications with bound >= 1
};

struct McReport {
  std::vector<std::string> menus;
  std::vector<McCell> cells;
  std::vector<DesignDiagnostics> diagnostics;
  int replications = 0;
  double lambda0 = 0.0;
  double seconds = 0.0;
  int threads = 1;

  const McCell* find(int n, double beta, const std::string& menu) const;
};

McReport run_mc(const McConfig& config);

/// table1.csv (bias/RMSE), table2.csv (partial R2/F), report.json and meta.json.
void emit_tables(const McReport& report, const std::filesystem::path& dir, const std::string& config_text = {},
                 const std::map<std::string, std::string>& extra_meta = {});

std::string menu_label(const std::string& menu);

}  // namespace normgame
