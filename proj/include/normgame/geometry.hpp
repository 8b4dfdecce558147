#pragma once

#include "normgame/aggregators.hpp"
#include "normgame/kernels.hpp"
#include "normgame/network.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace normgame {

struct TransportOperator {
  Eigen::MatrixXd P;
  double theta = 0.0;
  Eigen::VectorXd eval_point;
  Family source = Family::LIM;
  std::vector<bool> isolate_mask;
};

/// Row-normalized influence weights at yhat. LIM returns G itself.
TransportOperator transport(const Network& net, const Eigen::VectorXd& yhat, const AggregatorSpec& spec);

/// {P^2 X, ..., P^K X}, one matrix per depth.
std::vector<Eigen::MatrixXd> multistep_instruments(const TransportOperator& op, const Eigen::MatrixXd& X, int K);

Eigen::MatrixXd effective_distances(const TransportOperator& op, double epsilon0 = 1e-8,
                                    double cutoff = kernels::kNoCutoff);

/// {S_2 X, ..., S_H X} with S_h(i) = {j : d(i,j) in (h-1, h]}; plain sums.
std::vector<Eigen::MatrixXd> shell_instruments(const Eigen::MatrixXd& distances, const Eigen::MatrixXd& X, int H);

/// Covariates of nodes at exactly `hops` hops on the support of G. Averaged
/// over the shell when row_normalize is set, summed otherwise.
Eigen::MatrixXd hop_shell(const Network& net, const Eigen::MatrixXd& X, int hops = 2, bool row_normalize = true);

Eigen::MatrixXd torsion_instrument(const TransportOperator& op, const Eigen::MatrixXd& X);

/// Named column block. `included` holds the exogenous covariates, `excluded`
/// the instruments that enter only the first stage.
struct InstrumentSignature {
  Eigen::MatrixXd included;
  std::vector<std::string> included_names;
  Eigen::MatrixXd excluded;
  std::vector<std::string> excluded_names;
  int K = 0;
  int H = 0;
  double epsilon0 = 1e-8;
  std::vector<std::string> warnings;

  Index excluded_count() const { return excluded.cols(); }
  /// [included, excluded]
  Eigen::MatrixXd full() const;
  std::vector<std::string> names() const;
};

struct MenuOptions {
  bool steps = false;            // P^2 X .. P^K X
  bool shells = false;           // effective-distance shells 2..H
  bool torsion = false;
  bool hop_shell2 = false;       // exact distance-2 adjacency on G
  bool hop_shell_rownorm = true;
  bool dstep2 = false;           // d/dtheta of P^2 X
  bool dtheta_phi = true;        // BRUZ derivative column (smooth families)
  bool quantile_dtheta = false;  // opt-in finite difference in q
  int K = 3;
  int H = 4;
  double epsilon0 = 1e-8;
  double fd_step = 1e-4;
  double cutoff = kernels::kNoCutoff;

  static MenuOptions bruz() { return {}; }
  /// BRUZ + P^2 X + d(P^2 X) + row-normalized hop Shell_2(G) X.
  static MenuOptions geo();
  /// BRUZ + P^2..P^K X + shells 2..H + torsion.
  static MenuOptions geo_full(int K = 3, int H = 4);
  static MenuOptions from_name(const std::string& name);
  bool any_geometry() const { return steps || shells || torsion || hop_shell2 || dstep2; }
};

/// Per group: [x | Phi(yhat), dtheta Phi(yhat)]. X is the group's covariate
/// block; `geo_cols` selects the covariates that feed geometry blocks.
InstrumentSignature bruz_menu(const Network& net, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                              const std::vector<std::string>& x_names, const AggregatorSpec& spec,
                              const MenuOptions& options = {});

InstrumentSignature geo_menu(const Network& net, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                             const std::vector<std::string>& x_names, const AggregatorSpec& spec,
                             const MenuOptions& options);

/// Stacks per-group menus over the whole panel. Geometry blocks use only the
/// covariates that vary across nodes (the intercept would just reproduce 1).
InstrumentSignature build_menu(const Panel& panel, const Eigen::VectorXd& yhat, const AggregatorSpec& spec,
                               const MenuOptions& options);

/// Indices of columns of X that are not constant.
std::vector<Index> varying_columns(const Eigen::MatrixXd& X);

void write_instruments_csv(const Panel& panel, const InstrumentSignature& sig, const std::filesystem::path& path,
                           const std::optional<Eigen::VectorXd>& yhat = std::nullopt);

}  // namespace normgame
