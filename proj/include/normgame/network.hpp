#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace normgame {

using Index = Eigen::Index;

/// One group's interaction matrix. Rows index the agent, columns its peers.
struct Network {
  int group_id = 0;
  Eigen::MatrixXd weights;      // n x n, nonnegative, zero diagonal
  Eigen::MatrixXd raw_weights;  // as supplied, before normalization (may be empty)
  bool row_normalized = false;
  std::vector<bool> isolate_mask;  // row sum zero

  Index size() const { return weights.rows(); }
  bool is_isolate(Index i) const { return isolate_mask[static_cast<std::size_t>(i)]; }
  std::size_t isolate_count() const;
};

/// Normalizes each non-isolate row to sum to one. Rows summing to zero are
/// left untouched and flagged as isolates.
Network row_normalize(const Eigen::MatrixXd& raw, int group_id = 0);

/// Elementwise max(W, W^T), for edge lists that describe undirected ties.
Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& raw);

/// Grouped network data. Node rows are stored group by group, so group g owns
/// global rows [offsets[g], offsets[g+1]).
struct Panel {
  std::vector<Network> groups;
  std::vector<Index> offsets;  // size groups.size() + 1
  Eigen::MatrixXd X;           // N x p, explicit intercept column included
  std::vector<std::string> x_names;
  std::optional<Eigen::VectorXd> y;
  std::vector<int> cluster_id;  // per node
  std::vector<std::string> group_labels;
  std::vector<std::string> node_labels;  // per node, label within its group

  Index num_nodes() const { return X.rows(); }
  Index num_covariates() const { return X.cols(); }
  std::size_t num_groups() const { return groups.size(); }
  Index group_size(std::size_t g) const { return offsets[g + 1] - offsets[g]; }

  auto X_group(std::size_t g) const { return X.middleRows(offsets[g], group_size(g)); }
  auto y_group(std::size_t g) const { return y->segment(offsets[g], group_size(g)); }

  std::size_t group_of(Index node) const;
  std::vector<bool> isolate_mask() const;
  std::vector<int> group_index_per_node() const;

  /// Builds offsets, default labels and clusters (= group) and checks shapes.
  static Panel assemble(std::vector<Network> groups, Eigen::MatrixXd X,
                        std::vector<std::string> x_names,
                        std::optional<Eigen::VectorXd> y = std::nullopt,
                        std::vector<int> cluster_id = {});

  /// Throws std::invalid_argument if any invariant is broken.
  void validate() const;
};

/// Extracts the columns of a per-node vector that belong to group g.
inline auto group_segment(const Eigen::VectorXd& v, const Panel& panel, std::size_t g) {
  return v.segment(panel.offsets[g], panel.group_size(g));
}

struct DropResult {
  Panel panel;
  std::vector<std::string> warnings;
  std::vector<Index> kept;  // global indices (in the input panel) of surviving nodes
};

/// Removes isolates. With `renormalize` the surviving rows are re-normalized
/// over surviving peers, and removal repeats until no isolate remains. Groups
/// that become empty are dropped with a warning.
DropResult drop_isolates(const Panel& panel, bool renormalize = true);

}  // namespace normgame
