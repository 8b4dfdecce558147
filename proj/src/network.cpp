#include "normgame/network.hpp"

#include "normgame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace normgame {

std::size_t Network::isolate_count() const {
  return static_cast<std::size_t>(std::count(isolate_mask.begin(), isolate_mask.end(), true));
}

Network row_normalize(const Eigen::MatrixXd& raw, int group_id) {
  if (raw.rows() != raw.cols()) {
    throw DomainError("row_normalize: weight matrix is " + std::to_string(raw.rows()) + "x" +
                      std::to_string(raw.cols()) + ", expected square");
  }
  const Index n = raw.rows();
  Network net;
  net.group_id = group_id;
  net.weights = raw;
  net.raw_weights = raw;
  net.isolate_mask.assign(static_cast<std::size_t>(n), false);
  for (Index i = 0; i < n; ++i) {
    if (raw(i, i) != 0.0) {
      throw DomainError("row_normalize: nonzero diagonal at node " + std::to_string(i));
    }
    double total = 0.0;
    for (Index j = 0; j < n; ++j) {
      const double g = raw(i, j);
      if (!(g >= 0.0) || !std::isfinite(g)) {
        throw DomainError("row_normalize: invalid weight " + std::to_string(g) + " at (" +
                          std::to_string(i) + "," + std::to_string(j) + ")");
      }
      total += g;
    }
    if (total == 0.0) {
      net.isolate_mask[static_cast<std::size_t>(i)] = true;
      continue;
    }
    net.weights.row(i) /= total;
  }
  net.row_normalized = true;
  return net;
}

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& raw) {
  return raw.cwiseMax(raw.transpose());
}

std::size_t Panel::group_of(Index node) const {
  auto it = std::upper_bound(offsets.begin(), offsets.end(), node);
  return static_cast<std::size_t>(std::distance(offsets.begin(), it) - 1);
}

std::vector<bool> Panel::isolate_mask() const {
  std::vector<bool> mask;
  mask.reserve(static_cast<std::size_t>(num_nodes()));
  for (const auto& net : groups) mask.insert(mask.end(), net.isolate_mask.begin(), net.isolate_mask.end());
  return mask;
}

std::vector<int> Panel::group_index_per_node() const {
  std::vector<int> out(static_cast<std::size_t>(num_nodes()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (Index i = offsets[g]; i < offsets[g + 1]; ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(g);
  }
  return out;
}

Panel Panel::assemble(std::vector<Network> groups, Eigen::MatrixXd X, std::vector<std::string> x_names,
                      std::optional<Eigen::VectorXd> y, std::vector<int> cluster_id) {
  Panel p;
  p.groups = std::move(groups);
  p.X = std::move(X);
  p.x_names = std::move(x_names);
  p.y = std::move(y);
  p.offsets.assign(p.groups.size() + 1, 0);
  for (std::size_t g = 0; g < p.groups.size(); ++g) p.offsets[g + 1] = p.offsets[g] + p.groups[g].size();
  if (p.x_names.empty()) {
    for (Index k = 0; k < p.X.cols(); ++k) p.x_names.push_back(k == 0 ? "const" : "x" + std::to_string(k));
  }
  if (cluster_id.empty()) {
    cluster_id = p.group_index_per_node();
  }
  p.cluster_id = std::move(cluster_id);
  std::set<int> ids;
  for (const auto& net : p.groups) ids.insert(net.group_id);
  const bool distinct = ids.size() == p.groups.size();
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    p.group_labels.push_back(std::to_string(distinct ? p.groups[g].group_id : static_cast<int>(g)));
    for (Index i = 0; i < p.groups[g].size(); ++i) p.node_labels.push_back(std::to_string(i));
  }
  p.validate();
  return p;
}

void Panel::validate() const {
  if (offsets.size() != groups.size() + 1) throw std::invalid_argument("Panel: offsets size mismatch");
  if (offsets.back() != X.rows()) {
    throw std::invalid_argument("Panel: " + std::to_string(X.rows()) + " covariate rows for " +
                                std::to_string(offsets.back()) + " network nodes");
  }
  if (static_cast<Index>(x_names.size()) != X.cols()) throw std::invalid_argument("Panel: x_names size mismatch");
  if (y && y->size() != X.rows()) throw std::invalid_argument("Panel: outcome length mismatch");
  if (static_cast<Index>(cluster_id.size()) != X.rows()) throw std::invalid_argument("Panel: cluster_id size mismatch");
  for (const auto& net : groups) {
    if (net.weights.rows() != net.weights.cols()) throw std::invalid_argument("Panel: non-square network");
    if (static_cast<Index>(net.isolate_mask.size()) != net.size()) {
      throw std::invalid_argument("Panel: isolate mask size mismatch");
    }
  }
}

namespace {

// One removal pass. Returns true if anything was removed.
bool drop_pass(Panel& panel, std::vector<Index>& kept, bool renormalize, std::vector<std::string>& warnings) {
  bool removed_any = false;
  std::vector<Network> groups;
  std::vector<Index> rows;
  std::vector<Index> new_kept;
  std::vector<std::string> group_labels;
  std::vector<std::string> node_labels;
  for (std::size_t g = 0; g < panel.groups.size(); ++g) {
    const Network& net = panel.groups[g];
    std::vector<Index> keep;
    for (Index i = 0; i < net.size(); ++i) {
      if (!net.is_isolate(i)) keep.push_back(i);
    }
    if (static_cast<Index>(keep.size()) != net.size()) removed_any = true;
    if (keep.empty()) {
      warnings.push_back("group " + panel.group_labels[g] + " contains only isolates; dropped");
      continue;
    }
    const Index m = static_cast<Index>(keep.size());
    const Eigen::MatrixXd& source = (renormalize && net.raw_weights.size() == net.weights.size())
                                        ? net.raw_weights
                                        : net.weights;
    Eigen::MatrixXd w(m, m);
    for (Index a = 0; a < m; ++a) {
      for (Index b = 0; b < m; ++b) {
        w(a, b) = source(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
      }
    }
    Network sub;
    if (renormalize) {
      sub = row_normalize(w, net.group_id);
    } else {
      sub.group_id = net.group_id;
      sub.weights = std::move(w);
      sub.row_normalized = false;
      sub.isolate_mask.assign(static_cast<std::size_t>(m), false);
      for (Index a = 0; a < m; ++a) sub.isolate_mask[static_cast<std::size_t>(a)] = sub.weights.row(a).sum() == 0.0;
    }
    groups.push_back(std::move(sub));
    group_labels.push_back(panel.group_labels[g]);
    for (Index i : keep) {
      const Index global = panel.offsets[g] + i;
      rows.push_back(global);
      new_kept.push_back(kept[static_cast<std::size_t>(global)]);
      node_labels.push_back(panel.node_labels[static_cast<std::size_t>(global)]);
    }
  }
  if (!removed_any) return false;

  const Index n = static_cast<Index>(rows.size());
  Eigen::MatrixXd X(n, panel.X.cols());
  std::optional<Eigen::VectorXd> y;
  if (panel.y) y = Eigen::VectorXd(n);
  std::vector<int> clusters(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const Index src = rows[static_cast<std::size_t>(r)];
    X.row(r) = panel.X.row(src);
    if (y) (*y)(r) = (*panel.y)(src);
    clusters[static_cast<std::size_t>(r)] = panel.cluster_id[static_cast<std::size_t>(src)];
  }
  Panel out = Panel::assemble(std::move(groups), std::move(X), panel.x_names, std::move(y), std::move(clusters));
  out.group_labels = std::move(group_labels);
  out.node_labels = std::move(node_labels);
  panel = std::move(out);
  kept = std::move(new_kept);
  return true;
}

}  // namespace

DropResult drop_isolates(const Panel& panel, bool renormalize) {
  DropResult result{panel, {}, {}};
  result.kept.resize(static_cast<std::size_t>(panel.num_nodes()));
  for (Index i = 0; i < panel.num_nodes(); ++i) result.kept[static_cast<std::size_t>(i)] = i;
  // Re-normalizing can orphan nodes whose only peers were isolates, so repeat.
  while (drop_pass(result.panel, result.kept, renormalize, result.warnings)) {
    if (!renormalize) break;
  }
  return result;
}

}  // namespace normgame
