#include "normgame/geometry.hpp"

#include "normgame/csv.hpp"
#include "normgame/errors.hpp"

#include <cmath>
#include <fstream>

namespace normgame {

TransportOperator transport(const Network& net, const Eigen::VectorXd& yhat, const AggregatorSpec& spec) {
  TransportOperator op;
  op.theta = spec.theta;
  op.eval_point = yhat;
  op.source = spec.family;
  op.isolate_mask = net.isolate_mask;
  if (spec.family == Family::LIM) {
    if (yhat.size() != net.size()) throw std::invalid_argument("transport: yhat length mismatch");
    op.P = net.weights;
    return op;
  }
  Eigen::MatrixXd W = spec.family == Family::Quantile ? quantile_influence(net, yhat, spec.theta)
                                                      : jacobian(net, yhat, spec);
  for (Index i = 0; i < W.rows(); ++i) {
    if (net.is_isolate(i)) {
      W.row(i).setZero();
      continue;
    }
    const double total = W.row(i).sum();
    if (!(total > 0.0) || !std::isfinite(total)) {
      throw DegenerateRowError(static_cast<std::size_t>(i),
                               "transport: node " + std::to_string(i) + " has no positive influence weight");
    }
    W.row(i) /= total;
  }
  op.P = std::move(W);
  return op;
}

std::vector<Eigen::MatrixXd> multistep_instruments(const TransportOperator& op, const Eigen::MatrixXd& X, int K) {
  if (K < 2) throw std::invalid_argument("multistep_instruments: K must be at least 2");
  std::vector<Eigen::MatrixXd> out;
  Eigen::MatrixXd cur = kernels::propagate(op.P, X);
  for (int k = 2; k <= K; ++k) {
    cur = kernels::propagate(op.P, cur);
    out.push_back(cur);
  }
  return out;
}

Eigen::MatrixXd effective_distances(const TransportOperator& op, double epsilon0, double cutoff) {
  if (!(epsilon0 > 0.0)) throw DomainError("effective_distances: epsilon0 must be positive");
  return kernels::all_pairs_dijkstra(op.P, epsilon0, cutoff);
}

std::vector<Eigen::MatrixXd> shell_instruments(const Eigen::MatrixXd& distances, const Eigen::MatrixXd& X, int H) {
  if (H < 2) throw std::invalid_argument("shell_instruments: H must be at least 2");
  const Index n = distances.rows();
  std::vector<Eigen::MatrixXd> out(static_cast<std::size_t>(H - 1), Eigen::MatrixXd::Zero(n, X.cols()));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const double d = distances(i, j);
      if (!std::isfinite(d) || d <= 1.0) continue;
      const double h = std::ceil(d);
      if (h > H) continue;
      out[static_cast<std::size_t>(h) - 2].row(i) += X.row(j);
    }
  }
  return out;
}

Eigen::MatrixXd hop_shell(const Network& net, const Eigen::MatrixXd& X, int hops, bool row_normalize) {
  if (hops < 1) throw std::invalid_argument("hop_shell: hops must be positive");
  const Index n = net.size();
  // BFS on the support of G from every node.
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, X.cols());
  std::vector<int> depth(static_cast<std::size_t>(n));
  std::vector<Index> frontier;
  std::vector<Index> next;
  for (Index s = 0; s < n; ++s) {
    std::fill(depth.begin(), depth.end(), -1);
    depth[static_cast<std::size_t>(s)] = 0;
    frontier.assign(1, s);
    for (int h = 1; h <= hops && !frontier.empty(); ++h) {
      next.clear();
      for (Index u : frontier) {
        for (Index v = 0; v < n; ++v) {
          if (net.weights(u, v) > 0.0 && depth[static_cast<std::size_t>(v)] < 0) {
            depth[static_cast<std::size_t>(v)] = h;
            next.push_back(v);
          }
        }
      }
      frontier.swap(next);
    }
    if (frontier.empty()) continue;
    // frontier holds exactly the nodes first reached at `hops`.
    for (Index v : frontier) out.row(s) += X.row(v);
    if (row_normalize) out.row(s) /= static_cast<double>(frontier.size());
  }
  return out;
}

Eigen::MatrixXd torsion_instrument(const TransportOperator& op, const Eigen::MatrixXd& X) {
  return kernels::wedge_torsion(op.P, X);
}

Eigen::MatrixXd InstrumentSignature::full() const {
  Eigen::MatrixXd out(included.rows(), included.cols() + excluded.cols());
  out << included, excluded;
  return out;
}

std::vector<std::string> InstrumentSignature::names() const {
  std::vector<std::string> out = included_names;
  out.insert(out.end(), excluded_names.begin(), excluded_names.end());
  return out;
}

MenuOptions MenuOptions::geo() {
  MenuOptions o;
  o.steps = true;
  o.K = 2;
  o.dstep2 = true;
  o.hop_shell2 = true;
  return o;
}

MenuOptions MenuOptions::geo_full(int K, int H) {
  MenuOptions o;
  o.steps = true;
  o.shells = true;
  o.torsion = true;
  o.K = K;
  o.H = H;
  return o;
}

MenuOptions MenuOptions::from_name(const std::string& name) {
  if (name == "bruz") return bruz();
  if (name == "geo") return geo();
  if (name == "geo-full" || name == "geo_full") return geo_full();
  throw std::invalid_argument("unknown menu '" + name + "' (expected bruz, geo or geo-full)");
}

std::vector<Index> varying_columns(const Eigen::MatrixXd& X) {
  std::vector<Index> cols;
  for (Index k = 0; k < X.cols(); ++k) {
    if (X.rows() > 0 && (X.col(k).array() != X(0, k)).any()) cols.push_back(k);
  }
  return cols;
}

namespace {

Eigen::MatrixXd select_cols(const Eigen::MatrixXd& X, const std::vector<Index>& cols) {
  Eigen::MatrixXd out(X.rows(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = X.col(cols[c]);
  return out;
}

void append(InstrumentSignature& sig, const Eigen::MatrixXd& block, const std::vector<std::string>& names) {
  Eigen::MatrixXd merged(block.rows(), sig.excluded.cols() + block.cols());
  if (sig.excluded.cols() > 0) merged.leftCols(sig.excluded.cols()) = sig.excluded;
  merged.rightCols(block.cols()) = block;
  sig.excluded = std::move(merged);
  sig.excluded_names.insert(sig.excluded_names.end(), names.begin(), names.end());
}

std::vector<std::string> tagged(const std::string& prefix, const std::vector<std::string>& x_names,
                                const std::vector<Index>& cols) {
  std::vector<std::string> out;
  for (Index c : cols) out.push_back(prefix + "_" + x_names[static_cast<std::size_t>(c)]);
  return out;
}

bool wants_dtheta(const AggregatorSpec& spec, const MenuOptions& o) {
  if (spec.family == Family::LIM) return false;
  if (spec.family == Family::Quantile) return o.quantile_dtheta;
  return true;
}

// d/dtheta of P(theta)^2 X by the same stencil rule as dtheta_exposure.
Eigen::MatrixXd dstep2(const Network& net, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& Xg,
                       const AggregatorSpec& spec, double step, std::vector<std::string>& warnings) {
  const double t = spec.theta;
  const double h = step * std::max(1.0, std::abs(t));
  auto p2x = [&](double th) {
    const auto op = transport(net, yhat, spec.with_theta(th));
    return kernels::propagate(op.P, kernels::propagate(op.P, Xg));
  };
  const bool up = spec.theta_in_domain(t + h);
  const bool down = spec.theta_in_domain(t - h);
  if (up && down) return (p2x(t + h) - p2x(t - h)) / (2.0 * h);
  warnings.emplace_back("dstep2: one-sided difference at theta = " + std::to_string(t));
  if (up) return (p2x(t + h) - p2x(t)) / h;
  if (down) return (p2x(t) - p2x(t - h)) / h;
  throw DomainError("dstep2: no admissible stencil around theta = " + std::to_string(t));
}

InstrumentSignature group_menu(const Network& net, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                               const std::vector<std::string>& x_names, const AggregatorSpec& spec,
                               const MenuOptions& o, const std::vector<Index>& geo_cols) {
  if (X.rows() != net.size() || yhat.size() != net.size()) {
    throw std::invalid_argument("menu: covariates, predictor and network sizes differ");
  }
  InstrumentSignature sig;
  sig.included = X;
  sig.included_names = x_names;
  sig.excluded.resize(X.rows(), 0);
  sig.K = o.steps ? o.K : 0;
  sig.H = o.shells ? o.H : 0;
  sig.epsilon0 = o.epsilon0;

  append(sig, exposure(net, yhat, spec).values, {"phi"});
  if (o.dtheta_phi && wants_dtheta(spec, o)) {
    auto d = dtheta_exposure(net, yhat, spec, o.fd_step, o.quantile_dtheta);
    if (d.warning) sig.warnings.push_back(*d.warning);
    append(sig, d.values, {"dphi"});
  }
  if (!o.any_geometry() || geo_cols.empty()) return sig;

  const Eigen::MatrixXd Xg = select_cols(X, geo_cols);
  const bool need_op = o.steps || o.shells || o.torsion;
  std::optional<TransportOperator> op;
  if (need_op) op = transport(net, yhat, spec);

  if (o.steps) {
    const auto blocks = multistep_instruments(*op, Xg, o.K);
    for (int k = 2; k <= o.K; ++k) {
      append(sig, blocks[static_cast<std::size_t>(k - 2)], tagged("step" + std::to_string(k), x_names, geo_cols));
    }
  }
  if (o.dstep2 && wants_dtheta(spec, o)) {
    append(sig, dstep2(net, yhat, Xg, spec, o.fd_step, sig.warnings), tagged("dstep2", x_names, geo_cols));
  }
  if (o.hop_shell2) {
    append(sig, hop_shell(net, Xg, 2, o.hop_shell_rownorm), tagged("hopshell2", x_names, geo_cols));
  }
  if (o.shells) {
    const Eigen::MatrixXd D = effective_distances(*op, o.epsilon0, o.cutoff);
    const auto blocks = shell_instruments(D, Xg, o.H);
    for (int h = 2; h <= o.H; ++h) {
      append(sig, blocks[static_cast<std::size_t>(h - 2)], tagged("shell" + std::to_string(h), x_names, geo_cols));
    }
  }
  if (o.torsion) append(sig, torsion_instrument(*op, Xg), tagged("torsion", x_names, geo_cols));
  return sig;
}

}  // namespace

InstrumentSignature bruz_menu(const Network& net, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                              const std::vector<std::string>& x_names, const AggregatorSpec& spec,
                              const MenuOptions& options) {
  MenuOptions o = options;
  o.steps = o.shells = o.torsion = o.hop_shell2 = o.dstep2 = false;
  return group_menu(net, yhat, X, x_names, spec, o, {});
}

InstrumentSignature geo_menu(const Network& net, const Eigen::VectorXd& yhat, const Eigen::MatrixXd& X,
                             const std::vector<std::string>& x_names, const AggregatorSpec& spec,
                             const MenuOptions& options) {
  return group_menu(net, yhat, X, x_names, spec, options, varying_columns(X));
}

InstrumentSignature build_menu(const Panel& panel, const Eigen::VectorXd& yhat, const AggregatorSpec& spec,
                               const MenuOptions& options) {
  if (yhat.size() != panel.num_nodes()) throw std::invalid_argument("build_menu: yhat length mismatch");
  const std::vector<Index> geo_cols = varying_columns(panel.X);
  InstrumentSignature out;
  out.included = panel.X;
  out.included_names = panel.x_names;
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    const Index off = panel.offsets[g];
    const Index n = panel.group_size(g);
    InstrumentSignature sig;
    try {
      sig = group_menu(panel.groups[g], yhat.segment(off, n), panel.X.middleRows(off, n), panel.x_names, spec, options,
                       geo_cols);
    } catch (const DegenerateRowError& e) {
      throw DegenerateRowError(static_cast<std::size_t>(off) + e.node(),
                               "group " + panel.group_labels[g] + ": " + e.what());
    } catch (const DomainError& e) {
      throw DomainError("group " + panel.group_labels[g] + ": " + e.what());
    }
    if (g == 0) {
      out.excluded.resize(panel.num_nodes(), sig.excluded.cols());
      out.excluded_names = sig.excluded_names;
      out.K = sig.K;
      out.H = sig.H;
      out.epsilon0 = sig.epsilon0;
    }
    out.excluded.middleRows(off, n) = sig.excluded;
    for (auto& w : sig.warnings) out.warnings.push_back("group " + panel.group_labels[g] + ": " + w);
  }
  return out;
}

void write_instruments_csv(const Panel& panel, const InstrumentSignature& sig, const std::filesystem::path& path,
                           const std::optional<Eigen::VectorXd>& yhat) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::vector<std::string> header{"group", "node"};
  if (yhat) header.emplace_back("yhat");
  for (const auto& n : sig.excluded_names) header.push_back(n);
  out << csv::join(header) << '\n';
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    for (Index i = panel.offsets[g]; i < panel.offsets[g + 1]; ++i) {
      std::vector<std::string> row{panel.group_labels[g], panel.node_labels[static_cast<std::size_t>(i)]};
      if (yhat) row.push_back(csv::format_double((*yhat)(i)));
      for (Index c = 0; c < sig.excluded.cols(); ++c) row.push_back(csv::format_double(sig.excluded(i, c)));
      out << csv::join(row) << '\n';
    }
  }
}

}  // namespace normgame
