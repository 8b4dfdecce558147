#include "normgame/montecarlo.hpp"

#include "normgame/aggregators.hpp"
#include "normgame/csv.hpp"
#include "normgame/equilibrium.hpp"
#include "normgame/estimate.hpp"
#include "normgame/geometry.hpp"
#include "normgame/hash.hpp"
#include "normgame/kernels.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace normgame {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t tag) {
  return mix64(mix64(mix64(mix64(base) ^ a) ^ b) ^ tag);
}

namespace {

enum Stream : std::uint64_t { kNetwork = 1, kShocks = 3, kPredictor = 4, kGroupShock = 5 };

bool connected(const Eigen::MatrixXd& A, const std::vector<Index>& nodes) {
  if (nodes.empty()) return true;
  std::vector<char> in(static_cast<std::size_t>(A.rows()), 0);
  for (Index v : nodes) in[static_cast<std::size_t>(v)] = 1;
  std::vector<char> seen(static_cast<std::size_t>(A.rows()), 0);
  std::vector<Index> stack{nodes.front()};
  seen[static_cast<std::size_t>(nodes.front())] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    const Index u = stack.back();
    stack.pop_back();
    for (Index v = 0; v < A.rows(); ++v) {
      if (A(u, v) > 0.0 && in[static_cast<std::size_t>(v)] && !seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = 1;
        ++count;
        stack.push_back(v);
      }
    }
  }
  return count == nodes.size();
}

}  // namespace

SimGroup dispersion_bridge(int n, std::uint64_t seed, const DesignParams& p) {
  if (n < 8) throw std::invalid_argument("dispersion_bridge: n must be at least 8, got " + std::to_string(n));
  if (p.d_in <= 0.0 || p.bridges < 0 || p.sigma_a < 0.0 || p.sigma_b < 0.0) {
    throw std::invalid_argument("dispersion_bridge: invalid design parameters");
  }
  const int na = n / 2;
  std::vector<Index> block_a(static_cast<std::size_t>(na));
  std::vector<Index> block_b(static_cast<std::size_t>(n - na));
  std::iota(block_a.begin(), block_a.end(), 0);
  std::iota(block_b.begin(), block_b.end(), na);

  for (int attempt = 0; attempt < 100; ++attempt) {
    std::mt19937_64 rng(stream_seed(seed, static_cast<std::uint64_t>(attempt), 0, kNetwork));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    for (const auto* blk : {&block_a, &block_b}) {
      const double prob = std::min(1.0, p.d_in / static_cast<double>(blk->size() - 1));
      for (std::size_t a = 0; a < blk->size(); ++a) {
        for (std::size_t b = a + 1; b < blk->size(); ++b) {
          if (unif(rng) < prob) A((*blk)[a], (*blk)[b]) = A((*blk)[b], (*blk)[a]) = 1.0;
        }
      }
    }
    std::uniform_int_distribution<Index> pick_a(0, na - 1);
    std::uniform_int_distribution<Index> pick_b(na, n - 1);
    const int max_bridges = na * (n - na);
    for (int placed = 0; placed < std::min(p.bridges, max_bridges);) {
      const Index i = pick_a(rng);
      const Index j = pick_b(rng);
      if (A(i, j) > 0.0) continue;
      A(i, j) = A(j, i) = 1.0;
      ++placed;
    }
    bool ok = connected(A, block_a) && connected(A, block_b);
    for (Index i = 0; ok && i < n; ++i) ok = A.row(i).sum() > 0.0;
    if (!ok) continue;

    SimGroup out;
    out.net = row_normalize(A);
    out.attempts = attempt + 1;
    out.X.resize(n, 2);
    out.block.assign(static_cast<std::size_t>(n), 0);
    std::normal_distribution<double> z(0.0, 1.0);
    for (Index i = 0; i < n; ++i) {
      const bool in_b = i >= na;
      out.block[static_cast<std::size_t>(i)] = in_b ? 1 : 0;
      out.X(i, 0) = 1.0;
      out.X(i, 1) = (in_b ? p.sigma_b : p.sigma_a) * z(rng);
    }
    return out;
  }
  throw std::runtime_error("dispersion_bridge: no admissible network after 100 attempts (n=" + std::to_string(n) +
                           ", d_in=" + std::to_string(p.d_in) + ")");
}

SimGroup two_star(int m_a, int m_b, bool equal_hub_covariates, std::optional<std::uint64_t> seed) {
  if (m_a < 2 || m_b < 2) throw std::invalid_argument("two_star: each star needs at least 2 peripherals");
  const int n = m_a + m_b + 2;
  const Index hub_a = 0;
  const Index hub_b = m_a + 1;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  SimGroup out;
  out.block.assign(static_cast<std::size_t>(n), 0);
  for (Index i = 1; i <= m_a; ++i) {
    A(i, hub_a) = 1.0;
    A(hub_a, i) = 1.0 / m_a;
  }
  for (Index i = hub_b + 1; i < n; ++i) {
    A(i, hub_b) = 1.0;
    A(hub_b, i) = 1.0 / m_b;
  }
  for (Index i = hub_b; i < n; ++i) out.block[static_cast<std::size_t>(i)] = 1;
  out.net = row_normalize(A);
  out.X.resize(n, 2);
  out.X.col(0).setOnes();
  std::mt19937_64 rng(seed.value_or(0));
  std::normal_distribution<double> z(0.0, 1.0);
  for (Index i = 0; i < n; ++i) out.X(i, 1) = seed ? z(rng) : 0.1 * static_cast<double>(i);
  out.X(hub_a, 1) = 1.0;
  out.X(hub_b, 1) = equal_hub_covariates ? 1.0 : 2.0;
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

void McConfig::validate() const {
  if (R < 1) throw std::invalid_argument("R must be at least 1");
  if (n.empty() || beta_fix.empty() || menus.empty()) throw std::invalid_argument("n, beta_fix and menus must be nonempty");
  for (int v : n) {
    if (v < 8) throw std::invalid_argument("n must be at least 8, got " + std::to_string(v));
  }
  for (double b : beta_fix) {
    if (b == 0.0 || !std::isfinite(b)) throw std::invalid_argument("beta_fix entries must be finite and nonzero");
  }
  if (group_size < 8) throw std::invalid_argument("group_size must be at least 8");
  if (gamma0.size() != 2) throw std::invalid_argument("gamma0 must have 2 entries (intercept, x)");
  if (sigma_eps < 0.0 || zeta_scale < 0.0 || group_shock_sd < 0.0) throw std::invalid_argument("scales must be nonnegative");
  if (!(tol > 0.0) || max_iter < 1) throw std::invalid_argument("tol must be positive and max_iter >= 1");
  if (K < 2 || H < 2) throw std::invalid_argument("K and H must be at least 2");
  if (!(epsilon0 > 0.0)) throw std::invalid_argument("epsilon0 must be positive");
  for (const auto& m : menus) MenuOptions::from_name(m);
  predictor.validate();
}

namespace {

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto& f : csv::split(v)) {
    if (!f.empty()) out.push_back(f);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  auto d = csv::parse_double(v);
  if (!d) throw std::invalid_argument("value for '" + key + "' is not a number: '" + v + "'");
  return *d;
}

long long to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d) || std::abs(d) > 9e15) throw std::invalid_argument("value for '" + key + "' is not an integer");
  return static_cast<long long>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("value for '" + key + "' is not a boolean: '" + v + "'");
}

std::string join_numbers(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double d : v) s.push_back(csv::format_double(d));
  return csv::join(s);
}

}  // namespace

void apply_setting(McConfig& c, const std::string& key, const std::string& value) {
  const std::string& v = value;
  if (key == "n") {
    c.n.clear();
    for (const auto& f : split_list(v)) c.n.push_back(static_cast<int>(to_int(key, f)));
  } else if (key == "beta_fix" || key == "beta") {
    c.beta_fix.clear();
    for (const auto& f : split_list(v)) c.beta_fix.push_back(to_double(key, f));
  } else if (key == "group_size") {
    c.group_size = static_cast<int>(to_int(key, v));
  } else if (key == "lambda0") {
    c.lambda0 = to_double(key, v);
  } else if (key == "gamma0") {
    c.gamma0.clear();
    for (const auto& f : split_list(v)) c.gamma0.push_back(to_double(key, f));
  } else if (key == "sigma_eps") {
    c.sigma_eps = to_double(key, v);
  } else if (key == "zeta_scale") {
    c.zeta_scale = to_double(key, v);
  } else if (key == "d_in") {
    c.design.d_in = to_double(key, v);
  } else if (key == "bridges" || key == "b") {
    c.design.bridges = static_cast<int>(to_int(key, v));
  } else if (key == "sigma_a") {
    c.design.sigma_a = to_double(key, v);
  } else if (key == "sigma_b") {
    c.design.sigma_b = to_double(key, v);
  } else if (key == "R" || key == "replications") {
    c.R = static_cast<int>(to_int(key, v));
  } else if (key == "predictor") {
    c.predictor.kind = parse_predictor(v);
  } else if (key == "folds") {
    c.predictor.folds = static_cast<int>(to_int(key, v));
  } else if (key == "group_effects") {
    c.predictor.include_group_effects = to_bool(key, v);
  } else if (key == "menus") {
    c.menus = split_list(v);
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(to_int(key, v));
  } else if (key == "tol") {
    c.tol = to_double(key, v);
  } else if (key == "max_iter") {
    c.max_iter = static_cast<int>(to_int(key, v));
  } else if (key == "correlated_shocks") {
    c.correlated_shocks = to_bool(key, v);
  } else if (key == "group_shock_sd") {
    c.group_shock_sd = to_double(key, v);
  } else if (key == "shift") {
    if (v == "auto") c.shift.reset();
    else c.shift = to_double(key, v);
  } else if (key == "K") {
    c.K = static_cast<int>(to_int(key, v));
  } else if (key == "H") {
    c.H = static_cast<int>(to_int(key, v));
  } else if (key == "epsilon0") {
    c.epsilon0 = to_double(key, v);
  } else if (key == "threads") {
    c.threads = static_cast<int>(to_int(key, v));
  } else {
    throw std::invalid_argument("unknown config key '" + key + "'");
  }
}

std::string serialize(const McConfig& c) {
  std::ostringstream o;
  std::vector<std::string> ns;
  for (int v : c.n) ns.push_back(std::to_string(v));
  o << "n=" << csv::join(ns) << '\n';
  o << "beta_fix=" << join_numbers(c.beta_fix) << '\n';
  o << "group_size=" << c.group_size << '\n';
  o << "lambda0=" << csv::format_double(c.lambda0) << '\n';
  o << "gamma0=" << join_numbers(c.gamma0) << '\n';
  o << "sigma_eps=" << csv::format_double(c.sigma_eps) << '\n';
  o << "zeta_scale=" << csv::format_double(c.zeta_scale) << '\n';
  o << "d_in=" << csv::format_double(c.design.d_in) << '\n';
  o << "bridges=" << c.design.bridges << '\n';
  o << "sigma_a=" << csv::format_double(c.design.sigma_a) << '\n';
  o << "sigma_b=" << csv::format_double(c.design.sigma_b) << '\n';
  o << "R=" << c.R << '\n';
  o << "predictor=" << to_string(c.predictor.kind) << '\n';
  o << "folds=" << c.predictor.folds << '\n';
  o << "group_effects=" << (c.predictor.include_group_effects ? "true" : "false") << '\n';
  o << "menus=" << csv::join(c.menus) << '\n';
  o << "seed=" << c.seed << '\n';
  o << "tol=" << csv::format_double(c.tol) << '\n';
  o << "max_iter=" << c.max_iter << '\n';
  o << "correlated_shocks=" << (c.correlated_shocks ? "true" : "false") << '\n';
  o << "group_shock_sd=" << csv::format_double(c.group_shock_sd) << '\n';
  o << "shift=" << (c.shift ? csv::format_double(*c.shift) : std::string("auto")) << '\n';
  o << "K=" << c.K << '\n';
  o << "H=" << c.H << '\n';
  o << "epsilon0=" << csv::format_double(c.epsilon0) << '\n';
  return o.str();
}

std::string menu_label(const std::string& menu) {
  if (menu == "bruz") return "BRUZ";
  if (menu == "geo") return "GEO";
  if (menu == "geo-full" || menu == "geo_full") return "GEOFULL";
  return menu;
}

const McCell* McReport::find(int n, double beta, const std::string& menu) const {
  for (const auto& c : cells) {
    if (c.n == n && c.beta == beta && c.menu == menu) return &c;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Replication loop

namespace {

struct MenuDraw {
  bool ok = false;
  bool nonconverged = false;
  double lambda = 0.0;
  double se = 0.0;
  double r2 = 0.0;
  double f = 0.0;
  double f_robust = 0.0;
  std::string error;
};

struct BetaDraw {
  std::vector<MenuDraw> menus;
  bool diag_ok = false;
  double exposure_disp = 0.0;
  double max_share_mean = 0.0;
  double max_share_p90 = 0.0;
  double intensity_disp = 0.0;
  double bound = 0.0;
};

double dispersion(const Eigen::VectorXd& v) {
  const double m = v.mean();
  const double sd = std::sqrt((v.array() - m).square().sum() / std::max<Index>(1, v.size() - 1));
  return m != 0.0 ? sd / std::abs(m) : std::numeric_limits<double>::quiet_NaN();
}

double quantile_sorted(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<int> group_sizes(int n, int group_size) {
  const int G = std::max(1, static_cast<int>(std::lround(static_cast<double>(n) / group_size)));
  std::vector<int> sizes(static_cast<std::size_t>(G), n / G);
  for (int k = 0; k < n % G; ++k) ++sizes[static_cast<std::size_t>(k)];
  return sizes;
}

std::vector<BetaDraw> replicate(const McConfig& cfg, int n, int r) {
  const auto sizes = group_sizes(n, cfg.group_size);
  const std::uint64_t net_seed = stream_seed(cfg.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r), kNetwork);

  // 1. networks and covariates
  std::vector<Network> groups;
  Eigen::MatrixXd X(n, 2);
  Index off = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    SimGroup sg = dispersion_bridge(sizes[g], stream_seed(net_seed, g, 0, kNetwork), cfg.design);
    sg.net.group_id = static_cast<int>(g);
    X.middleRows(off, sizes[g]) = sg.X;
    off += sizes[g];
    groups.push_back(std::move(sg.net));
  }
  Panel panel = Panel::assemble(std::move(groups), std::move(X), {"const", "x"});

  // 2. shocks, shared by every beta cell of this replication
  std::mt19937_64 rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r), kShocks));
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXd zeta(static_cast<Index>(panel.num_groups()));
  for (Index g = 0; g < zeta.size(); ++g) zeta(g) = cfg.zeta_scale * z(rng);
  Eigen::VectorXd eps(panel.num_nodes());
  for (Index i = 0; i < eps.size(); ++i) eps(i) = cfg.sigma_eps * z(rng);
  if (cfg.correlated_shocks) {
    std::mt19937_64 urng(stream_seed(cfg.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r), kGroupShock));
    for (std::size_t g = 0; g < panel.num_groups(); ++g) {
      eps.segment(panel.offsets[g], panel.group_size(g)).array() += cfg.group_shock_sd * z(urng);
    }
  }

  const Eigen::Map<const Eigen::VectorXd> gamma0(cfg.gamma0.data(), static_cast<Index>(cfg.gamma0.size()));
  const Eigen::VectorXd xg = panel.X * gamma0;
  Eigen::VectorXd base = xg + eps;
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    base.segment(panel.offsets[g], panel.group_size(g)).array() += zeta(static_cast<Index>(g));
  }

  std::vector<BetaDraw> out(cfg.beta_fix.size());
  for (std::size_t b = 0; b < cfg.beta_fix.size(); ++b) {
    BetaDraw& bd = out[b];
    bd.menus.resize(cfg.menus.size());
    const double beta = cfg.beta_fix[b];
    const double c = cfg.shift ? *cfg.shift : equilibrium_shift(base, xg, cfg.lambda0);
    StructuralParams sp;
    sp.gamma = gamma0;
    sp.lambda = cfg.lambda0;
    sp.group_effects = zeta;
    sp.sigma_eps = cfg.sigma_eps;
    sp.aggregator = AggregatorSpec::ces(beta, c);
    SolveOptions so;
    so.tol = cfg.tol;
    so.max_iter = cfg.max_iter;

    EquilibriumResult eq;
    try {
      eq = solve_equilibrium(panel, sp, eps, so);
    } catch (const std::exception& e) {
      for (auto& m : bd.menus) m.error = std::string("equilibrium: ") + e.what();
      continue;
    }
    bd.bound = eq.report.contraction_bound.value_or(std::numeric_limits<double>::quiet_NaN());
    if (!eq.report.converged) {
      for (auto& m : bd.menus) m.nonconverged = true;
      continue;
    }

    // 3. endogenous exposure and predictor
    Panel sample = panel;
    sample.y = eq.y;
    Eigen::VectorXd w(sample.num_nodes());
    Eigen::VectorXd yhat;
    AggregatorSpec inst_spec = sp.aggregator;
    try {
      for (std::size_t g = 0; g < sample.num_groups(); ++g) {
        w.segment(sample.offsets[g], sample.group_size(g)) =
            exposure(sample.groups[g], eq.y.segment(sample.offsets[g], sample.group_size(g)), sp.aggregator).values;
      }
      PredictorSpec ps = cfg.predictor;
      ps.oracle_gamma = gamma0;
      yhat = predict(sample, ps, stream_seed(cfg.seed, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(r), kPredictor));
      inst_spec.shift = std::max(c, default_shift(yhat));

      // design diagnostics
      std::vector<double> shares;
      Eigen::VectorXd s(sample.num_nodes());
      for (std::size_t g = 0; g < sample.num_groups(); ++g) {
        const Index o = sample.offsets[g];
        const Index m = sample.group_size(g);
        const Eigen::VectorXd yh = yhat.segment(o, m);
        const TransportOperator op = transport(sample.groups[g], yh, inst_spec);
        for (Index i = 0; i < m; ++i) shares.push_back(op.P.row(i).maxCoeff());
        const Eigen::VectorXd powed = (yh.array() + inst_spec.shift).pow(beta - 1.0).matrix();
        s.segment(o, m) = sample.groups[g].weights * powed;
      }
      bd.exposure_disp = dispersion(w);
      bd.max_share_mean = std::accumulate(shares.begin(), shares.end(), 0.0) / static_cast<double>(shares.size());
      bd.max_share_p90 = quantile_sorted(shares, 0.9);
      bd.intensity_disp = dispersion(s);
      bd.diag_ok = true;
    } catch (const std::exception& e) {
      for (auto& m : bd.menus) m.error = std::string("predictor: ") + e.what();
      continue;
    }

    // 4-5. menus and estimation
    for (std::size_t k = 0; k < cfg.menus.size(); ++k) {
      MenuDraw& md = bd.menus[k];
      try {
        MenuOptions mo = MenuOptions::from_name(cfg.menus[k]);
        if (cfg.menus[k] != "geo") {
          mo.K = cfg.K;
          mo.H = cfg.H;
        }
        mo.epsilon0 = cfg.epsilon0;
        const InstrumentSignature sig = build_menu(sample, yhat, inst_spec, mo);
        const EstimationResult est =
            two_sls(*sample.y, sample.X, w, sig.excluded, sample.cluster_id, sig.excluded_names);
        md.ok = std::isfinite(est.lambda_hat);
        md.lambda = est.lambda_hat;
        md.se = est.se_lambda;
        md.r2 = est.first_stage.partial_r2;
        md.f = est.first_stage.f_stat;
        md.f_robust = est.first_stage.f_stat_robust;
        if (!md.ok) md.error = "non-finite estimate";
      } catch (const std::exception& e) {
        md.error = e.what();
      }
    }
  }
  return out;
}

}  // namespace

McReport run_mc(const McConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.threads > 0) kernels::set_threads(cfg.threads);

  McReport report;
  report.menus = cfg.menus;
  report.replications = cfg.R;
  report.lambda0 = cfg.lambda0;
  report.threads = kernels::max_threads();

  for (int n : cfg.n) {
    std::vector<std::vector<BetaDraw>> draws(static_cast<std::size_t>(cfg.R));
    std::vector<std::string> rep_errors(static_cast<std::size_t>(cfg.R));
#pragma omp parallel for schedule(dynamic, 1)
    for (int r = 0; r < cfg.R; ++r) {
      try {
        draws[static_cast<std::size_t>(r)] = replicate(cfg, n, r);
      } catch (const std::exception& e) {
        rep_errors[static_cast<std::size_t>(r)] = e.what();
      }
    }

    // Deterministic reduction in replication order.
    for (std::size_t b = 0; b < cfg.beta_fix.size(); ++b) {
      DesignDiagnostics dd;
      dd.n = n;
      dd.beta = cfg.beta_fix[b];
      int nd = 0;
      int nb = 0;
      for (int r = 0; r < cfg.R; ++r) {
        const auto& rep = draws[static_cast<std::size_t>(r)];
        if (rep.empty()) continue;
        const BetaDraw& bd = rep[b];
        if (std::isfinite(bd.bound)) {
          dd.contraction_bound_mean += bd.bound;
          ++nb;
          if (bd.bound >= 1.0) ++dd.contraction_warnings;
        }
        if (!bd.diag_ok) continue;
        dd.exposure_dispersion += bd.exposure_disp;
        dd.max_share_mean += bd.max_share_mean;
        dd.max_share_p90 += bd.max_share_p90;
        dd.intensity_dispersion += bd.intensity_disp;
        ++nd;
      }
      if (nd > 0) {
        dd.exposure_dispersion /= nd;
        dd.max_share_mean /= nd;
        dd.max_share_p90 /= nd;
        dd.intensity_dispersion /= nd;
      }
      if (nb > 0) dd.contraction_bound_mean /= nb;
      report.diagnostics.push_back(dd);

      for (std::size_t k = 0; k < cfg.menus.size(); ++k) {
        McCell cell;
        cell.n = n;
        cell.beta = cfg.beta_fix[b];
        cell.menu = cfg.menus[k];
        double se_sum = 0.0;
        double err_sum = 0.0;
        double sq_sum = 0.0;
        double r2_sum = 0.0;
        double f_sum = 0.0;
        double fr_sum = 0.0;
        for (int r = 0; r < cfg.R; ++r) {
          const auto& rep = draws[static_cast<std::size_t>(r)];
          if (rep.empty()) {
            ++cell.failed_count;
            if (cell.errors.size() < 5) cell.errors.push_back(rep_errors[static_cast<std::size_t>(r)]);
            continue;
          }
          const MenuDraw& md = rep[b].menus[k];
          if (md.nonconverged) {
            ++cell.nonconverged_count;
            continue;
          }
          if (!md.ok) {
            ++cell.failed_count;
            if (cell.errors.size() < 5) cell.errors.push_back(md.error);
            continue;
          }
          ++cell.used;
          const double e = md.lambda - cfg.lambda0;
          err_sum += e;
          sq_sum += e * e;
          se_sum += md.se;
          r2_sum += md.r2;
          f_sum += md.f;
          fr_sum += md.f_robust;
        }
        cell.excluded_replications = cell.nonconverged_count + cell.failed_count;
        if (cell.used > 0) {
          const double u = cell.used;
          cell.bias_lambda = err_sum / u;
          cell.rmse_lambda = std::sqrt(sq_sum / u);
          cell.mean_se = se_sum / u;
          cell.mean_partial_r2 = r2_sum / u;
          cell.mean_f = f_sum / u;
          cell.mean_f_robust = fr_sum / u;
        } else {
          const double nan = std::numeric_limits<double>::quiet_NaN();
          cell.bias_lambda = cell.rmse_lambda = cell.mean_se = nan;
          cell.mean_partial_r2 = cell.mean_f = cell.mean_f_robust = nan;
        }
        report.cells.push_back(std::move(cell));
      }
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Output

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::vector<std::pair<int, double>> row_keys(const McReport& report) {
  std::vector<std::pair<int, double>> keys;
  for (const auto& c : report.cells) {
    std::pair<int, double> k{c.n, c.beta};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  return keys;
}

void write_table(const McReport& report, const std::filesystem::path& path, bool accuracy) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::vector<std::string> header{"n", "beta"};
  for (const auto& m : report.menus) {
    const std::string l = menu_label(m);
    if (accuracy) {
      header.push_back("bias_" + l);
      header.push_back("rmse_" + l);
    } else {
      header.push_back("r2_" + l);
      header.push_back("F_" + l);
    }
  }
  out << csv::join(header) << '\n';
  for (const auto& [n, beta] : row_keys(report)) {
    std::vector<std::string> row{std::to_string(n), csv::format_double(beta)};
    for (const auto& m : report.menus) {
      const McCell* c = report.find(n, beta, m);
      if (!c) {
        row.emplace_back("");
        row.emplace_back("");
        continue;
      }
      row.push_back(csv::format_double(accuracy ? c->bias_lambda : c->mean_partial_r2));
      row.push_back(csv::format_double(accuracy ? c->rmse_lambda : c->mean_f));
    }
    out << csv::join(row) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

void emit_tables(const McReport& report, const std::filesystem::path& dir, const std::string& config_text,
                 const std::map<std::string, std::string>& extra_meta) {
  std::filesystem::create_directories(dir);
  write_table(report, dir / "table1.csv", true);
  write_table(report, dir / "table2.csv", false);

  nlohmann::json j;
  j["replications"] = report.replications;
  j["lambda0"] = report.lambda0;
  j["menus"] = report.menus;
  std::vector<nlohmann::json> cells;
  for (const auto& c : report.cells) {
    cells.push_back({{"n", c.n},
                     {"beta", c.beta},
                     {"menu", c.menu},
                     {"bias_lambda", num(c.bias_lambda)},
                     {"rmse_lambda", num(c.rmse_lambda)},
                     {"mean_se", num(c.mean_se)},
                     {"mean_partial_r2", num(c.mean_partial_r2)},
                     {"mean_f", num(c.mean_f)},
                     {"mean_f_robust", num(c.mean_f_robust)},
                     {"used", c.used},
                     {"nonconverged_count", c.nonconverged_count},
                     {"failed_count", c.failed_count},
                     {"excluded_replications", c.excluded_replications},
                     {"errors", c.errors}});
  }
  j["cells"] = cells;
  std::vector<nlohmann::json> diags;
  for (const auto& d : report.diagnostics) {
    diags.push_back({{"n", d.n},
                     {"beta", d.beta},
                     {"exposure_dispersion", num(d.exposure_dispersion)},
                     {"max_share_mean", num(d.max_share_mean)},
                     {"max_share_p90", num(d.max_share_p90)},
                     {"intensity_dispersion", num(d.intensity_dispersion)},
                     {"contraction_bound_mean", num(d.contraction_bound_mean)},
                     {"contraction_warnings", d.contraction_warnings}});
  }
  j["design_diagnostics"] = diags;
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw std::runtime_error("cannot write report.json");
    out << j.dump(2) << '\n';
  }

  nlohmann::json meta;
  meta["config_sha256"] = sha256_hex(config_text);
  meta["config"] = config_text;
  meta["seconds"] = report.seconds;
  meta["threads"] = report.threads;
  meta["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION);
  meta["compiler"] = __VERSION__;
#ifdef _OPENMP
  meta["openmp"] = _OPENMP;
#else
  meta["openmp"] = nullptr;
#endif
  for (const auto& [k, v] : extra_meta) meta[k] = v;
  std::ofstream out(dir / "meta.json");
  if (!out) throw std::runtime_error("cannot write meta.json");
  out << meta.dump(2) << '\n';
}

}  // namespace normgame
