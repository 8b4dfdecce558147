#include "cli.hpp"

#include "normgame/aggregators.hpp"
#include "normgame/csv.hpp"
#include "normgame/errors.hpp"
#include "normgame/estimate.hpp"
#include "normgame/geometry.hpp"
#include "normgame/hash.hpp"
#include "normgame/kernels.hpp"
#include "normgame/montecarlo.hpp"
#include "normgame/panel_io.hpp"
#include "normgame/predictor.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace normgame::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// Bad flags, unknown config keys, unreadable config: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

class Manifest {
 public:
  explicit Manifest(std::string command) : start_(Clock::now()) { j_["command"] = std::move(command); }

  void config(json c) { j_["config"] = std::move(c); }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void input(const fs::path& p) { j_["inputs"][p.string()] = sha256_file(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void phase(const std::string& name, Clock::time_point since) {
    j_["timings"]["phases"][name] = std::chrono::duration<double>(Clock::now() - since).count();
  }
  void write(const fs::path& path) {
    j_["timings"]["wall_seconds"] = std::chrono::duration<double>(Clock::now() - start_).count();
    std::vector<std::string> outs;
    for (const auto& p : outputs_) {
      if (!fs::exists(p)) throw std::runtime_error("expected output missing: " + p.string());
      outs.push_back(p.string());
    }
    outs.push_back(path.string());
    j_["outputs"] = outs;
    if (!j_.contains("inputs")) j_["inputs"] = json::object();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j_.dump(2) << '\n';
  }

 private:
  json j_;
  std::vector<fs::path> outputs_;
  Clock::time_point start_;
};

void configure_threads(int threads) {
#ifdef _OPENMP
  kernels::set_threads(threads > 0 ? threads : omp_get_num_procs());
#else
  (void)threads;
#endif
}

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string unquote(std::string v) {
  v = trim(v);
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') || (v.front() == '\'' && v.back() == '\''))) {
    v = v.substr(1, v.size() - 2);
  }
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') {
    std::string inner = v.substr(1, v.size() - 2);
    std::string out;
    for (auto& f : csv::split(inner)) {
      if (!out.empty()) out += ',';
      out += unquote(f);
    }
    return out;
  }
  return v;
}

std::string json_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return csv::format_double(v.get<double>());
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) {
      if (!out.empty()) out += ',';
      out += json_scalar(e);
    }
    return out;
  }
  throw UsageError("unsupported config value " + v.dump());
}

/// JSON object or `key = value` lines (comments with '#', optional [section]
/// headers ignored, quotes and [a, b] lists accepted).
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<std::pair<std::string, std::string>> out;
  const std::string t = trim(text);
  if (!t.empty() && t.front() == '{') {
    json j;
    try {
      j = json::parse(t);
    } catch (const std::exception& e) {
      throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) out.emplace_back(it.key(), json_scalar(it.value()));
    return out;
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t no = 0;
  while (std::getline(lines, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(no) + ": expected key = value");
    }
    out.emplace_back(trim(line.substr(0, eq)), unquote(line.substr(eq + 1)));
  }
  return out;
}

std::pair<std::string, std::string> split_setting(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

void apply_or_usage(McConfig& c, const std::string& key, const std::string& value) {
  try {
    apply_setting(c, key, value);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

json config_json(const std::string& serialized) {
  json j = json::object();
  std::istringstream in(serialized);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Shared model flags for instruments/estimate

struct ModelFlags {
  std::string edges;
  std::string nodes;
  bool symmetrize = false;
  bool keep_isolates = false;
  std::string family = "ces";
  std::optional<double> theta;
  std::string shift = "auto";
  std::string predictor = "crossfit";
  int folds = 5;
  bool group_effects = false;
  std::vector<double> oracle_gamma;
  std::uint64_t seed = 1;
  int threads = 0;
  int steps = 0;
  int shells = 0;
  bool torsion = false;
  std::string hop_shell_norm = "row";
  double epsilon0 = 1e-8;
  bool quantile_dtheta = false;
};

void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_option("--edges", f.edges, "Edge CSV (group,src,dst,weight)")->required()->check(CLI::ExistingFile);
  app->add_option("--nodes", f.nodes, "Node CSV (group,node,<x...>[,y][,cluster])")->required()->check(CLI::ExistingFile);
  app->add_flag("--symmetrize", f.symmetrize, "Treat edges as undirected (max(W, W^T) before normalizing)");
  app->add_flag("--keep-isolates", f.keep_isolates, "Keep isolates in the estimation sample (zero instruments)");
  app->add_option("--family", f.family, "Aggregator: lim, ces, smoothmax, quantile")->capture_default_str();
  app->add_option("--theta,--beta,--kappa,-q", f.theta, "Preference parameter (beta, kappa or q)");
  app->add_option("--shift", f.shift, "CES positivity shift, or 'auto' for max(0, 1 - min)")->capture_default_str();
  app->add_option("--predictor", f.predictor, "oracle, ols or crossfit")->capture_default_str();
  app->add_option("--folds", f.folds, "Cross-fitting folds")->capture_default_str();
  app->add_flag("--group-effects", f.group_effects, "Group dummies in the predictor regression");
  app->add_option("--oracle-gamma", f.oracle_gamma, "Coefficients for the oracle predictor (incl. intercept)")
      ->delimiter(',');
  app->add_option("--seed", f.seed, "Seed for fold assignment")->capture_default_str();
  app->add_option("--threads", f.threads, "Worker threads (0 = all cores)")->capture_default_str();
  app->add_option("--steps", f.steps, "Deepest power K of the P^k X block (geo: K=2, geo-full: K=3)");
  app->add_option("--shells", f.shells, "Deepest effective-distance shell H (geo-full: 4)");
  app->add_flag("--torsion", f.torsion, "Add the wedge torsion block");
  app->add_option("--hop-shell-norm", f.hop_shell_norm, "Hop Shell_2 block: 'row' (average) or 'sum'")
      ->check(CLI::IsMember({"row", "sum"}))
      ->capture_default_str();
  app->add_option("--epsilon0", f.epsilon0, "Friction floor in -log(P + eps0)")->capture_default_str();
  app->add_flag("--quantile-dtheta", f.quantile_dtheta, "Finite difference in q for the quantile family");
}

AggregatorSpec spec_from(const ModelFlags& f) {
  AggregatorSpec s;
  try {
    s.family = parse_family(f.family);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  switch (s.family) {
    case Family::LIM: s.theta = 1.0; break;
    case Family::CES: s.theta = f.theta.value_or(1.2); break;
    case Family::SmoothMax: s.theta = f.theta.value_or(1.0); break;
    case Family::Quantile: s.theta = f.theta.value_or(0.5); break;
  }
  if (!s.theta_in_domain(s.theta)) throw UsageError("theta " + std::to_string(s.theta) + " outside the family domain");
  return s;
}

MenuOptions menu_from(const std::string& name, const ModelFlags& f) {
  MenuOptions m;
  try {
    m = MenuOptions::from_name(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (f.steps > 0) {
    if (f.steps < 2) throw UsageError("--steps must be at least 2");
    m.steps = true;
    m.K = f.steps;
  }
  if (f.shells > 0) {
    if (f.shells < 2) throw UsageError("--shells must be at least 2");
    m.shells = true;
    m.H = f.shells;
  }
  if (f.torsion) m.torsion = true;
  m.hop_shell_rownorm = f.hop_shell_norm == "row";
  m.epsilon0 = f.epsilon0;
  m.quantile_dtheta = f.quantile_dtheta;
  return m;
}

struct LoadedData {
  Panel full;
  Panel sample;  // isolates removed unless kept
  std::vector<Index> kept;
  std::vector<std::string> warnings;
};

LoadedData load(const ModelFlags& f, Manifest& man) {
  man.input(f.edges);
  man.input(f.nodes);
  LoadedData d;
  d.full = load_panel(f.edges, f.nodes, {f.symmetrize});
  if (f.keep_isolates) {
    d.sample = d.full;
    for (Index i = 0; i < d.full.num_nodes(); ++i) d.kept.push_back(i);
  } else {
    DropResult dr = drop_isolates(d.full);
    d.sample = std::move(dr.panel);
    d.kept = std::move(dr.kept);
    d.warnings = std::move(dr.warnings);
  }
  return d;
}

Eigen::VectorXd build_yhat(const Panel& panel, const ModelFlags& f) {
  PredictorSpec ps;
  try {
    ps.kind = parse_predictor(f.predictor);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  ps.folds = f.folds;
  ps.include_group_effects = f.group_effects;
  if (ps.kind == PredictorKind::Oracle) {
    if (static_cast<Index>(f.oracle_gamma.size()) != panel.num_covariates()) {
      throw UsageError("--oracle-gamma needs " + std::to_string(panel.num_covariates()) + " values (" +
                       csv::join(panel.x_names) + ")");
    }
    ps.oracle_gamma = Eigen::Map<const Eigen::VectorXd>(f.oracle_gamma.data(), panel.num_covariates());
  }
  return predict(panel, ps, f.seed);
}

double parse_shift(const ModelFlags& f, const Eigen::VectorXd& data) {
  if (f.shift == "auto") return default_shift(data);
  auto v = csv::parse_double(f.shift);
  if (!v || *v < 0.0) throw UsageError("--shift must be 'auto' or a nonnegative number");
  return *v;
}

Eigen::VectorXd panel_exposure(const Panel& panel, const Eigen::VectorXd& a, const AggregatorSpec& spec) {
  Eigen::VectorXd w(panel.num_nodes());
  for (std::size_t g = 0; g < panel.num_groups(); ++g) {
    w.segment(panel.offsets[g], panel.group_size(g)) =
        exposure(panel.groups[g], a.segment(panel.offsets[g], panel.group_size(g)), spec).values;
  }
  return w;
}

json first_stage_json(const FirstStage& fs) {
  return {{"partial_r2", fs.partial_r2},
          {"f_stat", std::isfinite(fs.f_stat) ? json(fs.f_stat) : json(nullptr)},
          {"f_stat_robust", std::isfinite(fs.f_stat_robust) ? json(fs.f_stat_robust) : json(nullptr)},
          {"excluded_count", fs.excluded_count}};
}

// ---------------------------------------------------------------------------
// Commands

int cmd_mc(const std::string& config_path, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
           std::optional<int> threads, const std::string& out_dir, bool as_json, std::ostream& out) {
  Manifest man("mc");
  McConfig cfg;
  if (!config_path.empty()) {
    if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
    for (const auto& [k, v] : read_config(config_path)) apply_or_usage(cfg, k, v);
    man.input(config_path);
  }
  for (const auto& s : sets) {
    const auto [k, v] = split_setting(s);
    apply_or_usage(cfg, k, v);
  }
  if (seed) cfg.seed = *seed;
  if (threads) cfg.threads = *threads;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  configure_threads(cfg.threads);
  const std::string text = serialize(cfg);
  man.config(config_json(text));
  man.seed(cfg.seed);

  auto t = Clock::now();
  const McReport report = run_mc(cfg);
  man.phase("simulate", t);
  t = Clock::now();
  const fs::path dir(out_dir);
  emit_tables(report, dir, text);
  man.phase("emit", t);
  for (const char* f : {"table1.csv", "table2.csv", "report.json", "meta.json"}) man.output(dir / f);
  man.write(dir / "manifest.json");

  if (as_json) {
    std::ifstream in(dir / "report.json");
    out << in.rdbuf();
  } else {
    std::ifstream in(dir / "table1.csv");
    out << in.rdbuf();
    out << "wrote " << dir.string() << " (" << report.cells.size() << " cells, " << csv::format_fixed(report.seconds, 1)
        << " s)\n";
  }
  return 0;
}

int cmd_instruments(const ModelFlags& f, const std::string& menu_name, const std::string& out_path, bool as_json,
                    std::ostream& out) {
  Manifest man("instruments");
  configure_threads(f.threads);
  const AggregatorSpec spec0 = spec_from(f);
  const MenuOptions menu = menu_from(menu_name, f);
  auto t = Clock::now();
  LoadedData d = load(f, man);
  man.phase("load", t);
  man.seed(f.seed);

  t = Clock::now();
  const Eigen::VectorXd yhat = build_yhat(d.sample, f);
  man.phase("predict", t);

  AggregatorSpec spec = spec0;
  const bool has_y = d.sample.y.has_value();
  double c_eq = 0.0;
  if (spec.family == Family::CES) {
    c_eq = has_y ? parse_shift(f, *d.sample.y) : 0.0;
    spec.shift = std::max(c_eq, parse_shift(f, yhat));
  }
  t = Clock::now();
  const InstrumentSignature sig = build_menu(d.sample, yhat, spec, menu);
  man.phase("instruments", t);

  const fs::path path(out_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_instruments_csv(d.sample, sig, path, yhat);
  man.output(path);
  const fs::path map_path = path.parent_path() / (path.stem().string() + "_nodes.csv");
  write_node_map(d.sample, map_path);
  man.output(map_path);

  json summary;
  summary["menu"] = menu_name;
  summary["family"] = to_string(spec.family);
  summary["theta"] = spec.theta;
  summary["shift"] = spec.shift;
  summary["columns"] = sig.excluded_names;
  summary["n_used"] = d.sample.num_nodes();
  summary["warnings"] = d.warnings;
  for (const auto& w : sig.warnings) summary["warnings"].push_back(w);
  if (has_y) {
    AggregatorSpec eq_spec = spec;
    eq_spec.shift = c_eq;
    const Eigen::VectorXd w = panel_exposure(d.sample, *d.sample.y, eq_spec);
    const GuardResult guard = collinearity_guard(d.sample.X, sig.excluded);
    Eigen::MatrixXd Z(sig.excluded.rows(), static_cast<Index>(guard.kept.size()));
    for (std::size_t k = 0; k < guard.kept.size(); ++k) Z.col(static_cast<Index>(k)) = sig.excluded.col(guard.kept[k]);
    if (Z.cols() > 0) {
      try {
        summary["first_stage"] = first_stage_json(first_stage_diagnostics(w, d.sample.X, Z, d.sample.cluster_id));
      } catch (const RankError& e) {
        summary["first_stage"] = nullptr;
        summary["warnings"].push_back(std::string("first stage not reported: ") + e.what());
      }
    } else {
      summary["first_stage"] = nullptr;
      summary["warnings"].push_back("no excluded column varies beyond the included covariates");
    }
    std::vector<std::string> dropped;
    for (Index c : guard.dropped) dropped.push_back(sig.excluded_names[static_cast<std::size_t>(c)]);
    summary["guard_dropped"] = dropped;
  }
  const fs::path diag_path = path.parent_path() / (path.stem().string() + "_diagnostics.json");
  {
    std::ofstream o(diag_path);
    o << summary.dump(2) << '\n';
  }
  man.output(diag_path);
  man.config({{"family", to_string(spec.family)},
              {"theta", spec.theta},
              {"shift", spec.shift},
              {"menu", menu_name},
              {"K", menu.K},
              {"H", menu.H},
              {"predictor", f.predictor},
              {"folds", f.folds},
              {"symmetrize", f.symmetrize}});
  man.write(path.parent_path() / (path.stem().string() + "_manifest.json"));

  if (as_json) out << summary.dump(2) << '\n';
  else out << "wrote " << path.string() << " (" << sig.excluded_count() << " excluded columns)\n";
  return 0;
}

std::vector<double> default_grid(Family fam) {
  switch (fam) {
    case Family::CES: return {0.05, 0.8, 1.2, 1.6, 2.0, 2.4};
    case Family::SmoothMax: {
      std::vector<double> g;
      for (int k = 0; k < 8; ++k) g.push_back(0.05 * std::pow(200.0, k / 7.0));
      return g;
    }
    case Family::Quantile: return {0.25, 0.5, 0.75};
    case Family::LIM: return {1.0};
  }
  return {1.0};
}

int cmd_estimate(const ModelFlags& f, std::vector<double> grid, const std::vector<std::string>& menus,
                 const std::string& out_path, bool as_json, std::ostream& out) {
  Manifest man("estimate");
  configure_threads(f.threads);
  const AggregatorSpec spec0 = spec_from(f);
  if (grid.empty()) grid = f.theta && spec0.has_theta() ? std::vector<double>{*f.theta} : default_grid(spec0.family);
  if (spec0.family == Family::LIM) grid = {1.0};
  for (double th : grid) {
    if (!spec0.theta_in_domain(th)) throw UsageError("grid value " + std::to_string(th) + " outside the family domain");
  }
  std::vector<MenuOptions> menu_opts;
  for (const auto& m : menus) menu_opts.push_back(menu_from(m, f));

  auto t = Clock::now();
  LoadedData d = load(f, man);
  man.phase("load", t);
  man.seed(f.seed);
  if (!d.sample.y) throw std::runtime_error("node file has no y column; estimate needs outcomes");
  const Panel& P = d.sample;
  const Eigen::VectorXd& y = *P.y;
  t = Clock::now();
  const Eigen::VectorXd yhat = build_yhat(P, f);
  man.phase("predict", t);

  const double c_eq = spec0.family == Family::CES ? parse_shift(f, y) : 0.0;
  const double c_inst = spec0.family == Family::CES ? std::max(c_eq, parse_shift(f, yhat)) : 0.0;
  auto exposure_at = [&](double th) {
    AggregatorSpec s = spec0.with_theta(th);
    s.shift = c_eq;
    return panel_exposure(P, y, s);
  };

  json results = json::object();
  std::vector<ProfileResult> fits;
  t = Clock::now();
  for (std::size_t k = 0; k < menus.size(); ++k) {
    const MenuOptions mo = menu_opts[k];
    auto instruments_at = [&](double th) {
      AggregatorSpec s = spec0.with_theta(th);
      s.shift = c_inst;
      return build_menu(P, yhat, s, mo).excluded;
    };
    fits.push_back(profile_iv(y, P.X, exposure_at, instruments_at, grid, P.cluster_id));
    json r = json::parse(to_json(fits.back().estimate));
    r["profile"] = json::parse(to_json(fits.back().trace));
    results[menus[k]] = r;
  }
  man.phase("estimate", t);

  const fs::path path(out_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream o(path);
    if (!o) throw std::runtime_error("cannot write " + path.string());
    std::vector<std::string> header;
    for (const auto& m : menus) header.push_back("Param(" + menu_label(m) + ")");
    for (const auto& m : menus) {
      header.push_back("lambda_" + menu_label(m));
      header.push_back("se_" + menu_label(m));
    }
    o << csv::join(header) << '\n';
    std::vector<std::string> row;
    for (const auto& fit : fits) row.push_back(spec0.has_theta() ? csv::format_double(fit.trace.argmin) : "");
    for (const auto& fit : fits) {
      row.push_back(csv::format_double(fit.estimate.lambda_hat));
      row.push_back(csv::format_double(fit.estimate.se_lambda));
    }
    o << csv::join(row) << '\n';
  }
  man.output(path);
  for (std::size_t k = 0; k < menus.size(); ++k) {
    const fs::path trace = path.parent_path() / (path.stem().string() + "_profile_" + menus[k] + ".csv");
    write_profile_csv(fits[k], trace);
    man.output(trace);
  }
  json full;
  full["family"] = to_string(spec0.family);
  full["grid"] = grid;
  full["shift_exposure"] = c_eq;
  full["shift_instruments"] = c_inst;
  full["n_used"] = P.num_nodes();
  full["warnings"] = d.warnings;
  full["menus"] = results;
  const fs::path json_path = path.parent_path() / (path.stem().string() + ".json");
  {
    std::ofstream o(json_path);
    o << full.dump(2) << '\n';
  }
  man.output(json_path);
  man.config({{"family", to_string(spec0.family)}, {"grid", grid}, {"menus", menus}, {"predictor", f.predictor}});
  man.write(path.parent_path() / (path.stem().string() + "_manifest.json"));

  if (as_json) {
    out << full.dump(2) << '\n';
  } else {
    std::ifstream in(path);
    out << in.rdbuf();
  }
  return 0;
}

int cmd_twostar(int m_a, int m_b, bool unequal, double beta, bool as_json, std::ostream& out) {
  const SimGroup sg = two_star(m_a, m_b, !unequal);
  const Eigen::VectorXd yhat = sg.X.col(1);  // oracle predictor with gamma = (0, 1)
  const AggregatorSpec spec = AggregatorSpec::ces(beta, default_shift(yhat));
  const Eigen::VectorXd phi = exposure(sg.net, yhat, spec).values;
  const Eigen::VectorXd dphi = dtheta_exposure(sg.net, yhat, spec).values;
  const Eigen::MatrixXd shell = hop_shell(sg.net, sg.X.rightCols(1), 2, false);

  const Index hub_a = 0;
  const Index hub_b = m_a + 1;
  double max_dphi = 0.0;
  double phi_lo = std::numeric_limits<double>::infinity();
  double phi_hi = -phi_lo;
  double shell_dev = 0.0;
  for (Index i = 0; i < sg.net.size(); ++i) {
    if (i == hub_a || i == hub_b) continue;
    max_dphi = std::max(max_dphi, std::abs(dphi(i)));
    phi_lo = std::min(phi_lo, phi(i));
    phi_hi = std::max(phi_hi, phi(i));
    const Index hub = i < hub_b ? hub_a : hub_b;
    const Index first = hub + 1;
    const Index last = hub == hub_a ? hub_b : sg.net.size();
    double sibling_sum = 0.0;
    for (Index j = first; j < last; ++j) {
      if (j != i) sibling_sum += sg.X(j, 1);
    }
    shell_dev = std::max(shell_dev, std::abs(shell(i, 0) - sibling_sum));
  }
  const bool dphi_zero = max_dphi <= 1e-10;
  const bool norm_const = (phi_hi - phi_lo) <= 1e-12;
  const bool shell_ok = shell_dev == 0.0;
  const bool collapse = dphi_zero && norm_const && shell_ok;

  std::string status;
  if (collapse) status = "collapse verified";
  else if (unequal && dphi_zero && shell_ok) status = "hub covariates differ: predicted norms vary across stars";
  else status = "collapse NOT verified";

  if (as_json) {
    json j{{"m_a", m_a},
           {"m_b", m_b},
           {"equal_hub_covariates", !unequal},
           {"beta", beta},
           {"shift", spec.shift},
           {"max_abs_peripheral_dphi", max_dphi},
           {"peripheral_norm_range", phi_hi - phi_lo},
           {"max_shell2_deviation", shell_dev},
           {"dphi_zero", dphi_zero},
           {"norm_constant", norm_const},
           {"shell2_matches_siblings", shell_ok},
           {"status", status}};
    out << j.dump(2) << '\n';
  } else {
    out << "two-star m_a=" << m_a << " m_b=" << m_b << " beta=" << csv::format_double(beta)
        << (unequal ? " (unequal hubs)" : " (equal hubs)") << '\n';
    out << "  max |peripheral d_beta Phi|   " << csv::format_double(max_dphi) << '\n';
    out << "  peripheral norm range         " << csv::format_double(phi_hi - phi_lo) << '\n';
    out << "  max |shell2 - sibling sum|    " << csv::format_double(shell_dev) << '\n';
    out << status << '\n';
  }
  if (unequal) return 0;
  return collapse ? 0 : 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Norm-game peer effects: equilibrium, geometry instruments, IV/GMM and Monte Carlo", "normgame"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "normgame 0.3.0");

  // mc
  auto* mc = app.add_subcommand("mc", "Run the dispersion-bridge Monte Carlo and write tables");
  std::string mc_config;
  std::vector<std::string> mc_sets;
  std::optional<std::uint64_t> mc_seed;
  std::optional<int> mc_threads;
  std::string mc_out = "mc_out";
  bool mc_json = false;
  mc->add_option("--config", mc_config, "Config file (JSON or key = value lines)");
  mc->add_option("--set", mc_sets, "Override one config field, key=value (repeatable)")->allow_extra_args(false);
  mc->add_option("--seed", mc_seed, "Base seed (overrides config)");
  mc->add_option("--threads", mc_threads, "Worker threads (0 = all cores)");
  mc->add_option("--out", mc_out, "Output directory")->capture_default_str();
  mc->add_flag("--json", mc_json, "Print report.json instead of table 1");

  // instruments
  auto* ins = app.add_subcommand("instruments", "Build an instrument menu for a loaded panel");
  ModelFlags ins_flags;
  std::string ins_menu = "geo";
  std::string ins_out = "instruments.csv";
  bool ins_json = false;
  add_model_flags(ins, ins_flags);
  ins->add_option("--menu", ins_menu, "bruz, geo (P^2X, d P^2X, hop Shell_2) or geo-full")->capture_default_str();
  ins->add_option("--out", ins_out, "Instrument CSV path")->capture_default_str();
  ins->add_flag("--json", ins_json, "Print the diagnostics JSON");

  // estimate
  auto* est = app.add_subcommand("estimate", "Profile-IV estimation per menu over a theta grid");
  ModelFlags est_flags;
  std::vector<double> est_grid;
  std::vector<std::string> est_menus{"bruz", "geo"};
  std::string est_out = "estimate.csv";
  bool est_json = false;
  add_model_flags(est, est_flags);
  est->add_option("--grid", est_grid, "Theta grid, comma separated (default depends on family)")->delimiter(',');
  est->add_option("--menus", est_menus, "Menus to compare")->delimiter(',')->capture_default_str();
  est->add_option("--out", est_out, "Comparison table path")->capture_default_str();
  est->add_flag("--json", est_json, "Print the full JSON result");

  // twostar
  auto* ts = app.add_subcommand("twostar", "Check the two-star collapse of one-step instruments");
  int ts_ma = 5;
  int ts_mb = 5;
  bool ts_unequal = false;
  double ts_beta = 1.2;
  bool ts_json = false;
  ts->add_option("--ma", ts_ma, "Peripherals on hub a")->capture_default_str()->check(CLI::Range(2, 1000000));
  ts->add_option("--mb", ts_mb, "Peripherals on hub b")->capture_default_str()->check(CLI::Range(2, 1000000));
  ts->add_flag("--unequal-hubs", ts_unequal, "Give the hubs different covariates");
  ts->add_option("--beta", ts_beta, "CES curvature")->capture_default_str();
  ts->add_flag("--json", ts_json, "Machine-readable diagnostics");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    if (*mc) return cmd_mc(mc_config, mc_sets, mc_seed, mc_threads, mc_out, mc_json, out);
    if (*ins) return cmd_instruments(ins_flags, ins_menu, ins_out, ins_json, out);
    if (*est) return cmd_estimate(est_flags, est_grid, est_menus, est_out, est_json, out);
    if (*ts) {
      if (ts_beta == 0.0) throw UsageError("--beta must be nonzero");
      return cmd_twostar(ts_ma, ts_mb, ts_unequal, ts_beta, ts_json, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace normgame::cli
