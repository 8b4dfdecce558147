#include "cli.hpp"
#include "normgame/csv.hpp"
#include "normgame/hash.hpp"
#include "normgame/montecarlo.hpp"
#include "normgame/panel_io.hpp"
#include "support.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <sstream>

using namespace normgame;
using namespace normgame::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = NORMGAME_FIXTURES;

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "normgame");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Column name -> values, in file order.
struct Table {
  std::vector<std::string> header;
  std::map<std::string, std::vector<std::string>> cols;
  std::vector<double> num(const std::string& c) const {
    std::vector<double> v;
    for (const auto& s : cols.at(c)) v.push_back(*csv::parse_double(s));
    return v;
  }
};

Table read_table(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  Table t;
  std::getline(in, line);
  t.header = csv::split(line);
  while (std::getline(in, line)) {
    const auto f = csv::split(line);
    for (std::size_t k = 0; k < t.header.size(); ++k) t.cols[t.header[k]].push_back(k < f.size() ? f[k] : "");
  }
  return t;
}

std::vector<std::string> twostar_args(const std::string& cmd) {
  return {cmd,
          "--edges",
          (kFixtures / "twostar_edges.csv").string(),
          "--nodes",
          (kFixtures / "twostar_nodes.csv").string(),
          "--predictor",
          "oracle",
          "--oracle-gamma",
          "0,1"};
}

// Ten dispersion-bridge groups with LIM outcomes; enough for identification.
void write_lim_panel(const fs::path& dir) {
  std::vector<Network> groups;
  std::vector<Eigen::MatrixXd> xs;
  Index N = 0;
  for (std::uint64_t g = 0; g < 10; ++g) {
    SimGroup s = dispersion_bridge(40, 500 + g);
    N += s.net.size();
    groups.push_back(s.net);
    xs.push_back(s.X);
  }
  Eigen::MatrixXd X(N, 2);
  Eigen::VectorXd y(N);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z;
  Index off = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const Index n = groups[g].size();
    X.middleRows(off, n) = xs[g];
    Eigen::VectorXd base = xs[g].col(0) * 0.5 + xs[g].col(1);
    for (Index i = 0; i < n; ++i) base(i) += 0.5 * z(rng);
    const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - 0.4 * groups[g].weights;
    y.segment(off, n) = A.partialPivLu().solve(base);
    off += n;
  }
  const Panel p = Panel::assemble(groups, X, {"const", "x"}, y);
  write_panel(p, dir / "edges.csv", dir / "nodes.csv");
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("help and usage errors") {
  CHECK(invoke({"--help"}).code == 0);
  CHECK(invoke({"--version"}).code == 0);
  CHECK(invoke({"mc", "--help"}).code == 0);
  CHECK(invoke({"nonsense"}).code == 2);
  CHECK(invoke({"twostar", "--ma", "1"}).code == 2);
  const Run missing = invoke({"instruments", "--edges", "/no/such.csv", "--nodes", "/no/such.csv"});
  CHECK(missing.code == 2);
}

TEST_CASE("instruments on the two-star fixture") {
  const auto dir = scratch_dir("cli_instr");
  SUBCASE("geo with summed hop shell equals sibling sums") {
    auto a = twostar_args("instruments");
    for (const char* s : {"--family", "ces", "--beta", "1.2", "--menu", "geo", "--hop-shell-norm", "sum", "--out"})
      a.emplace_back(s);
    a.push_back((dir / "geo.csv").string());
    const Run r = invoke(a);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const Table t = read_table(dir / "geo.csv");
    CHECK(t.header == std::vector<std::string>{"group", "node", "yhat", "phi", "dphi", "step2_x", "dstep2_x", "hopshell2_x"});
    const auto x = read_table(kFixtures / "twostar_nodes.csv").num("x");
    const auto shell = t.num("hopshell2_x");
    // ha, a1..a5, hb, b1..b4
    const auto sibling_sum = [&](Index i, Index first, Index last) {
      double s = 0.0;
      for (Index k = first; k <= last; ++k)
        if (k != i) s += x[static_cast<std::size_t>(k)];
      return s;
    };
    for (Index i = 1; i <= 5; ++i) CHECK(shell[static_cast<std::size_t>(i)] == sibling_sum(i, 1, 5));
    for (Index i = 7; i <= 10; ++i) CHECK(shell[static_cast<std::size_t>(i)] == sibling_sum(i, 7, 10));
    CHECK(shell[0] == 0.0);
    CHECK(shell[6] == 0.0);
    // Peripherals have a single peer: dphi vanishes there.
    const auto dphi = t.num("dphi");
    for (Index i : {1, 2, 3, 4, 5, 7, 8, 9, 10}) CHECK(std::abs(dphi[static_cast<std::size_t>(i)]) <= 1e-10);

    const auto diag = nlohmann::json::parse(slurp(dir / "geo_diagnostics.json"));
    CHECK(diag["columns"].size() == 5);
    const auto man = nlohmann::json::parse(slurp(dir / "geo_manifest.json"));
    for (const auto& o : man["outputs"]) CHECK(fs::exists(o.get<std::string>()));
    CHECK(man["inputs"].size() == 2);
  }
  SUBCASE("bruz columns only") {
    auto a = twostar_args("instruments");
    for (const char* s : {"--menu", "bruz", "--out"}) a.emplace_back(s);
    a.push_back((dir / "bruz.csv").string());
    REQUIRE(invoke(a).code == 0);
    CHECK(read_table(dir / "bruz.csv").header == std::vector<std::string>{"group", "node", "yhat", "phi", "dphi"});
  }
  SUBCASE("lim geo with K=3 gives G^2 x and G^3 x") {
    auto a = twostar_args("instruments");
    for (const char* s : {"--family", "lim", "--menu", "geo", "--steps", "3", "--out"}) a.emplace_back(s);
    a.push_back((dir / "lim.csv").string());
    REQUIRE(invoke(a).code == 0);
    const Table t = read_table(dir / "lim.csv");
    REQUIRE(t.cols.count("step2_x") == 1);
    REQUIRE(t.cols.count("step3_x") == 1);
    CHECK(t.cols.count("dphi") == 0);
    const Panel p = load_panel(kFixtures / "twostar_edges.csv", kFixtures / "twostar_nodes.csv");
    const Eigen::MatrixXd& G = p.groups[0].weights;
    const Eigen::VectorXd x = p.X.col(1);
    const Eigen::VectorXd g2 = G * (G * x), g3 = G * g2;
    const auto s2 = t.num("step2_x"), s3 = t.num("step3_x");
    for (Index i = 0; i < x.size(); ++i) {
      CHECK(std::abs(s2[static_cast<std::size_t>(i)] - g2(i)) <= 1e-12);
      CHECK(std::abs(s3[static_cast<std::size_t>(i)] - g3(i)) <= 1e-12);
    }
  }
  SUBCASE("manifest hash tracks input bytes") {
    const auto copy = dir / "nodes_copy.csv";
    fs::copy_file(kFixtures / "twostar_nodes.csv", copy, fs::copy_options::overwrite_existing);
    auto run_with = [&](const std::string& tag) {
      const Run r = invoke({"instruments", "--edges", (kFixtures / "twostar_edges.csv").string(), "--nodes",
                         copy.string(), "--predictor", "oracle", "--oracle-gamma", "0,1", "--menu", "bruz", "--out",
                         (dir / (tag + ".csv")).string()});
      REQUIRE(r.code == 0);
      return nlohmann::json::parse(slurp(dir / (tag + "_manifest.json")))["inputs"][copy.string()].get<std::string>();
    };
    const std::string h1 = run_with("h1");
    CHECK(h1 == sha256_file(copy));
    CHECK(run_with("h2") == h1);
    std::ofstream(copy, std::ios::app) << "\n";
    CHECK(run_with("h3") != h1);
  }
}

TEST_CASE("estimate") {
  const auto dir = scratch_dir("cli_est");
  write_lim_panel(dir);
  const std::vector<std::string> base{"estimate", "--edges", (dir / "edges.csv").string(), "--nodes",
                                      (dir / "nodes.csv").string()};
  SUBCASE("lim leaves Param empty") {
    auto a = base;
    for (const char* s : {"--family", "lim", "--predictor", "ols", "--out"}) a.emplace_back(s);
    a.push_back((dir / "lim.csv").string());
    const Run r = invoke(a);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const Table t = read_table(dir / "lim.csv");
    CHECK(t.header == std::vector<std::string>{"Param(BRUZ)", "Param(GEO)", "lambda_BRUZ", "se_BRUZ", "lambda_GEO",
                                               "se_GEO"});
    CHECK(t.cols.at("Param(BRUZ)")[0].empty());
    CHECK(t.cols.at("Param(GEO)")[0].empty());
    const double lam = t.num("lambda_GEO")[0], se = t.num("se_GEO")[0];
    CHECK(se > 0.0);
    CHECK(std::abs(lam - 0.4) <= 4 * se);
    CHECK(fs::exists(dir / "lim_profile_geo.csv"));
    CHECK(fs::exists(dir / "lim_manifest.json"));
  }
  SUBCASE("single grid point is reported as Param") {
    auto a = base;
    for (const char* s : {"--family", "ces", "--grid", "1.2", "--menus", "geo", "--out"}) a.emplace_back(s);
    a.push_back((dir / "ces.csv").string());
    const Run r = invoke(a);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const Table t = read_table(dir / "ces.csv");
    CHECK(t.header == std::vector<std::string>{"Param(GEO)", "lambda_GEO", "se_GEO"});
    CHECK(t.cols.at("Param(GEO)")[0] == "1.2");
  }
  SUBCASE("grid outside the domain is a usage error") {
    auto a = base;
    for (const char* s : {"--family", "quantile", "--grid", "1.5"}) a.emplace_back(s);
    CHECK(invoke(a).code == 2);
  }
}

TEST_CASE("mc") {
  const auto dir = scratch_dir("cli_mc");
  const std::string cfg = (fs::path(NORMGAME_CONFIGS) / "default.toml").string();
  SUBCASE("default config with overrides") {
    const Run r = invoke({"mc", "--config", cfg, "--set", "R=2", "--set", "n=120", "--set", "beta_fix=1.2", "--out",
                       (dir / "a").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    for (const char* f : {"table1.csv", "table2.csv", "report.json", "meta.json", "manifest.json"})
      CHECK(fs::exists(dir / "a" / f));
    const auto man = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
    CHECK(man["seed"].get<std::uint64_t>() == 20240917u);
    CHECK(man["timings"].contains("wall_seconds"));
    CHECK(man["inputs"][cfg].get<std::string>() == sha256_file(cfg));
  }
  SUBCASE("missing config and bad key") {
    CHECK(invoke({"mc", "--config", (dir / "nope.toml").string()}).code == 2);
    const Run bad = invoke({"mc", "--set", "foo=1", "--out", (dir / "b").string()});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("foo") != std::string::npos);
    CHECK(invoke({"mc", "--set", "R=0"}).code == 2);
    std::ofstream(dir / "broken.toml") << "R = 2\nthis line is not a setting\n";
    const Run broken = invoke({"mc", "--config", (dir / "broken.toml").string()});
    CHECK(broken.code == 2);
    CHECK(broken.err.find(":2") != std::string::npos);
  }
}

TEST_CASE("twostar") {
  const Run ok = invoke({"twostar", "--json"});
  REQUIRE(ok.code == 0);
  const auto j = nlohmann::json::parse(ok.out);
  CHECK(j["status"] == "collapse verified");
  CHECK(j["dphi_zero"] == true);
  CHECK(j["shell2_matches_siblings"] == true);
  CHECK(j["max_abs_peripheral_dphi"].get<double>() <= 1e-10);

  const Run uneq = invoke({"twostar", "--ma", "6", "--mb", "3", "--unequal-hubs"});
  CHECK(uneq.code == 0);
  CHECK(uneq.out.find("hub covariates differ") != std::string::npos);
  CHECK(invoke({"twostar", "--beta", "0"}).code == 2);
}

}  // TEST_SUITE
