#include "escore/cli.hpp"
#include "escore/simlab.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "escore");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = escore::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("escore_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Simulation-design CSV with W1..W15, A and Y.
void write_dgp_csv(const fs::path& p, std::size_t n, std::uint64_t seed, bool constant_y = false) {
  std::mt19937_64 rng(seed);
  const escore::Dataset d = escore::sim::generate(n, 1.0, rng);
  std::ostringstream s;
  s.precision(17);
  for (int j = 1; j <= 15; ++j) s << 'W' << j << ',';
  s << "A,Y\n";
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    for (int j = 1; j <= 15; ++j) s << d.w(i, escore::sim::w_column(j)) << ',';
    s << d.a[i] << ',' << (constant_y ? 3.0 : d.y[i]) << '\n';
  }
  write(p, s.str());
}

std::vector<std::vector<std::string>> csv_cells(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"simulate", "--reps", "0"}).code == 2);
  CHECK(cli({"simulate", "--delta", "0.5"}).code == 2);
  CHECK(cli({"simulate", "--scenarios", "E"}).code == 2);
  CHECK(cli({"analyze"}).code == 2);
  CHECK(cli({"analyze", "--input", "/nonexistent/file.csv"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("simulate is deterministic") {
  const fs::path a = scratch("sim_a"), b = scratch("sim_b");
  const std::vector<std::string> base{"simulate", "--delta", "1", "--scenarios", "A", "--n", "200",
                                      "--reps", "2", "--seed", "7"};
  auto args = base;
  args.insert(args.end(), {"--out", a.string()});
  const Run r1 = cli(args);
  args = base;
  args.insert(args.end(), {"--out", b.string()});
  const Run r2 = cli(args);
  REQUIRE(r1.code == 0);
  REQUIRE(r2.code == 0);
  CHECK(r1.out == r2.out);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  auto ma = nlohmann::json::parse(slurp(a / "manifest.json"));
  auto mb = nlohmann::json::parse(slurp(b / "manifest.json"));
  ma.erase("wall_seconds");
  mb.erase("wall_seconds");
  CHECK(ma == mb);
  CHECK(ma.at("seed") == 7);
  CHECK_THAT(r1.out, ContainsSubstring("e-TMLE-AL"));
}

TEST_CASE("analyze on simulated data") {
  const fs::path dir = scratch("analyze");
  write_dgp_csv(dir / "data.csv", 5000, 11);
  const Run r = cli({"analyze", "--input", (dir / "data.csv").string(), "--out", (dir / "out").string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK_THAT(r.out, ContainsSubstring("Estimator  |   Estimate |       S.E. |    P-value"));

  const auto rows = csv_cells(slurp(dir / "out" / "estimates.csv"));
  REQUIRE(rows.size() == 6);
  for (std::size_t k = 1; k < rows.size(); ++k) {
    INFO(rows[k][0]);
    CHECK_THAT(std::stod(rows[k][1]), WithinAbs(1.0, 0.2));
    const bool no_se = rows[k][0] == "G-comp" || rows[k][0] == "e-TMLE";
    CHECK(rows[k][2].empty() == no_se);
  }
  // e-TMLE prints dashes for S.E. and p-value.
  std::istringstream text(slurp(dir / "out" / "estimates.txt"));
  std::string line;
  bool seen = false;
  while (std::getline(text, line)) {
    if (line.rfind("e-TMLE ", 0) == 0) {
      seen = true;
      CHECK_THAT(line, ContainsSubstring("---"));
    }
  }
  CHECK(seen);

  const auto wv = csv_cells(slurp(dir / "out" / "weight_variance.csv"));
  REQUIRE(wv.size() == 3);
  for (std::size_t k = 1; k < 3; ++k) {
    INFO(wv[k][0]);
    CHECK(std::stod(wv[k][3]) <= std::stod(wv[k][2]));
  }
  const auto diag = csv_cells(slurp(dir / "out" / "diagnostics.csv"));
  CHECK(diag.size() == 5001);
  CHECK(diag[0][2] == "g_hat_1");
  const auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
  CHECK(manifest.at("n") == 5000);
  CHECK(manifest.at("config").at("covariates").size() == 15);
}

TEST_CASE("analyze with a constant outcome") {
  const fs::path dir = scratch("constant");
  write_dgp_csv(dir / "data.csv", 400, 12, true);
  const Run r = cli({"analyze", "--input", (dir / "data.csv").string(), "--covariates", "W1,W2,W7",
                     "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto rows = csv_cells(slurp(dir / "estimates.csv"));
  for (std::size_t k = 1; k < rows.size(); ++k) {
    CHECK_THAT(std::stod(rows[k][1]), WithinAbs(0.0, 1e-8));
    if (!rows[k][3].empty()) CHECK(std::stod(rows[k][3]) == 1.0);
  }
}

TEST_CASE("analyze input validation") {
  const fs::path dir = scratch("invalid");
  write(dir / "missing.csv", "W1,A,Y\n0.1,1,2\n0.2,,3\n0.3,0,1\n");
  Run r = cli({"analyze", "--input", (dir / "missing.csv").string(), "--out", dir.string()});
  CHECK(r.code == 2);
  CHECK_THAT(r.err, ContainsSubstring("3"));

  write(dir / "na.csv", "W1,A,Y\n0.1,1,NA\n0.2,0,3\n");
  CHECK(cli({"analyze", "--input", (dir / "na.csv").string(), "--out", dir.string()}).code == 2);

  write(dir / "ragged.csv", "W1,A,Y\n0.1,1\n");
  CHECK(cli({"analyze", "--input", (dir / "ragged.csv").string(), "--out", dir.string()}).code == 2);

  write(dir / "treat.csv", "W1,A,Y\n0.1,1,2\n0.2,2,3\n0.3,0,1\n");
  r = cli({"analyze", "--input", (dir / "treat.csv").string(), "--out", dir.string()});
  CHECK(r.code == 2);
  CHECK_THAT(r.err, ContainsSubstring("0/1"));

  write(dir / "ok.csv", "W1,A,Y\n0.1,1,2\n0.2,0,3\n0.3,0,1\n0.5,1,1\n");
  CHECK(cli({"analyze", "--input", (dir / "ok.csv").string(), "--covariates", "W9"}).code == 2);
  CHECK(cli({"analyze", "--input", (dir / "ok.csv").string(), "--bw-grid", "0.1,0.2", "--bandwidth",
             "0.3"})
            .code == 2);
  CHECK(cli({"analyze", "--input", (dir / "ok.csv").string(), "--estimators", "CTMLE"}).code == 2);
}

TEST_CASE("oracle-check") {
  const fs::path dir = scratch("oracle");
  const Run ok = cli({"oracle-check", "--laws", "200"});
  CHECK(ok.code == 0);
  CHECK_THAT(ok.out, ContainsSubstring("PASS"));

  const fs::path repro = dir / "repro.json";
  const Run bad = cli({"oracle-check", "--laws", "50", "--break-theorem2", "--repro", repro.string()});
  CHECK(bad.code == 1);
  REQUIRE(fs::exists(repro));
  CHECK(nlohmann::json::parse(slurp(repro)).contains("law"));

  CHECK(cli({"oracle-check", "--laws", "1", "--seed", "42"}).out ==
        cli({"oracle-check", "--laws", "1", "--seed", "42"}).out);
}

TEST_CASE("installed binary exit codes") {
  const char* exe = std::getenv("ESCORE_CLI");
  if (exe == nullptr) SKIP("ESCORE_CLI not set");
  const std::string quiet = " > /dev/null 2>&1";
  auto status = [&](const std::string& args) {
    const int s = std::system((std::string(exe) + " " + args + quiet).c_str());
    return WEXITSTATUS(s);
  };
  CHECK(status("oracle-check --laws 20") == 0);
  CHECK(status("simulate --reps 0") == 2);
  const fs::path repro = scratch("binary") / "repro.json";
  CHECK(status("oracle-check --laws 20 --break-theorem2 --repro " + repro.string()) == 1);
}
