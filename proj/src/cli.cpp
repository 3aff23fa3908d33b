#include "escore/cli.hpp"

#include "escore/estimators.hpp"
#include "escore/oracle.hpp"
#include "escore/simlab.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace escore::cli {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string line_list(const std::vector<std::size_t>& lines) {
  std::string s;
  for (std::size_t i = 0; i < lines.size() && i < 20; ++i) {
    if (i) s += ", ";
    s += std::to_string(lines[i]);
  }
  if (lines.size() > 20) s += ", ... (" + std::to_string(lines.size()) + " in total)";
  return s;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string full(double v) { return fmt("%.17g", v); }

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
}

std::vector<EstimatorId> parse_estimators(const std::vector<std::string>& names) {
  if (names.empty()) return all_estimators();
  std::vector<EstimatorId> out;
  for (const auto& n : names) {
    const auto id = parse_estimator(trim(n));
    if (!id) throw std::invalid_argument("unknown estimator '" + n + "'");
    out.push_back(*id);
  }
  return out;
}

std::vector<char> parse_scenarios(const std::string& s) {
  std::vector<char> out;
  for (char c : s) {
    if (c == ',' || c == ' ') continue;
    const char id = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    sim::ScenarioSpec::from_id(id);
    out.push_back(id);
  }
  if (out.empty()) throw std::invalid_argument("no scenarios given");
  return out;
}

double variance(const std::vector<double>& v) {
  if (v.empty()) return NAN;
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return s / static_cast<double>(v.size());
}

// ---- simulate -------------------------------------------------------------

struct SimulateArgs {
  double delta = 1.0;
  std::string scenarios = "A,B,C,D";
  std::vector<std::size_t> n{200, 800, 1800, 3200, 5000, 7200, 9800, 12800};
  int reps = 500;
  std::uint64_t seed = 1;
  std::vector<std::string> estimators;
  double alpha = 0.05;
  std::string out = ".";
};

int cmd_simulate(const SimulateArgs& args, std::ostream& out, std::ostream& err) {
  sim::SimConfig config;
  config.delta = args.delta;
  config.sample_sizes = args.n;
  config.replications = args.reps;
  config.seed = args.seed;
  config.scenarios = parse_scenarios(args.scenarios);
  config.estimators = parse_estimators(args.estimators);
  config.alpha = args.alpha;
  config.validate();

  const sim::CampaignResult result = sim::run_campaign(config);

  char line[256];
  std::snprintf(line, sizeof line, "%-3s %-10s %6s %10s %12s %10s %12s %10s %9s %5s\n", "sc",
                "estimator", "n", "abs_bias", "sqrtn_bias", "sqrtn_sd", "sqrtn_rmse", "var_ratio",
                "coverage", "excl");
  out << line;
  for (const auto& r : result.table.rows) {
    std::snprintf(line, sizeof line, "%-3c %-10s %6zu %10.4f %12.4f %10.4f %12.4f %10s %9s %5d\n",
                  r.scenario, std::string(to_string(r.estimator)).c_str(), r.n, r.abs_bias,
                  r.sqrtn_bias, r.sqrtn_sd, r.sqrtn_rmse,
                  r.var_ratio ? fmt("%.4f", *r.var_ratio).c_str() : "---",
                  r.coverage ? fmt("%.4f", *r.coverage).c_str() : "---", r.excluded);
    out << line;
  }
  for (const auto& [key, count] : result.table.excluded) {
    if (count > 0.05 * config.replications) {
      err << "warning: scenario " << key.first << " n=" << key.second << ": " << count << " of "
          << config.replications << " replicates excluded\n";
    }
  }

  fs::create_directories(args.out);
  write_file(fs::path(args.out) / "metrics.csv", result.table.to_csv());
  write_file(fs::path(args.out) / "manifest.json", sim::manifest_json(config, result) + "\n");
  return kSuccess;
}

// ---- analyze --------------------------------------------------------------

struct AnalyzeArgs {
  std::string input;
  std::string outcome = "Y";
  std::string treatment = "A";
  std::vector<std::string> covariates;
  std::vector<std::string> estimators;
  double alpha = 0.05;
  std::vector<double> bw_grid;
  double bandwidth = 0.0;
  std::string out = ".";
};

struct ArmSummary {
  std::string arm;
  std::size_t count = 0;
  double var_inv_g = NAN;
  double var_inv_e = NAN;
};

int cmd_analyze(const AnalyzeArgs& args, std::ostream& out, std::ostream& err) {
  const CsvTable table = read_csv(args.input);
  std::vector<std::string> covariates = args.covariates;
  const Dataset data = dataset_from_csv(table, args.outcome, args.treatment, covariates);

  NuisanceSpec spec = NuisanceSpec::all_columns(data.covariates());
  if (args.bandwidth > 0.0) {
    spec.kernel = KernelSpec::fixed(args.bandwidth);
  } else if (!args.bw_grid.empty()) {
    for (double h : args.bw_grid) {
      if (!(h > 0.0)) throw std::invalid_argument("bandwidth grid values must be positive");
    }
    spec.kernel.grid = args.bw_grid;
  }
  const auto which = parse_estimators(args.estimators);
  if (!(args.alpha > 0.0 && args.alpha <= 0.5)) throw std::invalid_argument("alpha must lie in (0, 0.5]");

  const ArmFits fits = fit_arms(data, spec, Target::ATE);
  const auto reports = estimate_with(data, fits, {Target::ATE, args.alpha}, which);

  std::ostringstream text;
  std::ostringstream csv;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s | %10s | %10s | %10s\n", "Estimator", "Estimate", "S.E.",
                "P-value");
  text << line << std::string(49, '-') << '\n';
  csv << "estimator,estimate,se,p_value,ci_lower,ci_upper,converged\n";
  for (const auto& r : reports) {
    const auto p = r.p_value();
    const std::string name(to_string(r.estimator));
    std::snprintf(line, sizeof line, "%-10s | %10.4f | %10s | %10s\n", name.c_str(), r.theta_hat,
                  r.se ? fmt("%.4f", *r.se).c_str() : "---", p ? fmt("%.4g", *p).c_str() : "---");
    text << line;
    csv << name << ',' << full(r.theta_hat) << ',' << (r.se ? full(*r.se) : "") << ','
        << (p ? full(*p) : "") << ',' << (r.ci ? full(r.ci->first) : "") << ','
        << (r.ci ? full(r.ci->second) : "") << ',' << (r.converged ? 1 : 0) << '\n';
    if (!r.converged) err << "warning: " << name << " did not converge\n";
  }
  out << text.str();

  // Per-observation nuisances for both arms; arm 0 refers to the relabeled fit.
  const NuisanceFit& f1 = *fits.treated;
  const NuisanceFit& f0 = *fits.control;
  std::ostringstream diag;
  diag << "row,A,g_hat_1,e_hat_1,weight_g_1,weight_e_1,g_hat_0,e_hat_0,weight_g_0,weight_e_0\n";
  ArmSummary arms[2] = {{"treated"}, {"control"}};
  std::vector<double> inv_g[2], inv_e[2];
  for (std::size_t i = 0; i < static_cast<std::size_t>(data.size()); ++i) {
    const double a = data.a[static_cast<Eigen::Index>(i)];
    diag << i + 1 << ',' << a << ',' << full(f1.g_hat[i]) << ',' << full(f1.e_hat[i]) << ','
         << full(a / f1.g_hat[i]) << ',' << full(a / f1.e_hat[i]) << ',' << full(f0.g_hat[i]) << ','
         << full(f0.e_hat[i]) << ',' << full((1.0 - a) / f0.g_hat[i]) << ','
         << full((1.0 - a) / f0.e_hat[i]) << '\n';
    const NuisanceFit& f = a == 1.0 ? f1 : f0;
    const int k = a == 1.0 ? 0 : 1;
    inv_g[k].push_back(1.0 / f.g_hat[i]);
    inv_e[k].push_back(1.0 / f.e_hat[i]);
  }
  std::ostringstream summary;
  summary << "arm,count,var_inv_g,var_inv_e\n";
  out << '\n';
  for (int k = 0; k < 2; ++k) {
    arms[k].count = inv_g[k].size();
    arms[k].var_inv_g = variance(inv_g[k]);
    arms[k].var_inv_e = variance(inv_e[k]);
    summary << arms[k].arm << ',' << arms[k].count << ',' << full(arms[k].var_inv_g) << ','
            << full(arms[k].var_inv_e) << '\n';
    std::snprintf(line, sizeof line, "%-8s var(1/g_hat) = %.6g  var(1/e_hat) = %.6g\n",
                  arms[k].arm.c_str(), arms[k].var_inv_g, arms[k].var_inv_e);
    out << line;
  }

  nlohmann::json m;
  m["version"] = ESCORE_VERSION;
  m["command"] = "analyze";
  m["config"] = {{"input", args.input},
                 {"outcome", args.outcome},
                 {"treatment", args.treatment},
                 {"covariates", covariates},
                 {"alpha", args.alpha},
                 {"bandwidth", args.bandwidth},
                 {"bw_grid", args.bw_grid}};
  std::vector<std::string> names;
  for (auto e : which) names.emplace_back(to_string(e));
  m["config"]["estimators"] = names;
  m["n"] = data.size();
  m["bandwidths"] = {
      {"treated", {{"r", f1.bandwidth_r}, {"e", f1.bandwidth_e}, {"q", f1.bandwidth_q}}},
      {"control", {{"r", f0.bandwidth_r}, {"e", f0.bandwidth_e}, {"q", f0.bandwidth_q}}}};
  m["weight_variance"] = nlohmann::json::array();
  for (const auto& a : arms) {
    m["weight_variance"].push_back(
        {{"arm", a.arm}, {"var_inv_g", a.var_inv_g}, {"var_inv_e", a.var_inv_e}});
  }

  fs::create_directories(args.out);
  const fs::path dir(args.out);
  write_file(dir / "estimates.txt", text.str());
  write_file(dir / "estimates.csv", csv.str());
  write_file(dir / "diagnostics.csv", diag.str());
  write_file(dir / "weight_variance.csv", summary.str());
  write_file(dir / "manifest.json", m.dump(2) + "\n");
  return kSuccess;
}

// ---- oracle-check ---------------------------------------------------------

struct OracleArgs {
  int laws = 1000;
  std::uint64_t seed = 20190101;
  bool break_theorem2 = false;
  std::string repro = "oracle_repro.json";
};

int cmd_oracle(const OracleArgs& args, std::ostream& out, std::ostream& err) {
  if (args.laws < 1) throw std::invalid_argument("--laws must be at least 1");
  oracle::SuiteOptions options;
  options.laws = args.laws;
  options.seed = args.seed;
  options.break_theorem2 = args.break_theorem2;
  const auto result = oracle::run_identity_suite(options);

  char line[160];
  std::snprintf(line, sizeof line, "%-40s %14s %10s  %s\n", "check", "max |dev|", "tolerance",
                "status");
  out << line;
  for (const auto& r : result.rows) {
    std::snprintf(line, sizeof line, "%-40s %14.3e %10.1e  %s\n", r.name.c_str(),
                  r.max_abs_deviation, r.tolerance, r.passed ? "PASS" : "FAIL");
    out << line;
  }
  out << "laws: " << args.laws << "  seed: " << args.seed << '\n';
  if (result.passed) return kSuccess;

  nlohmann::json repro;
  repro["check"] = result.offending_check;
  repro["seed"] = args.seed;
  repro["break_theorem2"] = args.break_theorem2;
  repro["law"] = nlohmann::json::parse(oracle::to_json(*result.offending_law));
  write_file(args.repro, repro.dump(2) + "\n");
  err << "identity check '" << result.offending_check << "' failed; law written to " << args.repro
      << '\n';
  return kFailure;
}

}  // namespace

int CsvTable::column(const std::string& name) const {
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == name) return static_cast<int>(j);
  }
  return -1;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path + " is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  for (auto& h : split(line, ',')) t.header.push_back(trim(h));
  std::vector<std::size_t> missing, ragged, bad;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != t.header.size()) {
      ragged.push_back(lineno);
      continue;
    }
    std::vector<double> row(cells.size());
    bool has_missing = false;
    bool has_bad = false;
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const std::string cell = trim(cells[j]);
      if (cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan") {
        has_missing = true;
        continue;
      }
      const char* end = cell.data() + cell.size();
      const auto [ptr, ec] = std::from_chars(cell.data(), end, row[j]);
      if (ec != std::errc() || ptr != end || !std::isfinite(row[j])) has_bad = true;
    }
    if (has_missing) missing.push_back(lineno);
    if (has_bad) bad.push_back(lineno);
    t.rows.push_back(std::move(row));
  }
  if (!missing.empty()) {
    throw std::invalid_argument("missing values on line(s) " + line_list(missing) +
                                "; missing data is not supported");
  }
  if (!ragged.empty()) throw std::invalid_argument("wrong number of cells on line(s) " + line_list(ragged));
  if (!bad.empty()) throw std::invalid_argument("non-numeric values on line(s) " + line_list(bad));
  if (t.rows.empty()) throw std::invalid_argument(path + " has no data rows");
  return t;
}

Dataset dataset_from_csv(const CsvTable& table, const std::string& outcome,
                         const std::string& treatment, std::vector<std::string>& covariates) {
  const int yc = table.column(outcome);
  const int ac = table.column(treatment);
  if (yc < 0) throw std::invalid_argument("outcome column '" + outcome + "' not found");
  if (ac < 0) throw std::invalid_argument("treatment column '" + treatment + "' not found");
  if (covariates.empty() || (covariates.size() == 1 && covariates[0] == "all")) {
    covariates.clear();
    for (std::size_t j = 0; j < table.header.size(); ++j) {
      if (static_cast<int>(j) != yc && static_cast<int>(j) != ac) covariates.push_back(table.header[j]);
    }
  }
  std::vector<int> cols;
  for (const auto& c : covariates) {
    const int j = table.column(c);
    if (j < 0) throw std::invalid_argument("covariate column '" + c + "' not found");
    if (j == yc || j == ac) throw std::invalid_argument("column '" + c + "' cannot be a covariate");
    cols.push_back(j);
  }

  const auto n = static_cast<Eigen::Index>(table.rows.size());
  Dataset d;
  d.w.resize(n, static_cast<Eigen::Index>(cols.size()));
  d.a.resize(n);
  d.y.resize(n);
  std::vector<std::size_t> nonbinary;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.rows[static_cast<std::size_t>(i)];
    d.y[i] = row[static_cast<std::size_t>(yc)];
    d.a[i] = row[static_cast<std::size_t>(ac)];
    if (d.a[i] != 0.0 && d.a[i] != 1.0) nonbinary.push_back(static_cast<std::size_t>(i) + 2);
    for (std::size_t k = 0; k < cols.size(); ++k) {
      d.w(i, static_cast<Eigen::Index>(k)) = row[static_cast<std::size_t>(cols[k])];
    }
  }
  if (!nonbinary.empty()) {
    throw std::invalid_argument("treatment column '" + treatment + "' is not 0/1 on line(s) " +
                                line_list(nonbinary));
  }
  d.validate(true);
  return d;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Collaborative double robustness estimators: simulation, analysis, identity checks",
               "escore"};
  app.set_version_flag("--version", ESCORE_VERSION);
  app.require_subcommand(1);

  SimulateArgs sim_args;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo campaign over the synthetic design");
  simulate->add_option("--delta", sim_args.delta, "Propensity strength (0 or 1)")->capture_default_str();
  simulate->add_option("--scenarios", sim_args.scenarios, "Scenario letters, e.g. A,C")->capture_default_str();
  simulate->add_option("--n", sim_args.n, "Sample sizes")->delimiter(',')->capture_default_str();
  simulate->add_option("--reps", sim_args.reps, "Replications per cell")->capture_default_str();
  simulate->add_option("--seed", sim_args.seed, "Base seed")->capture_default_str();
  simulate->add_option("--estimators", sim_args.estimators, "Estimators (default all)")->delimiter(',');
  simulate->add_option("--alpha", sim_args.alpha, "Wald level")->capture_default_str();
  simulate->add_option("--out", sim_args.out, "Output directory")->capture_default_str();

  AnalyzeArgs an_args;
  auto* analyze = app.add_subcommand("analyze", "Estimate the ATE on a CSV file");
  analyze->add_option("--input", an_args.input, "CSV with header row")->required();
  analyze->add_option("--outcome", an_args.outcome, "Outcome column")->capture_default_str();
  analyze->add_option("--treatment", an_args.treatment, "0/1 treatment column")->capture_default_str();
  analyze->add_option("--covariates", an_args.covariates, "Covariate columns (default all remaining)")
      ->delimiter(',');
  analyze->add_option("--estimators", an_args.estimators, "Estimators (default all)")->delimiter(',');
  analyze->add_option("--alpha", an_args.alpha, "Wald level")->capture_default_str();
  auto* grid = analyze->add_option("--bw-grid", an_args.bw_grid, "Kernel bandwidth grid for cross-validation")
                   ->delimiter(',');
  analyze->add_option("--bandwidth", an_args.bandwidth, "Fixed kernel bandwidth")->excludes(grid);
  analyze->add_option("--out", an_args.out, "Output directory")->capture_default_str();

  OracleArgs or_args;
  auto* check = app.add_subcommand("oracle-check", "Exact identity checks on random finite laws");
  check->add_option("--laws", or_args.laws, "Number of random laws per check")->capture_default_str();
  check->add_option("--seed", or_args.seed, "Seed")->capture_default_str();
  check->add_flag("--break-theorem2", or_args.break_theorem2, "Perturb the e-score (negative control)");
  check->add_option("--repro", or_args.repro, "Reproduction file written on failure")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kUsage;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim_args, out, err);
    if (analyze->parsed()) return cmd_analyze(an_args, out, err);
    return cmd_oracle(or_args, out, err);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace escore::cli
