#include "escore/simlab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace escore::sim {

namespace {

// 2 Beta(1/3, 1/3) - 1 through a ratio of gammas.
double draw_z(std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(1.0 / 3.0, 1.0);
  double x = 0.0;
  double y = 0.0;
  do {
    x = gamma(rng);
    y = gamma(rng);
  } while (!(x + y > 0.0));
  return 2.0 * (x / (x + y)) - 1.0;
}

std::vector<int> block(Covariates c) {
  std::vector<int> cols;
  for (int j = 1; j <= kLatent; ++j) cols.push_back(c == Covariates::W ? w_column(j) : z_column(j));
  return cols;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void draw_covariates(std::mt19937_64& rng, std::span<double> z, std::span<double> w) {
  if (z.size() != kLatent || w.size() != kLatent) {
    throw std::invalid_argument("draw_covariates needs 15 slots for Z and W");
  }
  for (int j = 0; j < kLatent; ++j) z[j] = draw_z(rng);
  // 1-based: W_j = Z_j for odd j, Z_{j-1} Z_j for even j.
  for (int j = 1; j <= kLatent; ++j) {
    w[j - 1] = j % 2 == 1 ? z[j - 1] : z[j - 2] * z[j - 1];
  }
}

double true_propensity(double delta, std::span<const double> w) {
  double s = 0.0;
  for (int j = 1; j <= 10; ++j) s += w[j - 1];
  return expit(delta * s);
}

double true_outcome(std::span<const double> w) {
  double s = 1.0;
  for (int j = 6; j <= 15; ++j) s += w[j - 1];
  return s;
}

Dataset generate(std::size_t n, double delta, std::mt19937_64& rng) {
  if (n < 1) throw std::invalid_argument("n must be positive");
  Dataset d;
  const auto rows = static_cast<Eigen::Index>(n);
  d.w.resize(rows, 2 * kLatent);
  d.a.resize(rows);
  d.y.resize(rows);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  double z[kLatent];
  double w[kLatent];
  for (Eigen::Index i = 0; i < rows; ++i) {
    draw_covariates(rng, z, w);
    for (int j = 0; j < kLatent; ++j) {
      d.w(i, j) = z[j];
      d.w(i, kLatent + j) = w[j];
    }
    const double a = unit(rng) < true_propensity(delta, w) ? 1.0 : 0.0;
    d.a[i] = a;
    d.y[i] = a + true_outcome(w) - 1.0 + noise(rng);
  }
  return d;
}

ScenarioSpec ScenarioSpec::from_id(char id) {
  switch (id) {
    case 'A': return {'A', Covariates::W, Covariates::W};
    case 'B': return {'B', Covariates::Z, Covariates::W};
    case 'C': return {'C', Covariates::W, Covariates::Z};
    case 'D': return {'D', Covariates::Z, Covariates::Z};
    default: throw std::invalid_argument(std::string("unknown scenario '") + id + "'");
  }
}

NuisanceSpec ScenarioSpec::nuisance_spec() const {
  NuisanceSpec s;
  s.propensity_covariates = block(propensity);
  s.outcome_covariates = block(outcome);
  s.include_ghat_in_outcome = true;
  return s;
}

void SimConfig::validate() const {
  if (delta != 0.0 && delta != 1.0) throw std::invalid_argument("delta must be 0 or 1");
  if (replications < 1) throw std::invalid_argument("replications must be at least 1");
  if (sample_sizes.empty()) throw std::invalid_argument("no sample sizes given");
  for (std::size_t n : sample_sizes) {
    if (n < 2) throw std::invalid_argument("sample sizes must be at least 2");
  }
  if (scenarios.empty()) throw std::invalid_argument("no scenarios given");
  for (char s : scenarios) ScenarioSpec::from_id(s);
  if (estimators.empty()) throw std::invalid_argument("no estimators given");
  if (!(alpha > 0.0 && alpha <= 0.5)) throw std::invalid_argument("alpha must lie in (0, 0.5]");
}

std::mt19937_64 replicate_stream(std::uint64_t seed, char scenario, std::size_t n, int rep) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(scenario), static_cast<std::uint32_t>(n),
                    static_cast<std::uint32_t>(static_cast<std::uint64_t>(n) >> 32),
                    static_cast<std::uint32_t>(rep)};
  return std::mt19937_64(seq);
}

unsigned default_threads() {
  if (const char* env = std::getenv("ESCORE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

MetricsRow summarize(char scenario, EstimatorId estimator, std::size_t n,
                     const std::vector<ReplicateRecord>& records, double truth) {
  MetricsRow row;
  row.scenario = scenario;
  row.estimator = estimator;
  row.n = n;
  double sum = 0.0;
  double se_sq = 0.0;
  int with_se = 0;
  int covered = 0;
  for (const auto& r : records) {
    if (r.failed) {
      ++row.excluded;
      continue;
    }
    ++row.used;
    sum += r.theta_hat;
    if (r.se) {
      ++with_se;
      se_sq += *r.se * *r.se;
      covered += r.covers ? 1 : 0;
    }
  }
  if (row.used == 0) {
    row.mean_estimate = row.abs_bias = row.sqrtn_bias = row.sqrtn_sd = row.sqrtn_rmse = NAN;
    return row;
  }
  const double used = row.used;
  row.mean_estimate = sum / used;
  double ss = 0.0;
  for (const auto& r : records) {
    if (!r.failed) ss += (r.theta_hat - row.mean_estimate) * (r.theta_hat - row.mean_estimate);
  }
  const double var = ss / used;
  const double bias = row.mean_estimate - truth;
  const double rn = std::sqrt(static_cast<double>(n));
  row.abs_bias = std::abs(bias);
  row.sqrtn_bias = rn * row.abs_bias;
  row.sqrtn_sd = rn * std::sqrt(var);
  row.sqrtn_rmse = rn * std::sqrt(bias * bias + var);
  if (with_se == row.used) {
    row.coverage = covered / used;
    if (var > 0.0) row.var_ratio = (se_sq / used) / var;
  }
  return row;
}

const MetricsRow* MetricsTable::find(char scenario, EstimatorId estimator, std::size_t n) const {
  for (const auto& r : rows) {
    if (r.scenario == scenario && r.estimator == estimator && r.n == n) return &r;
  }
  return nullptr;
}

std::string MetricsTable::to_csv() const {
  std::ostringstream out;
  out << "scenario,estimator,n,used,excluded,mean_estimate,abs_bias,sqrtn_bias,sqrtn_sd,"
         "sqrtn_rmse,var_ratio,coverage\n";
  for (const auto& r : rows) {
    out << r.scenario << ',' << to_string(r.estimator) << ',' << r.n << ',' << r.used << ','
        << r.excluded << ',' << format_double(r.mean_estimate) << ',' << format_double(r.abs_bias)
        << ',' << format_double(r.sqrtn_bias) << ',' << format_double(r.sqrtn_sd) << ','
        << format_double(r.sqrtn_rmse) << ',' << (r.var_ratio ? format_double(*r.var_ratio) : "")
        << ',' << (r.coverage ? format_double(*r.coverage) : "") << '\n';
  }
  return out.str();
}

std::vector<ReplicateRecord> run_replicate(const SimConfig& config, char scenario, std::size_t n,
                                           int rep) {
  std::vector<ReplicateRecord> out(config.estimators.size());
  std::mt19937_64 rng = replicate_stream(config.seed, scenario, n, rep);
  const Dataset data = generate(n, config.delta, rng);
  const NuisanceSpec spec = ScenarioSpec::from_id(scenario).nuisance_spec();
  try {
    const auto reports = estimate(data, spec, {Target::ATE, config.alpha}, config.estimators);
    for (std::size_t k = 0; k < reports.size(); ++k) {
      const auto& r = reports[k];
      ReplicateRecord& rec = out[k];
      rec.theta_hat = r.theta_hat;
      rec.se = r.se;
      rec.failed = !r.converged || !std::isfinite(r.theta_hat);
      if (r.ci) rec.covers = r.ci->first <= kTrueAte && kTrueAte <= r.ci->second;
    }
  } catch (const std::exception&) {
    // An arm left empty or a singular fit: the whole replicate is excluded.
    for (auto& rec : out) rec.failed = true;
  }
  return out;
}

CampaignResult run_campaign(const SimConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();

  struct Task {
    char scenario;
    std::size_t n;
    int rep;
  };
  std::vector<Task> tasks;
  for (char s : config.scenarios) {
    for (std::size_t n : config.sample_sizes) {
      for (int r = 0; r < config.replications; ++r) tasks.push_back({s, n, r});
    }
  }
  // Largest cells first so the tail of the queue is cheap.
  std::stable_sort(tasks.begin(), tasks.end(), [](const Task& x, const Task& y) { return x.n > y.n; });

  CampaignResult result;
  const std::size_t k = config.estimators.size();
  for (char s : config.scenarios) {
    for (std::size_t n : config.sample_sizes) {
      result.records[{s, n}].assign(k, std::vector<ReplicateRecord>(
                                           static_cast<std::size_t>(config.replications)));
    }
  }

  const unsigned threads = std::max(
      1u, std::min<unsigned>(config.threads ? config.threads : default_threads(),
                             static_cast<unsigned>(tasks.size())));
  result.threads = threads;

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks.size(); t = next++) {
      const Task& task = tasks[t];
      try {
        auto recs = run_replicate(config, task.scenario, task.n, task.rep);
        auto& cell = result.records.at({task.scenario, task.n});
        for (std::size_t e = 0; e < k; ++e) cell[e][static_cast<std::size_t>(task.rep)] = recs[e];
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = tasks.size();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);

  for (char s : config.scenarios) {
    for (std::size_t n : config.sample_sizes) {
      const auto& cell = result.records.at({s, n});
      for (std::size_t e = 0; e < k; ++e) {
        result.table.rows.push_back(summarize(s, config.estimators[e], n, cell[e]));
      }
      int excluded = 0;
      for (int r = 0; r < config.replications; ++r) {
        const auto rr = static_cast<std::size_t>(r);
        excluded += std::any_of(cell.begin(), cell.end(), [rr](const auto& v) { return v[rr].failed; });
      }
      result.table.excluded[{s, n}] = excluded;
    }
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::string manifest_json(const SimConfig& config, const CampaignResult& result) {
  nlohmann::json j;
  j["version"] = ESCORE_VERSION;
  j["command"] = "simulate";
  nlohmann::json cfg;
  cfg["delta"] = config.delta;
  cfg["sample_sizes"] = config.sample_sizes;
  cfg["replications"] = config.replications;
  cfg["seed"] = config.seed;
  std::vector<std::string> scen;
  for (char s : config.scenarios) scen.emplace_back(1, s);
  cfg["scenarios"] = scen;
  std::vector<std::string> est;
  for (auto e : config.estimators) est.emplace_back(to_string(e));
  cfg["estimators"] = est;
  cfg["alpha"] = config.alpha;
  cfg["kernel"] = {{"selector", "loocv"}, {"grid", "20 log-spaced multiples in [0.05, 2] of sd n^-1/5"}};
  j["config"] = cfg;
  j["seed"] = config.seed;
  nlohmann::json excl = nlohmann::json::array();
  for (const auto& [key, count] : result.table.excluded) {
    excl.push_back({{"scenario", std::string(1, key.first)}, {"n", key.second}, {"excluded", count}});
  }
  j["exclusions"] = excl;
  j["threads"] = result.threads;
  j["wall_seconds"] = result.wall_seconds;
  return j.dump(2);
}

double empirical_efficiency_bound(std::span<const double> g, std::span<const double> m,
                                  std::span<const double> sigma0_sq) {
  const std::size_t n = g.size();
  if (n == 0 || m.size() != n || sigma0_sq.size() != n) {
    throw std::invalid_argument("efficiency bound inputs must be nonempty and equal length");
  }
  double mean_m = 0.0;
  for (double v : m) mean_m += v;
  mean_m /= static_cast<double>(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += sigma0_sq[i] / g[i] + (m[i] - mean_m) * (m[i] - mean_m);
  return s / static_cast<double>(n);
}

double mc_efficiency_bound(double delta, std::size_t draws, std::uint64_t seed) {
  if (draws < 1) throw std::invalid_argument("draws must be positive");
  std::mt19937_64 rng(seed);
  std::vector<double> g(draws), m(draws);
  const std::vector<double> sigma(draws, 1.0);
  double z[kLatent];
  double w[kLatent];
  for (std::size_t i = 0; i < draws; ++i) {
    draw_covariates(rng, z, w);
    g[i] = true_propensity(delta, w);
    m[i] = true_outcome(w);
  }
  return empirical_efficiency_bound(g, m, sigma);
}

}  // namespace escore::sim
