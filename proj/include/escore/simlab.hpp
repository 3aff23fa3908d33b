#pragma once

#include "escore/estimators.hpp"
#include "escore/nuisance.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace escore::sim {

constexpr int kLatent = 15;
constexpr double kTrueAte = 1.0;

/// Column blocks of a generated dataset: Z1..Z15 then W1..W15.
constexpr int z_column(int j) { return j - 1; }
constexpr int w_column(int j) { return kLatent + j - 1; }

/// Fills z (Z1..Z15) and w (W1..W15) for one unit.
void draw_covariates(std::mt19937_64& rng, std::span<double> z, std::span<double> w);

double true_propensity(double delta, std::span<const double> w);
/// E[Y | A = 1, W].
double true_outcome(std::span<const double> w);

Dataset generate(std::size_t n, double delta, std::mt19937_64& rng);

enum class Covariates { W, Z };

struct ScenarioSpec {
  char id = 'A';
  Covariates propensity = Covariates::W;
  Covariates outcome = Covariates::W;

  /// A = (W, W), B = (Z, W), C = (W, Z), D = (Z, Z); propensity first.
  static ScenarioSpec from_id(char id);
  NuisanceSpec nuisance_spec() const;
};

struct SimConfig {
  double delta = 1.0;
  std::vector<std::size_t> sample_sizes{200, 800, 1800, 3200, 5000, 7200, 9800, 12800};
  int replications = 500;
  std::uint64_t seed = 1;
  std::vector<char> scenarios{'A', 'B', 'C', 'D'};
  std::vector<EstimatorId> estimators = all_estimators();
  double alpha = 0.05;
  unsigned threads = 0;  // 0: ESCORE_THREADS, else hardware concurrency

  /// Throws std::invalid_argument on an unusable configuration.
  void validate() const;
};

/// Deterministic stream for replicate `rep` of cell (scenario, n).
std::mt19937_64 replicate_stream(std::uint64_t seed, char scenario, std::size_t n, int rep);

/// ESCORE_THREADS when set and positive, otherwise hardware concurrency.
unsigned default_threads();

struct ReplicateRecord {
  double theta_hat = 0.0;
  std::optional<double> se;
  bool covers = false;
  bool failed = false;
};

struct MetricsRow {
  char scenario = 'A';
  EstimatorId estimator = EstimatorId::GComp;
  std::size_t n = 0;
  int used = 0;
  int excluded = 0;
  double mean_estimate = 0.0;
  double abs_bias = 0.0;
  double sqrtn_bias = 0.0;
  double sqrtn_sd = 0.0;
  double sqrtn_rmse = 0.0;
  std::optional<double> var_ratio;
  std::optional<double> coverage;
};

/// Aggregates one cell's records; sd uses the divisor R so that
/// rmse^2 = bias^2 + sd^2.
MetricsRow summarize(char scenario, EstimatorId estimator, std::size_t n,
                     const std::vector<ReplicateRecord>& records, double truth = kTrueAte);

struct MetricsTable {
  std::vector<MetricsRow> rows;
  // Replicates with at least one failed estimator, per (scenario, n).
  std::map<std::pair<char, std::size_t>, int> excluded;

  const MetricsRow* find(char scenario, EstimatorId estimator, std::size_t n) const;
  std::string to_csv() const;
};

struct CampaignResult {
  MetricsTable table;
  // records[(scenario, n)][estimator index][rep]
  std::map<std::pair<char, std::size_t>, std::vector<std::vector<ReplicateRecord>>> records;
  double wall_seconds = 0.0;
  unsigned threads = 1;
};

/// One replicate: fresh data, ATE reports for the configured estimators.
std::vector<ReplicateRecord> run_replicate(const SimConfig& config, char scenario, std::size_t n,
                                           int rep);

CampaignResult run_campaign(const SimConfig& config);

std::string manifest_json(const SimConfig& config, const CampaignResult& result);

/// Sample mean of sigma0^2/g + (m - mean(m))^2.
double empirical_efficiency_bound(std::span<const double> g, std::span<const double> m,
                                  std::span<const double> sigma0_sq);

/// Monte Carlo bound for E(Y1) under the simulation design (sigma0^2 = 1).
double mc_efficiency_bound(double delta, std::size_t draws, std::uint64_t seed = 1);

}  // namespace escore::sim
