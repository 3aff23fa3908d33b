#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace escore::oracle {

struct Atom {
  int id = 0;
  double p = 0.0;          // P(W = w)
  double g = 0.5;          // P(A = 1 | w)
  double m = 0.0;          // E[Y | A = 1, w]
  double sigma0_sq = 0.0;  // Var(Y | A = 1, w)
  double g1 = 0.5;         // limit of the propensity estimator
  double m1 = 0.0;         // limit of the outcome estimator
};

/// Finite-support law of (W, A, Y) described through the first two
/// conditional moments of Y among treated.
struct DiscreteLaw {
  std::vector<Atom> atoms;

  std::size_t size() const { return atoms.size(); }
  /// Throws std::invalid_argument unless every p > 0, sum p = 1 (1e-12),
  /// g in (0,1), g1 in (0,1], sigma0_sq >= 0.
  void validate() const;
  double treated_probability() const;
};

enum class Conditioning { OnS, OnM, OnR1 };

double true_theta(const DiscreteLaw& law);

/// E{g(W) | c(W)} per atom, grouping atoms by exact equality of c.
/// OnS: c = m - m1; OnM: c = m; OnR1: c = r1, averaging g1.
std::vector<double> reduced_propensity(const DiscreteLaw& law, Conditioning on);

/// Per-atom E{f | c} over exact-equality groups of c.
std::vector<double> group_mean(const DiscreteLaw& law, const std::vector<double>& c,
                               const std::vector<double>& f);

struct EScore {
  std::vector<double> r1;
  std::vector<double> e1;
};

EScore escore_chain(const DiscreteLaw& law);

/// P D for the estimating function A/weight (Y - m1) + m1 - theta.
double expected_estimating_function(const DiscreteLaw& law, const std::vector<double>& weight);

struct IdentityValue {
  double value = 0.0;
  bool precondition_met = false;
};

/// P D_{(e1, m1), theta} with e1 from escore_chain. Zero when g1 = g or m1 = m.
IdentityValue check_theorem2(const DiscreteLaw& law);
/// P D_{(g_s, m1), theta} with g_s = E{g | m - m1}.
IdentityValue check_theorem1(const DiscreteLaw& law);

/// Integral of (1/e_hat)(g - e_hat)(m - m_hat) dP.
double drift_term(const DiscreteLaw& law, const std::vector<double>& e_hat,
                  const std::vector<double>& m_hat);

struct DriftDecomposition {
  double drift = 0.0;           // beta
  double score_term = 0.0;      // P S_h with h = q/g
  double remainder = 0.0;       // integral of (1/g_hat)(g - g_hat)(m - m_hat)
  // integral of (q0 - q) m: zero when m is a function of m_hat.
  double conditioning_gap = 0.0;
  std::vector<double> q;        // E{A(1/e_hat - 1/g_hat) | m_hat}
  std::vector<double> q0;       // E{A(1/e_hat - 1/g_hat) | m}
  double tower_mhat_deviation = 0.0;  // |int q m_hat - int a(1/e - 1/g) m_hat|
  double tower_m_deviation = 0.0;     // |int q0 m - int a(1/e - 1/g) m|

  /// |drift - score_term - remainder - conditioning_gap|, always ~0.
  double full_identity_deviation() const;
  /// |drift - score_term - remainder|.
  double identity_deviation() const;
};

DriftDecomposition check_lemma1_exact(const DiscreteLaw& law, const std::vector<double>& e_hat,
                                      const std::vector<double>& g_hat,
                                      const std::vector<double>& m_hat);

/// E{sigma0^2/g} + E{(m - theta)^2}.
double efficiency_bound(const DiscreteLaw& law);

/// Var of A/g {1 - (g_m - g)/P(A=1)} (Y - m) + m - theta.
double if0_variance(const DiscreteLaw& law);

/// Per-atom factor 1 - (g_m - g)/P(A=1).
std::vector<double> weight_shrinkage(const DiscreteLaw& law);

// Randomized laws for property checks.

enum class Regime { G1EqualsG, M1EqualsM, Free };

struct RandomLawOptions {
  int min_atoms = 3;
  int max_atoms = 10;
  Regime regime = Regime::G1EqualsG;
};

/// Atom count uniform in [min, max], normalized uniform probabilities, g in
/// [0.05, 0.95], with repeated values injected into g1 and m1 (and m, so some
/// outcome groups collide).
DiscreteLaw random_law(std::mt19937_64& rng, const RandomLawOptions& options = {});

/// Working nuisances on a law: e_hat, g_hat in [0.05, 0.95]; m_hat with
/// collisions only where m also collides.
struct WorkingNuisances {
  std::vector<double> e_hat;
  std::vector<double> g_hat;
  std::vector<double> m_hat;
};

WorkingNuisances random_working_nuisances(const DiscreteLaw& law, std::mt19937_64& rng);

struct CheckRow {
  std::string name;
  double max_abs_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct SuiteOptions {
  int laws = 1000;
  std::uint64_t seed = 20190101;
  double tolerance = 1e-10;
  // Negative control: perturbs e1 by 0.01 inside the g1 = g identity check.
  bool break_theorem2 = false;
};

struct SuiteResult {
  std::vector<CheckRow> rows;
  bool passed = true;
  // First law that violated a check, when any did.
  std::optional<DiscreteLaw> offending_law;
  std::string offending_check;
};

SuiteResult run_identity_suite(const SuiteOptions& options);

std::string to_json(const DiscreteLaw& law);

}  // namespace escore::oracle
