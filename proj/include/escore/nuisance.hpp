#pragma once

#include "escore/numkit.hpp"

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace escore {

/// n observations of (W, A, Y). `a` holds 0/1 values.
struct Dataset {
  Eigen::MatrixXd w;
  Eigen::VectorXd a;
  Eigen::VectorXd y;

  Eigen::Index size() const { return y.size(); }
  Eigen::Index covariates() const { return w.cols(); }

  /// Throws std::invalid_argument on shape mismatch, non-finite entries,
  /// non-binary treatment, n < 2, or a missing treated arm.
  void validate(bool require_both_arms = false) const;

  /// The same rows with treatment flipped (A <- 1 - A).
  Dataset relabeled() const;

  std::size_t treated_count() const;
};

struct NuisanceSpec {
  std::vector<int> propensity_covariates;
  std::vector<int> outcome_covariates;
  bool include_ghat_in_outcome = true;
  KernelSpec kernel;

  /// Every column for both models.
  static NuisanceSpec all_columns(Eigen::Index p);
  void validate(Eigen::Index p) const;
};

/// Main-terms logistic model for P(A=1|W), intercept first.
struct PropensityModel {
  std::vector<int> columns;
  Eigen::VectorXd coefficients;
  bool converged = true;
  int iterations = 0;

  double predict(std::span<const double> row) const;
};

/// Linear model for the scaled outcome among treated, optionally with the
/// fitted propensity as an extra column. Predictions are clipped to the
/// probability band.
struct OutcomeModel {
  std::vector<int> columns;
  bool uses_ghat = false;
  Eigen::VectorXd coefficients;  // intercept, columns..., [ghat]
  bool constant = false;         // zero-range outcome shortcut
  double constant_value = 0.5;

  double predict(std::span<const double> row, double ghat) const;
};

struct PropensityFit {
  std::vector<double> g_hat;
  PropensityModel model;
};

struct OutcomeFit {
  std::vector<double> m_hat;  // scaled outcome
  OutcomeModel model;
  OutcomeScaler scaler;
};

struct QhFit {
  std::vector<double> q_hat;
  std::vector<double> h_hat;
  double bandwidth = 0.0;
};

/// Fitted nuisances for the E(Y1) target on the rows of one dataset.
struct NuisanceFit {
  std::vector<double> g_hat;
  std::vector<double> m_hat;
  std::vector<double> r_hat;
  std::vector<double> e_hat;
  std::vector<double> q_hat;
  std::vector<double> h_hat;
  std::vector<double> y_scaled;
  OutcomeScaler scaler;
  PropensityModel propensity;
  OutcomeModel outcome;
  double bandwidth_r = 0.0;
  double bandwidth_e = 0.0;
  double bandwidth_q = 0.0;

  std::size_t size() const { return g_hat.size(); }
  bool converged() const { return propensity.converged; }

  double predict_g(std::span<const double> row) const { return propensity.predict(row); }
  /// Scaled outcome regression at a covariate row.
  double predict_m(std::span<const double> row) const {
    return outcome.predict(row, propensity.predict(row));
  }
};

PropensityFit fit_propensity(const Dataset& data, const NuisanceSpec& spec);

OutcomeFit fit_outcome(const Dataset& data, const NuisanceSpec& spec,
                       std::span<const double> g_hat);

/// Kernel regression of the treated residuals (y_scaled - m_hat) on g_hat,
/// evaluated at every observation.
NwResult estimate_r(std::span<const double> a, std::span<const double> y_scaled,
                    std::span<const double> g_hat, std::span<const double> m_hat,
                    const KernelSpec& kernel);

/// Kernel regression of g_hat on r_hat over all observations, clipped to the
/// probability band. A cross-validated bandwidth is chosen on the regression
/// of A on r_hat, which has the same conditional mean.
NwResult estimate_e(std::span<const double> a, std::span<const double> g_hat,
                    std::span<const double> r_hat, const KernelSpec& kernel);

/// q = E{A (1/e - 1/g) | m_hat} by kernel regression on m_hat; h = q / g.
QhFit estimate_q_h(std::span<const double> a, std::span<const double> g_hat,
                   std::span<const double> e_hat, std::span<const double> m_hat,
                   const KernelSpec& kernel);

/// g -> m -> r -> e -> (q, h).
NuisanceFit fit_all(const Dataset& data, const NuisanceSpec& spec);

}  // namespace escore
