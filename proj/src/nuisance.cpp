#include "escore/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace escore {

namespace {

// Scaled-outcome residual spread treated as exactly zero.
constexpr double kFlatResidual = 1e-9;

// Leave-one-out risk of the weighted mean, i.e. of an infinite bandwidth.
double constant_loo_risk(std::span<const double> y, std::span<const double> w) {
  double sw = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sw += w[i];
    swy += w[i] * y[i];
  }
  double risk = 0.0, total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(w[i] > 0.0) || !(sw - w[i] > 0.0)) continue;
    const double d = y[i] - (swy - w[i] * y[i]) / (sw - w[i]);
    risk += w[i] * d * d;
    total += w[i];
  }
  return total > 0.0 ? risk / total : std::numeric_limits<double>::infinity();
}

// Bandwidth for regressing y on x. Under cross-validation the constant fit
// competes with the grid, so a regressor carrying no signal is smoothed out
// entirely instead of at the widest grid point; infinity means constant.
double choose_bandwidth(std::span<const double> x, std::span<const double> y,
                        std::span<const double> w, const KernelSpec& kernel) {
  const double h = resolve_bandwidth(x, y, w, kernel);
  if (kernel.selector != KernelSpec::Selector::LeaveOneOutCV) return h;
  if (constant_loo_risk(y, w) <= loocv_risk(x, y, w, h, kernel.evaluation)) {
    return std::numeric_limits<double>::infinity();
  }
  return h;
}

// Kernel regression at the chosen bandwidth, evaluated at x itself.
NwResult smooth(std::span<const double> x, std::span<const double> y, std::span<const double> w,
                double h, KernelEvaluation evaluation) {
  NwResult out;
  out.bandwidth = h;
  if (std::isinf(h)) {
    double sw = 0.0, swy = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      sw += w[i];
      swy += w[i] * y[i];
    }
    out.values.assign(x.size(), swy / sw);
  } else {
    out.values = nw_regress(x, y, w, h, x, evaluation);
  }
  return out;
}

std::span<const double> span_of(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

Eigen::MatrixXd design(const Dataset& data, const std::vector<int>& columns,
                       std::span<const double> extra = {}) {
  const Eigen::Index n = data.size();
  const auto p = static_cast<Eigen::Index>(columns.size() + 1 + (extra.empty() ? 0 : 1));
  Eigen::MatrixXd x(n, p);
  x.col(0).setOnes();
  for (std::size_t j = 0; j < columns.size(); ++j) {
    x.col(static_cast<Eigen::Index>(j) + 1) = data.w.col(columns[j]);
  }
  if (!extra.empty()) {
    x.col(p - 1) = Eigen::Map<const Eigen::VectorXd>(extra.data(), n);
  }
  return x;
}

// Drops design columns that are constant on the weighted rows (after the
// intercept), so a degenerate covariate does not make the fit singular.
std::vector<Eigen::Index> informative_columns(const Eigen::MatrixXd& x,
                                              std::span<const double> w) {
  std::vector<Eigen::Index> keep{0};
  for (Eigen::Index j = 1; j < x.cols(); ++j) {
    double first = 0.0;
    bool seen = false;
    bool varies = false;
    for (Eigen::Index i = 0; i < x.rows() && !varies; ++i) {
      if (w[static_cast<std::size_t>(i)] <= 0.0) continue;
      if (!seen) {
        first = x(i, j);
        seen = true;
      } else {
        varies = x(i, j) != first;
      }
    }
    if (varies) keep.push_back(j);
  }
  return keep;
}

Eigen::MatrixXd select_columns(const Eigen::MatrixXd& x, const std::vector<Eigen::Index>& keep) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = x.col(keep[k]);
  return out;
}

Eigen::VectorXd expand(const Eigen::VectorXd& beta, const std::vector<Eigen::Index>& keep,
                       Eigen::Index p) {
  Eigen::VectorXd full = Eigen::VectorXd::Zero(p);
  for (std::size_t k = 0; k < keep.size(); ++k) full[keep[k]] = beta[static_cast<Eigen::Index>(k)];
  return full;
}

double linear_predictor(const Eigen::VectorXd& beta, const std::vector<int>& columns,
                        std::span<const double> row) {
  double eta = beta[0];
  for (std::size_t j = 0; j < columns.size(); ++j) {
    eta += beta[static_cast<Eigen::Index>(j) + 1] * row[static_cast<std::size_t>(columns[j])];
  }
  return eta;
}

}  // namespace

void Dataset::validate(bool require_both_arms) const {
  const Eigen::Index n = y.size();
  if (n < 2) throw std::invalid_argument("dataset needs at least 2 observations");
  if (a.size() != n || w.rows() != n) {
    throw std::invalid_argument("dataset columns differ in length");
  }
  if (!w.allFinite() || !y.allFinite()) {
    throw std::invalid_argument("dataset contains non-finite values");
  }
  std::size_t treated = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a[i] != 0.0 && a[i] != 1.0) {
      throw std::invalid_argument("treatment must be 0/1 (row " + std::to_string(i) + ")");
    }
    treated += a[i] == 1.0 ? 1 : 0;
  }
  if (treated == 0) throw std::invalid_argument("no treated observations (arm A=1 is empty)");
  if (require_both_arms && treated == static_cast<std::size_t>(n)) {
    throw std::invalid_argument("no control observations (arm A=0 is empty)");
  }
}

Dataset Dataset::relabeled() const {
  Dataset out = *this;
  out.a = (1.0 - a.array()).matrix();
  return out;
}

std::size_t Dataset::treated_count() const {
  return static_cast<std::size_t>((a.array() == 1.0).count());
}

NuisanceSpec NuisanceSpec::all_columns(Eigen::Index p) {
  NuisanceSpec s;
  for (int j = 0; j < static_cast<int>(p); ++j) {
    s.propensity_covariates.push_back(j);
    s.outcome_covariates.push_back(j);
  }
  return s;
}

void NuisanceSpec::validate(Eigen::Index p) const {
  auto check = [p](const std::vector<int>& idx, const char* which) {
    for (int j : idx) {
      if (j < 0 || j >= p) {
        throw std::invalid_argument(std::string(which) + " covariate index " +
                                    std::to_string(j) + " out of range");
      }
    }
  };
  check(propensity_covariates, "propensity");
  check(outcome_covariates, "outcome");
}

double PropensityModel::predict(std::span<const double> row) const {
  return clip_prob(expit(linear_predictor(coefficients, columns, row)));
}

double OutcomeModel::predict(std::span<const double> row, double ghat) const {
  if (constant) return constant_value;
  double eta = linear_predictor(coefficients, columns, row);
  if (uses_ghat) eta += coefficients[coefficients.size() - 1] * ghat;
  return clip_prob(eta);
}

PropensityFit fit_propensity(const Dataset& data, const NuisanceSpec& spec) {
  data.validate();
  spec.validate(data.covariates());
  const Eigen::Index n = data.size();
  const Eigen::MatrixXd x = design(data, spec.propensity_covariates);
  const std::vector<double> ones(static_cast<std::size_t>(n), 1.0);
  const std::vector<double> zeros(static_cast<std::size_t>(n), 0.0);

  const auto keep = informative_columns(x, ones);
  const GlmFit glm = fit_logistic(span_of(data.a), select_columns(x, keep), zeros, ones);

  PropensityFit out;
  out.model.columns = spec.propensity_covariates;
  out.model.coefficients = expand(glm.coefficients, keep, x.cols());
  out.model.converged = glm.converged;
  out.model.iterations = glm.iterations;
  const Eigen::VectorXd eta = x * out.model.coefficients;
  out.g_hat.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    out.g_hat[static_cast<std::size_t>(i)] = clip_prob(expit(eta[i]));
  }
  return out;
}

OutcomeFit fit_outcome(const Dataset& data, const NuisanceSpec& spec,
                       std::span<const double> g_hat) {
  data.validate();
  spec.validate(data.covariates());
  const Eigen::Index n = data.size();
  if (static_cast<Eigen::Index>(g_hat.size()) != n) {
    throw std::invalid_argument("g_hat length differs from dataset");
  }

  OutcomeFit out;
  out.scaler = OutcomeScaler::from_range(span_of(data.y));
  out.model.columns = spec.outcome_covariates;
  out.model.uses_ghat = spec.include_ghat_in_outcome;
  out.m_hat.assign(static_cast<std::size_t>(n), 0.5);

  const double y_lo = data.y.minCoeff();
  if (data.y.maxCoeff() == y_lo) {
    out.model.constant = true;
    out.model.constant_value = clip_prob(out.scaler.scale(y_lo));
    out.model.coefficients = Eigen::VectorXd::Zero(1);
    std::fill(out.m_hat.begin(), out.m_hat.end(), out.model.constant_value);
    return out;
  }

  std::vector<double> ys(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) ys[static_cast<std::size_t>(i)] = out.scaler.scale(data.y[i]);

  const Eigen::MatrixXd x =
      design(data, spec.outcome_covariates, spec.include_ghat_in_outcome ? g_hat : std::span<const double>{});
  const std::span<const double> treated = span_of(data.a);
  auto keep = informative_columns(x, treated);
  // Fewer treated rows than columns: keep the intercept only.
  if (static_cast<std::size_t>(keep.size()) > data.treated_count()) keep = {0};
  const GlmFit glm = fit_linear(ys, select_columns(x, keep), treated);
  out.model.coefficients = expand(glm.coefficients, keep, x.cols());

  const Eigen::VectorXd eta = x * out.model.coefficients;
  for (Eigen::Index i = 0; i < n; ++i) out.m_hat[static_cast<std::size_t>(i)] = clip_prob(eta[i]);
  return out;
}

NwResult estimate_r(std::span<const double> a, std::span<const double> y_scaled,
                    std::span<const double> g_hat, std::span<const double> m_hat,
                    const KernelSpec& kernel) {
  const std::size_t n = a.size();
  if (y_scaled.size() != n || g_hat.size() != n || m_hat.size() != n) {
    throw std::invalid_argument("estimate_r inputs differ in length");
  }
  std::vector<double> resid(n);
  for (std::size_t i = 0; i < n; ++i) resid[i] = y_scaled[i] - m_hat[i];
  return smooth(g_hat, resid, a, choose_bandwidth(g_hat, resid, a, kernel), kernel.evaluation);
}

NwResult estimate_e(std::span<const double> a, std::span<const double> g_hat,
                    std::span<const double> r_hat, const KernelSpec& kernel) {
  if (g_hat.size() != r_hat.size() || a.size() != r_hat.size()) throw std::invalid_argument("estimate_e inputs differ in length");
  const std::vector<double> ones(g_hat.size(), 1.0);
  // Residuals that only differ by rounding (an outcome model that fits
  // exactly) carry no information; a data-scaled bandwidth grid would
  // otherwise shrink to the noise and hand g_hat straight back.
  if (weighted_sd(r_hat, ones) <= kFlatResidual) {
    NwResult flat = smooth(r_hat, g_hat, ones, std::numeric_limits<double>::infinity(), kernel.evaluation);
    for (double& v : flat.values) v = clip_prob(v);
    return flat;
  }
  // r_hat is close to an injective function of g_hat, so cross-validating
  // g_hat on r_hat always rewards the smallest bandwidth and returns g_hat.
  // E(A | r) is the same target, and its noise keeps the selector honest.
  NwResult out = smooth(r_hat, g_hat, ones, choose_bandwidth(r_hat, a, ones, kernel), kernel.evaluation);
  for (double& v : out.values) v = clip_prob(v);
  return out;
}

QhFit estimate_q_h(std::span<const double> a, std::span<const double> g_hat,
                   std::span<const double> e_hat, std::span<const double> m_hat,
                   const KernelSpec& kernel) {
  const std::size_t n = a.size();
  if (g_hat.size() != n || e_hat.size() != n || m_hat.size() != n) {
    throw std::invalid_argument("estimate_q_h inputs differ in length");
  }
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = a[i] * (1.0 / e_hat[i] - 1.0 / g_hat[i]);
  const std::vector<double> ones(n, 1.0);
  NwResult q = smooth(m_hat, t, ones, choose_bandwidth(m_hat, t, ones, kernel), kernel.evaluation);

  QhFit out;
  out.bandwidth = q.bandwidth;
  out.q_hat = std::move(q.values);
  out.h_hat.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.h_hat[i] = out.q_hat[i] / g_hat[i];
  return out;
}

NuisanceFit fit_all(const Dataset& data, const NuisanceSpec& spec) {
  data.validate();
  spec.validate(data.covariates());

  NuisanceFit fit;
  PropensityFit g = fit_propensity(data, spec);
  OutcomeFit m = fit_outcome(data, spec, g.g_hat);
  fit.g_hat = std::move(g.g_hat);
  fit.propensity = std::move(g.model);
  fit.m_hat = std::move(m.m_hat);
  fit.outcome = std::move(m.model);
  fit.scaler = m.scaler;

  const std::size_t n = fit.g_hat.size();
  fit.y_scaled.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    fit.y_scaled[i] = fit.scaler.scale(data.y[static_cast<Eigen::Index>(i)]);
  }
  const std::span<const double> a = span_of(data.a);

  NwResult r = estimate_r(a, fit.y_scaled, fit.g_hat, fit.m_hat, spec.kernel);
  fit.r_hat = std::move(r.values);
  fit.bandwidth_r = r.bandwidth;

  NwResult e = estimate_e(a, fit.g_hat, fit.r_hat, spec.kernel);
  fit.e_hat = std::move(e.values);
  fit.bandwidth_e = e.bandwidth;

  QhFit qh = estimate_q_h(a, fit.g_hat, fit.e_hat, fit.m_hat, spec.kernel);
  fit.q_hat = std::move(qh.q_hat);
  fit.h_hat = std::move(qh.h_hat);
  fit.bandwidth_q = qh.bandwidth;
  return fit;
}

}  // namespace escore
