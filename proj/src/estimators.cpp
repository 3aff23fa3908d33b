#include "escore/estimators.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace escore {

namespace {

std::span<const double> span_of(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

void check_fit(const Dataset& data, const NuisanceFit& fit) {
  const auto n = static_cast<std::size_t>(data.size());
  if (fit.g_hat.size() != n || fit.m_hat.size() != n || fit.y_scaled.size() != n) {
    throw std::invalid_argument("nuisance fit does not match the dataset length");
  }
}

double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double variance(std::span<const double> v) {
  const double mu = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return ss / static_cast<double>(v.size());
}

std::vector<double> unscaled_influence(std::vector<double> if_scaled, const OutcomeScaler& s) {
  for (double& v : if_scaled) v *= s.width();
  return if_scaled;
}

struct Tilt {
  GlmFit glm;
  std::vector<double> m_tilde;
  bool dropped_h = false;
};

// Logistic tilting among treated rows: offset logit(m_hat), no intercept,
// covariates given column-wise.
Tilt tilt(const Dataset& data, const NuisanceFit& fit,
          const std::vector<std::vector<double>>& covariates) {
  const auto n = static_cast<std::size_t>(data.size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(covariates.size()));
  for (std::size_t j = 0; j < covariates.size(); ++j) {
    x.col(static_cast<Eigen::Index>(j)) =
        Eigen::Map<const Eigen::VectorXd>(covariates[j].data(), static_cast<Eigen::Index>(n));
  }
  std::vector<double> offset(n);
  for (std::size_t i = 0; i < n; ++i) offset[i] = logit(clip_prob(fit.m_hat[i]));

  Tilt t;
  t.glm = fit_logistic(fit.y_scaled, x, offset, span_of(data.a));
  const Eigen::VectorXd eta =
      Eigen::Map<const Eigen::VectorXd>(offset.data(), static_cast<Eigen::Index>(n)) +
      x * t.glm.coefficients;
  t.m_tilde.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.m_tilde[i] = expit(eta[static_cast<Eigen::Index>(i)]);
  return t;
}

// Absolute cosine between two columns on the treated rows.
double treated_cosine(const Dataset& data, const std::vector<double>& u,
                      const std::vector<double>& v) {
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (data.a[static_cast<Eigen::Index>(i)] != 1.0) continue;
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(vv > 0.0) || !(uu > 0.0)) return 1.0;
  return std::abs(uv) / std::sqrt(uu * vv);
}

void record_tilt(EstimateReport& r, const Tilt& t, std::size_t n) {
  r.converged = t.glm.converged;
  r.diagnostics["tilt_converged"] = t.glm.converged ? 1.0 : 0.0;
  r.diagnostics["tilt_iterations"] = t.glm.iterations;
  r.diagnostics["max_abs_score"] = t.glm.max_abs_score;
  r.diagnostics["score_tolerance"] = 1e-8 * static_cast<double>(n);
}

std::string lower(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '-' || c == '_' || c == ' ') continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

}  // namespace

std::string_view to_string(EstimatorId id) {
  switch (id) {
    case EstimatorId::GComp: return "G-comp";
    case EstimatorId::AIPW: return "AIPW";
    case EstimatorId::TMLE: return "TMLE";
    case EstimatorId::ETMLE: return "e-TMLE";
    case EstimatorId::ETMLEAL: return "e-TMLE-AL";
  }
  return "?";
}

std::optional<EstimatorId> parse_estimator(std::string_view name) {
  const std::string key = lower(name);
  for (EstimatorId id : all_estimators()) {
    if (lower(to_string(id)) == key) return id;
  }
  if (key == "gcomputation") return EstimatorId::GComp;
  return std::nullopt;
}

const std::vector<EstimatorId>& all_estimators() {
  static const std::vector<EstimatorId> ids{EstimatorId::GComp, EstimatorId::AIPW,
                                            EstimatorId::TMLE, EstimatorId::ETMLE,
                                            EstimatorId::ETMLEAL};
  return ids;
}

double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

double normal_cdf(double x) {
  return boost::math::cdf(boost::math::normal_distribution<double>(), x);
}

std::optional<double> EstimateReport::p_value(double null_value) const {
  if (!se) return std::nullopt;
  const double diff = std::abs(theta_hat - null_value);
  if (!(*se > 0.0)) return diff == 0.0 ? 1.0 : 0.0;
  return 2.0 * normal_cdf(-diff / *se);
}

double se_from_influence(std::span<const double> if_values) {
  if (if_values.empty()) return 0.0;
  const double n = static_cast<double>(if_values.size());
  double s1 = 0.0;
  double s2 = 0.0;
  for (double v : if_values) {
    s1 += v;
    s2 += v * v;
  }
  const double m = s1 / n;
  return std::sqrt(std::max(s2 / n - m * m, 0.0)) / std::sqrt(n);
}

void attach_wald(EstimateReport& report, double alpha) {
  if (!report.if_values) throw std::logic_error("Wald interval needs influence values");
  report.alpha = alpha;
  report.se = se_from_influence(*report.if_values);
  const double z = normal_quantile(1.0 - alpha / 2.0);
  report.ci = std::make_pair(report.theta_hat - z * *report.se, report.theta_hat + z * *report.se);
}

EstimateReport gcomp(const Dataset& data, const NuisanceFit& fit) {
  check_fit(data, fit);
  EstimateReport r;
  r.estimator = EstimatorId::GComp;
  r.theta_hat = fit.scaler.unscale(mean(fit.m_hat));
  r.converged = fit.converged();
  return r;
}

EstimateReport aipw(const Dataset& data, const NuisanceFit& fit, double alpha) {
  check_fit(data, fit);
  const std::size_t n = fit.size();
  std::vector<double> term(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = data.a[static_cast<Eigen::Index>(i)];
    term[i] = a / fit.g_hat[i] * (fit.y_scaled[i] - fit.m_hat[i]) + fit.m_hat[i];
  }
  const double theta_s = mean(term);
  for (double& v : term) v -= theta_s;

  EstimateReport r;
  r.estimator = EstimatorId::AIPW;
  r.theta_hat = fit.scaler.unscale(theta_s);
  r.if_values = unscaled_influence(std::move(term), fit.scaler);
  r.converged = fit.converged();
  attach_wald(r, alpha);
  return r;
}

EstimateReport tmle(const Dataset& data, const NuisanceFit& fit, WeightSource source,
                    double alpha) {
  check_fit(data, fit);
  const std::size_t n = fit.size();
  const std::vector<double>& weight = source == WeightSource::GHat ? fit.g_hat : fit.e_hat;
  if (weight.size() != n) throw std::invalid_argument("e_hat missing from nuisance fit");

  std::vector<double> inv(n);
  for (std::size_t i = 0; i < n; ++i) inv[i] = 1.0 / clip_prob(weight[i]);
  const Tilt t = tilt(data, fit, {inv});
  const double theta_s = mean(t.m_tilde);

  EstimateReport r;
  r.estimator = source == WeightSource::GHat ? EstimatorId::TMLE : EstimatorId::ETMLE;
  r.theta_hat = fit.scaler.unscale(theta_s);
  record_tilt(r, t, n);
  r.converged = r.converged && fit.converged();
  r.diagnostics["beta"] = t.glm.coefficients[0];
  r.diagnostics["weight_variance"] = variance(inv);
  r.alpha = alpha;

  if (source == WeightSource::GHat) {
    std::vector<double> ifv(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = data.a[static_cast<Eigen::Index>(i)];
      ifv[i] = a * inv[i] * (fit.y_scaled[i] - t.m_tilde[i]) + t.m_tilde[i] - theta_s;
    }
    r.if_values = unscaled_influence(std::move(ifv), fit.scaler);
    attach_wald(r, alpha);
  }
  return r;
}

EstimateReport etmle_al(const Dataset& data, const NuisanceFit& fit, double alpha) {
  check_fit(data, fit);
  const std::size_t n = fit.size();
  if (fit.e_hat.size() != n || fit.q_hat.size() != n || fit.h_hat.size() != n) {
    throw std::invalid_argument("e_hat, q_hat and h_hat are required for e-TMLE-AL");
  }
  std::vector<double> inv_e(n);
  for (std::size_t i = 0; i < n; ++i) inv_e[i] = 1.0 / clip_prob(fit.e_hat[i]);

  const bool drop_h = treated_cosine(data, inv_e, fit.h_hat) > 1.0 - 1e-10;
  Tilt t = drop_h ? tilt(data, fit, {inv_e}) : tilt(data, fit, {inv_e, fit.h_hat});
  t.dropped_h = drop_h;
  const double theta_s = mean(t.m_tilde);

  EstimateReport r;
  r.estimator = EstimatorId::ETMLEAL;
  r.theta_hat = fit.scaler.unscale(theta_s);
  record_tilt(r, t, n);
  r.converged = r.converged && fit.converged();
  r.diagnostics["beta1"] = t.glm.coefficients[0];
  r.diagnostics["beta2"] = drop_h ? 0.0 : t.glm.coefficients[1];
  r.diagnostics["h_dropped"] = drop_h ? 1.0 : 0.0;
  r.diagnostics["weight_variance"] = variance(inv_e);

  std::vector<double> ifv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = data.a[static_cast<Eigen::Index>(i)];
    ifv[i] = a * (inv_e[i] - fit.q_hat[i] / fit.g_hat[i]) * (fit.y_scaled[i] - t.m_tilde[i]) +
             fit.m_hat[i] - theta_s;
  }
  r.if_values = unscaled_influence(std::move(ifv), fit.scaler);
  attach_wald(r, alpha);
  return r;
}

EstimateReport run_estimator(EstimatorId id, const Dataset& data, const NuisanceFit& fit,
                             double alpha) {
  switch (id) {
    case EstimatorId::GComp: {
      EstimateReport r = gcomp(data, fit);
      r.alpha = alpha;
      return r;
    }
    case EstimatorId::AIPW: return aipw(data, fit, alpha);
    case EstimatorId::TMLE: return tmle(data, fit, WeightSource::GHat, alpha);
    case EstimatorId::ETMLE: return tmle(data, fit, WeightSource::EHat, alpha);
    case EstimatorId::ETMLEAL: return etmle_al(data, fit, alpha);
  }
  throw std::invalid_argument("unknown estimator");
}

ArmFits fit_arms(const Dataset& data, const NuisanceSpec& spec, Target target) {
  data.validate(target == Target::ATE);
  ArmFits fits;
  if (target != Target::MeanY0) {
    fits.treated = fit_all(data, spec);
  }
  if (target != Target::MeanY1) {
    const Dataset flipped = data.relabeled();
    if (flipped.treated_count() == 0) {
      throw std::invalid_argument("no control observations (arm A=0 is empty)");
    }
    fits.control = fit_all(flipped, spec);
  }
  return fits;
}

std::vector<EstimateReport> estimate_with(const Dataset& data, const ArmFits& fits,
                                          const TargetSpec& target,
                                          const std::vector<EstimatorId>& which) {
  if (!(target.alpha > 0.0 && target.alpha <= 0.5)) {
    throw std::invalid_argument("alpha must lie in (0, 0.5]");
  }
  std::vector<EstimateReport> out;
  out.reserve(which.size());
  const Dataset flipped = target.target == Target::MeanY1 ? Dataset{} : data.relabeled();

  for (EstimatorId id : which) {
    switch (target.target) {
      case Target::MeanY1:
        out.push_back(run_estimator(id, data, *fits.treated, target.alpha));
        break;
      case Target::MeanY0:
        out.push_back(run_estimator(id, flipped, *fits.control, target.alpha));
        break;
      case Target::ATE: {
        const EstimateReport r1 = run_estimator(id, data, *fits.treated, target.alpha);
        const EstimateReport r0 = run_estimator(id, flipped, *fits.control, target.alpha);
        EstimateReport r;
        r.estimator = id;
        r.alpha = target.alpha;
        r.theta_hat = r1.theta_hat - r0.theta_hat;
        r.converged = r1.converged && r0.converged;
        for (const auto& [k, v] : r1.diagnostics) r.diagnostics["treated." + k] = v;
        for (const auto& [k, v] : r0.diagnostics) r.diagnostics["control." + k] = v;
        if (r1.if_values && r0.if_values) {
          std::vector<double> diff(r1.if_values->size());
          for (std::size_t i = 0; i < diff.size(); ++i) {
            diff[i] = (*r1.if_values)[i] - (*r0.if_values)[i];
          }
          r.if_values = std::move(diff);
          attach_wald(r, target.alpha);
        }
        out.push_back(std::move(r));
        break;
      }
    }
  }
  return out;
}

std::vector<EstimateReport> estimate(const Dataset& data, const NuisanceSpec& spec,
                                     const TargetSpec& target,
                                     const std::vector<EstimatorId>& which) {
  const ArmFits fits = fit_arms(data, spec, target.target);
  return estimate_with(data, fits, target, which);
}

}  // namespace escore
