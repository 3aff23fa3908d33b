#pragma once

#include "escore/nuisance.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace escore {

enum class EstimatorId { GComp, AIPW, TMLE, ETMLE, ETMLEAL };

std::string_view to_string(EstimatorId id);
/// Accepts the display names ("e-TMLE-AL") and the enum spellings ("ETMLEAL"),
/// case-insensitively.
std::optional<EstimatorId> parse_estimator(std::string_view name);
const std::vector<EstimatorId>& all_estimators();

enum class Target { MeanY1, MeanY0, ATE };

struct TargetSpec {
  Target target = Target::ATE;
  double alpha = 0.05;
};

struct EstimateReport {
  EstimatorId estimator = EstimatorId::GComp;
  double theta_hat = 0.0;
  std::optional<double> se;
  std::optional<std::pair<double, double>> ci;
  double alpha = 0.05;
  std::optional<std::vector<double>> if_values;
  std::map<std::string, double> diagnostics;
  bool converged = true;

  /// Two-sided normal p-value for H0: theta = null_value, when se is present.
  std::optional<double> p_value(double null_value = 0.0) const;
};

/// Standard normal quantile.
double normal_quantile(double p);
double normal_cdf(double x);

/// sqrt(mean(if^2) - mean(if)^2) / sqrt(n).
double se_from_influence(std::span<const double> if_values);

/// Fills se and the Wald interval from if_values.
void attach_wald(EstimateReport& report, double alpha);

enum class WeightSource { GHat, EHat };

EstimateReport gcomp(const Dataset& data, const NuisanceFit& fit);
EstimateReport aipw(const Dataset& data, const NuisanceFit& fit, double alpha = 0.05);
/// One-parameter logistic tilting along 1/g (TMLE) or 1/e (e-TMLE).
EstimateReport tmle(const Dataset& data, const NuisanceFit& fit, WeightSource source,
                    double alpha = 0.05);
/// Two-parameter tilting along (1/e, h) with the Wald interval built from
/// A (1/e - q/g)(Y - m_tilde) + m_hat - theta.
EstimateReport etmle_al(const Dataset& data, const NuisanceFit& fit, double alpha = 0.05);

EstimateReport run_estimator(EstimatorId id, const Dataset& data, const NuisanceFit& fit,
                             double alpha = 0.05);

/// Full pipeline for the requested target. E(Y0) refits every nuisance on the
/// relabeled data; the ATE differences the two arms' reports, influence values
/// included. Reports come back in the order of `which`.
std::vector<EstimateReport> estimate(const Dataset& data, const NuisanceSpec& spec,
                                     const TargetSpec& target,
                                     const std::vector<EstimatorId>& which);

/// Both arms' fits, for callers that want the nuisances as well.
struct ArmFits {
  std::optional<NuisanceFit> treated;
  std::optional<NuisanceFit> control;  // fit on the relabeled data
};

ArmFits fit_arms(const Dataset& data, const NuisanceSpec& spec, Target target);

std::vector<EstimateReport> estimate_with(const Dataset& data, const ArmFits& fits,
                                          const TargetSpec& target,
                                          const std::vector<EstimatorId>& which);

}  // namespace escore
