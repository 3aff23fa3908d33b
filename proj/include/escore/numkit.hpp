#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

namespace escore {

/// Probability band used wherever a fitted probability ends up in a
/// denominator or a logit offset.
inline constexpr double kProbFloor = 1e-6;
inline constexpr double kProbCeil = 1.0 - 1e-6;

inline double expit(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double clip_prob(double p) {
  return p < kProbFloor ? kProbFloor : (p > kProbCeil ? kProbCeil : p);
}

struct GlmFit {
  Eigen::VectorXd coefficients;
  bool converged = false;
  int iterations = 0;
  // Largest |sum_i w_i x_ij (y_i - mu_i)| over columns j at the returned
  // coefficients.
  double max_abs_score = 0.0;
  // True when some coefficient hit the separation cap.
  bool capped = false;
};

struct LogisticOptions {
  int max_iterations = 100;
  // Convergence requires max |score| <= score_tolerance_per_row * n.
  double score_tolerance_per_row = 1e-8;
  double coefficient_cap = 50.0;
  int max_halvings = 40;
};

/// Weighted Bernoulli maximum likelihood with a fixed offset, solved by IRLS
/// with step-halving. `y` may be fractional in [0,1]. The design is used as
/// given: add a column of ones for an intercept.
GlmFit fit_logistic(std::span<const double> y, const Eigen::MatrixXd& x,
                    std::span<const double> offset,
                    std::span<const double> weights,
                    const LogisticOptions& options = {});

/// Weighted least squares. Rank-deficient designs get a 1e-10 ridge on the
/// normal equations. Throws std::invalid_argument when rows < columns.
GlmFit fit_linear(std::span<const double> y, const Eigen::MatrixXd& x,
                  std::span<const double> weights);

/// Min-max map of an outcome onto [0,1].
class OutcomeScaler {
 public:
  OutcomeScaler() = default;
  OutcomeScaler(double lo, double hi);

  /// Observed range padded by `pad` of its width on each side. A zero-width
  /// range is centered in a unit-width window.
  static OutcomeScaler from_range(std::span<const double> y, double pad = 0.01);

  double lo() const { return lo_; }
  double hi() const { return hi_; }
  double width() const { return hi_ - lo_; }

  double scale(double y) const { return (y - lo_) / (hi_ - lo_); }
  double unscale(double s) const { return lo_ + s * (hi_ - lo_); }

 private:
  double lo_ = 0.0;
  double hi_ = 1.0;
};

enum class KernelEvaluation {
  Auto,    // exact for small problems, binned otherwise
  Exact,   // direct double sum over training points
  Binned,  // linear binning on a grid of spacing h/8, truncated at 10h
};

struct KernelSpec {
  enum class Selector { Fixed, LeaveOneOutCV, Silverman };

  Selector selector = Selector::LeaveOneOutCV;
  double bandwidth = 0.0;          // used by Selector::Fixed
  std::vector<double> grid;        // LOOCV grid; empty means the default grid
  KernelEvaluation evaluation = KernelEvaluation::Auto;

  static KernelSpec fixed(double h) {
    KernelSpec s;
    s.selector = Selector::Fixed;
    s.bandwidth = h;
    return s;
  }
};

/// Auto switches to binned evaluation above this many kernel pairs.
inline constexpr double kExactPairLimit = 1e5;

/// Weighted standard deviation of the positively weighted points.
double weighted_sd(std::span<const double> x, std::span<const double> weights);

/// 0.9 * min(sd, IQR/1.34) * n^(-1/5) over positively weighted points.
/// Falls back to 1 when the spread is zero.
double silverman_bandwidth(std::span<const double> x,
                           std::span<const double> weights);

/// 20 log-spaced bandwidths over [0.05, 2] * sd(x) * n^(-1/5).
std::vector<double> default_bandwidth_grid(std::span<const double> x,
                                           std::span<const double> weights);

/// Gaussian-kernel Nadaraya-Watson estimate at each point of `x_eval` with a
/// fixed bandwidth. A denominator below 1e-300 yields the weighted mean of
/// `y_train`.
std::vector<double> nw_regress(std::span<const double> x_train,
                               std::span<const double> y_train,
                               std::span<const double> weights, double bandwidth,
                               std::span<const double> x_eval,
                               KernelEvaluation evaluation = KernelEvaluation::Auto);

struct NwResult {
  std::vector<double> values;
  double bandwidth = 0.0;
};

/// Resolves the bandwidth from `spec` (training data only), then evaluates.
NwResult nw_regress(std::span<const double> x_train,
                    std::span<const double> y_train,
                    std::span<const double> weights, const KernelSpec& spec,
                    std::span<const double> x_eval);

/// Weighted leave-one-out squared error of the smoother at bandwidth h.
/// Returns +inf when every leave-one-out denominator is degenerate.
double loocv_risk(std::span<const double> x, std::span<const double> y,
                  std::span<const double> weights, double bandwidth,
                  KernelEvaluation evaluation = KernelEvaluation::Auto);

/// Grid bandwidth with the smallest leave-one-out risk; ties go to the larger
/// bandwidth. Silverman's rule when every grid point is degenerate.
double select_bandwidth(std::span<const double> x, std::span<const double> y,
                        std::span<const double> weights,
                        std::span<const double> grid,
                        KernelEvaluation evaluation = KernelEvaluation::Auto);

double resolve_bandwidth(std::span<const double> x, std::span<const double> y,
                         std::span<const double> weights,
                         const KernelSpec& spec);

}  // namespace escore
