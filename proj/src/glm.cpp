#include "escore/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace escore {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::invalid_argument(std::string(what) + " contains a non-finite value");
    }
  }
}

Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

double softplus(double eta) {
  return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
}

double bernoulli_loglik(const Eigen::VectorXd& y, const Eigen::VectorXd& eta,
                        const Eigen::VectorXd& w) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (w[i] > 0.0) {
      ll += w[i] * (y[i] * eta[i] - softplus(eta[i]));
    }
  }
  return ll;
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    Eigen::VectorXd x = ldlt.solve(b);
    if (x.allFinite() && (a * x - b).norm() <= 1e-6 * (b.norm() + 1e-300)) {
      return x;
    }
  }
  Eigen::MatrixXd jittered = a;
  const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1.0);
  jittered.diagonal().array() += 1e-10 * scale;
  return jittered.ldlt().solve(b);
}

void validate_design(std::span<const double> y, const Eigen::MatrixXd& x,
                     std::span<const double> weights) {
  const auto n = static_cast<Eigen::Index>(y.size());
  if (x.rows() != n || static_cast<Eigen::Index>(weights.size()) != n) {
    throw std::invalid_argument("design, response and weights differ in length");
  }
  if (x.cols() == 0) {
    throw std::invalid_argument("design matrix has no columns");
  }
  require_finite(y, "response");
  require_finite(weights, "weights");
  if (!x.allFinite()) {
    throw std::invalid_argument("design matrix contains a non-finite value");
  }
  bool any_positive = false;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("negative weight");
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) {
    throw std::invalid_argument("no positive weights");
  }
}

}  // namespace

GlmFit fit_logistic(std::span<const double> y_in, const Eigen::MatrixXd& x,
                    std::span<const double> offset_in,
                    std::span<const double> weights_in,
                    const LogisticOptions& options) {
  validate_design(y_in, x, weights_in);
  if (offset_in.size() != y_in.size()) {
    throw std::invalid_argument("offset length differs from response");
  }
  require_finite(offset_in, "offset");
  for (double v : y_in) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("logistic response outside [0,1]");
  }

  const Eigen::VectorXd y = as_vector(y_in);
  const Eigen::VectorXd offset = as_vector(offset_in);
  const Eigen::VectorXd w = as_vector(weights_in);
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();

  for (Eigen::Index j = 0; j < p; ++j) {
    bool nonzero = false;
    for (Eigen::Index i = 0; i < n && !nonzero; ++i) {
      nonzero = w[i] > 0.0 && x(i, j) != 0.0;
    }
    if (!nonzero) {
      throw std::invalid_argument("design column " + std::to_string(j) +
                                  " is zero on every weighted row");
    }
  }

  const double tolerance = options.score_tolerance_per_row * static_cast<double>(n);

  GlmFit fit;
  fit.coefficients = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd eta = offset;
  double loglik = bernoulli_loglik(y, eta, w);

  for (;;) {
    Eigen::VectorXd mu(n);
    Eigen::VectorXd var(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      var[i] = w[i] * mu[i] * (1.0 - mu[i]);
    }
    const Eigen::VectorXd score = x.transpose() * (w.array() * (y - mu).array()).matrix();
    fit.max_abs_score = score.cwiseAbs().maxCoeff();
    if (fit.max_abs_score <= tolerance) {
      fit.converged = true;
      break;
    }
    if (fit.iterations >= options.max_iterations) {
      break;
    }

    const Eigen::MatrixXd info = x.transpose() * var.asDiagonal() * x;
    const Eigen::VectorXd step = solve_spd(info, score);
    if (!step.allFinite()) {
      break;
    }

    // Step-halving on the log-likelihood.
    double t = 1.0;
    bool accepted = false;
    Eigen::VectorXd candidate;
    Eigen::VectorXd candidate_eta;
    for (int h = 0; h <= options.max_halvings; ++h, t *= 0.5) {
      candidate = fit.coefficients + t * step;
      candidate_eta = offset + x * candidate;
      const double ll = bernoulli_loglik(y, candidate_eta, w);
      if (ll >= loglik - 1e-12 * (1.0 + std::abs(loglik))) {
        loglik = ll;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      break;
    }
    ++fit.iterations;

    if (candidate.cwiseAbs().maxCoeff() > options.coefficient_cap) {
      fit.coefficients = candidate.cwiseMax(-options.coefficient_cap)
                             .cwiseMin(options.coefficient_cap);
      fit.capped = true;
      eta = offset + x * fit.coefficients;
      Eigen::VectorXd resid(n);
      for (Eigen::Index i = 0; i < n; ++i) resid[i] = w[i] * (y[i] - expit(eta[i]));
      fit.max_abs_score = (x.transpose() * resid).cwiseAbs().maxCoeff();
      fit.converged = false;
      return fit;
    }
    fit.coefficients = candidate;
    eta = candidate_eta;
  }
  return fit;
}

GlmFit fit_linear(std::span<const double> y_in, const Eigen::MatrixXd& x,
                  std::span<const double> weights_in) {
  validate_design(y_in, x, weights_in);
  const Eigen::VectorXd y = as_vector(y_in);
  const Eigen::VectorXd w = as_vector(weights_in);
  const Eigen::Index p = x.cols();

  const auto used = std::count_if(weights_in.begin(), weights_in.end(),
                                  [](double v) { return v > 0.0; });
  if (used < p) {
    throw std::invalid_argument("underdetermined least squares: " + std::to_string(used) +
                                " weighted rows for " + std::to_string(p) + " columns");
  }

  const Eigen::VectorXd sw = w.cwiseSqrt();
  const Eigen::MatrixXd xs = sw.asDiagonal() * x;
  const Eigen::VectorXd ys = sw.cwiseProduct(y);

  GlmFit fit;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xs);
  if (qr.rank() == p) {
    fit.coefficients = qr.solve(ys);
  } else {
    Eigen::MatrixXd normal = xs.transpose() * xs;
    normal.diagonal().array() += 1e-10;
    fit.coefficients = normal.ldlt().solve(xs.transpose() * ys);
  }
  const Eigen::VectorXd resid = y - x * fit.coefficients;
  fit.max_abs_score = (x.transpose() * w.cwiseProduct(resid)).cwiseAbs().maxCoeff();
  fit.converged = fit.coefficients.allFinite();
  fit.iterations = 1;
  return fit;
}

OutcomeScaler::OutcomeScaler(double lo, double hi) : lo_(lo), hi_(hi) {
  if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw std::invalid_argument("outcome scaler needs finite lo < hi");
  }
}

OutcomeScaler OutcomeScaler::from_range(std::span<const double> y, double pad) {
  if (y.empty()) throw std::invalid_argument("empty outcome");
  require_finite(y, "outcome");
  const auto [mn, mx] = std::minmax_element(y.begin(), y.end());
  const double width = *mx - *mn;
  if (width <= 0.0) {
    return {*mn - 0.5, *mn + 0.5};
  }
  return {*mn - pad * width, *mx + pad * width};
}

}  // namespace escore
