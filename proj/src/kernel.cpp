#include "escore/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <tuple>
#include <stdexcept>

namespace escore {

namespace {

constexpr double kDegenerate = 1e-300;
// exp(-0.5 * 40^2) underflows to zero in double precision.
constexpr double kExactRadius = 40.0;
constexpr double kBinsPerBandwidth = 8.0;
constexpr double kBinnedRadius = 10.0;
constexpr std::size_t kMaxGrid = std::size_t{1} << 20;
// Binned sums below this multiple of the largest training weight come from
// kernel tails, where binning error dominates; those points are summed exactly.
constexpr double kSparseMass = 0.05;

void check_lengths(std::span<const double> x, std::span<const double> y,
                   std::span<const double> w) {
  if (x.size() != y.size() || x.size() != w.size()) {
    throw std::invalid_argument("kernel regression inputs differ in length");
  }
  bool any = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i]) || !std::isfinite(w[i]) || w[i] < 0.0) {
      throw std::invalid_argument("kernel regression inputs must be finite with nonnegative weights");
    }
    any = any || w[i] > 0.0;
  }
  if (!any) {
    throw std::invalid_argument("kernel regression needs a positive weight");
  }
}

struct Point {
  double x;
  double w;
  double wy;
};

// Positively weighted training points sorted by x.
std::vector<Point> sorted_points(std::span<const double> x, std::span<const double> y,
                                 std::span<const double> w) {
  std::vector<Point> pts;
  pts.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (w[i] > 0.0) pts.push_back({x[i], w[i], w[i] * y[i]});
  }
  std::stable_sort(pts.begin(), pts.end(),
                   [](const Point& a, const Point& b) { return a.x < b.x; });
  return pts;
}

double weighted_mean(std::span<const double> y, std::span<const double> w) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    num += w[i] * y[i];
    den += w[i];
  }
  return num / den;
}

double max_weight(const std::vector<Point>& pts) {
  double m = 0.0;
  for (const auto& p : pts) m = std::max(m, p.w);
  return m;
}

std::size_t positive_count(std::span<const double> w) {
  return static_cast<std::size_t>(
      std::count_if(w.begin(), w.end(), [](double v) { return v > 0.0; }));
}

// Kernel sums at `at` over the sorted points, window [at - r, at + r].
std::pair<double, double> exact_sums(const std::vector<Point>& pts, double at, double h,
                                     const Point* skip = nullptr) {
  const double r = kExactRadius * h;
  auto lo = std::lower_bound(pts.begin(), pts.end(), at - r,
                             [](const Point& p, double v) { return p.x < v; });
  double s0 = 0.0;
  double s1 = 0.0;
  for (auto it = lo; it != pts.end() && it->x <= at + r; ++it) {
    if (&*it == skip) continue;
    const double u = (it->x - at) / h;
    const double k = std::exp(-0.5 * u * u);
    s0 += it->w * k;
    s1 += it->wy * k;
  }
  return {s0, s1};
}

// Linear binning of the training mass on a uniform grid, convolved with the
// truncated Gaussian. Smoothed sums are read back by linear interpolation,
// which makes the effective kernel the bilinear interpolant of the Gaussian
// on the grid: nonnegative and symmetric.
class BinnedSmoother {
 public:
  BinnedSmoother(double lo, double hi, double h) : lo_(lo), h_(h) {
    double delta = h / kBinsPerBandwidth;
    std::size_t m = static_cast<std::size_t>(std::floor((hi - lo) / delta)) + 2;
    if (m > kMaxGrid) {
      m = kMaxGrid;
      delta = (hi - lo) / static_cast<double>(m - 2);
    }
    if (!(delta > 0.0)) delta = h;
    delta_ = delta;
    m_ = std::max<std::size_t>(m, 2);
    const auto radius = static_cast<std::size_t>(std::ceil(kBinnedRadius * h / delta_));
    kernel_.resize(std::max<std::size_t>(radius, 1) + 1);
    for (std::size_t d = 0; d < kernel_.size(); ++d) {
      const double u = static_cast<double>(d) * delta_ / h_;
      kernel_[d] = std::exp(-0.5 * u * u);
    }
    c0_.assign(m_, 0.0);
    c1_.assign(m_, 0.0);
  }

  static bool fits(double lo, double hi, double h) {
    return (hi - lo) / (h / kBinsPerBandwidth) + 2.0 <= static_cast<double>(kMaxGrid);
  }

  std::pair<std::size_t, double> locate(double x) const {
    const double u = (x - lo_) / delta_;
    auto l = static_cast<std::ptrdiff_t>(std::floor(u));
    l = std::clamp<std::ptrdiff_t>(l, 0, static_cast<std::ptrdiff_t>(m_) - 2);
    const double f = std::clamp(u - static_cast<double>(l), 0.0, 1.0);
    return {static_cast<std::size_t>(l), f};
  }

  void add(double x, double w, double wy) {
    const auto [l, f] = locate(x);
    c0_[l] += (1.0 - f) * w;
    c0_[l + 1] += f * w;
    c1_[l] += (1.0 - f) * wy;
    c1_[l + 1] += f * wy;
  }

  void smooth() {
    s0_.assign(m_, 0.0);
    s1_.assign(m_, 0.0);
    const auto radius = static_cast<std::ptrdiff_t>(kernel_.size()) - 1;
    const auto m = static_cast<std::ptrdiff_t>(m_);
    for (std::ptrdiff_t l = 0; l < m; ++l) {
      const double a0 = c0_[l];
      if (a0 == 0.0 && c1_[l] == 0.0) continue;
      const double a1 = c1_[l];
      const std::ptrdiff_t from = std::max<std::ptrdiff_t>(0, l - radius);
      const std::ptrdiff_t to = std::min<std::ptrdiff_t>(m - 1, l + radius);
      for (std::ptrdiff_t k = from; k <= to; ++k) {
        const double kv = kernel_[static_cast<std::size_t>(std::abs(k - l))];
        s0_[k] += kv * a0;
        s1_[k] += kv * a1;
      }
    }
  }

  std::pair<double, double> sums(double x) const {
    const auto [l, f] = locate(x);
    return {(1.0 - f) * s0_[l] + f * s0_[l + 1], (1.0 - f) * s1_[l] + f * s1_[l + 1]};
  }

  // Weight a point at x contributes to its own interpolated sum, per unit mass.
  double self_weight(double x) const {
    const auto [l, f] = locate(x);
    (void)l;
    const double k1 = kernel_.size() > 1 ? kernel_[1] : 0.0;
    return (1.0 - f) * (1.0 - f) + f * f + 2.0 * f * (1.0 - f) * k1;
  }

 private:
  double lo_;
  double h_;
  double delta_ = 0.0;
  std::size_t m_ = 0;
  std::vector<double> kernel_;
  std::vector<double> c0_, c1_, s0_, s1_;
};

std::pair<double, double> span_of(const std::vector<Point>& pts, std::span<const double> extra) {
  double lo = pts.front().x;
  double hi = pts.back().x;
  for (double v : extra) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {lo, hi};
}

bool use_binned(KernelEvaluation mode, double pairs, double lo, double hi, double h) {
  switch (mode) {
    case KernelEvaluation::Exact:
      return false;
    case KernelEvaluation::Binned:
      return true;
    case KernelEvaluation::Auto:
      break;
  }
  return pairs > kExactPairLimit && BinnedSmoother::fits(lo, hi, h);
}

void check_bandwidth(double h) {
  if (!(h > 0.0) || !std::isfinite(h)) {
    throw std::invalid_argument("bandwidth must be positive and finite");
  }
}

}  // namespace

double weighted_sd(std::span<const double> x, std::span<const double> weights) {
  double sw = 0.0;
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += weights[i];
    mean += weights[i] * x[i];
  }
  if (!(sw > 0.0)) return 0.0;
  mean /= sw;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean;
    ss += weights[i] * d * d;
  }
  return std::sqrt(ss / sw);
}

double silverman_bandwidth(std::span<const double> x, std::span<const double> weights) {
  std::vector<double> v;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (weights[i] > 0.0) v.push_back(x[i]);
  }
  if (v.empty()) return 1.0;
  std::sort(v.begin(), v.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double f = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] * (1.0 - f) + v[i + 1] * f : v[i];
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  const double sd = weighted_sd(x, weights);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  const double h = 0.9 * spread * std::pow(static_cast<double>(v.size()), -0.2);
  return h > 0.0 ? h : 1.0;
}

std::vector<double> default_bandwidth_grid(std::span<const double> x,
                                           std::span<const double> weights) {
  const double sd = weighted_sd(x, weights);
  const auto n = static_cast<double>(positive_count(weights));
  const double base = sd * std::pow(n, -0.2);
  if (!(base > 0.0)) return {1.0};
  std::vector<double> grid(20);
  for (int k = 0; k < 20; ++k) {
    grid[static_cast<std::size_t>(k)] = base * 0.05 * std::pow(40.0, k / 19.0);
  }
  return grid;
}

std::vector<double> nw_regress(std::span<const double> x_train,
                               std::span<const double> y_train,
                               std::span<const double> weights, double bandwidth,
                               std::span<const double> x_eval,
                               KernelEvaluation evaluation) {
  check_lengths(x_train, y_train, weights);
  check_bandwidth(bandwidth);
  for (double v : x_eval) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite evaluation point");
  }
  const auto pts = sorted_points(x_train, y_train, weights);
  const double fallback = weighted_mean(y_train, weights);
  std::vector<double> out(x_eval.size(), fallback);
  if (x_eval.empty()) return out;

  const auto [lo, hi] = span_of(pts, x_eval);
  const double pairs = static_cast<double>(pts.size()) * static_cast<double>(x_eval.size());
  if (use_binned(evaluation, pairs, lo, hi, bandwidth)) {
    BinnedSmoother smoother(lo, hi, bandwidth);
    for (const auto& p : pts) smoother.add(p.x, p.w, p.wy);
    smoother.smooth();
    const double sparse = kSparseMass * max_weight(pts);
    for (std::size_t e = 0; e < x_eval.size(); ++e) {
      auto [s0, s1] = smoother.sums(x_eval[e]);
      if (!(s0 > sparse)) std::tie(s0, s1) = exact_sums(pts, x_eval[e], bandwidth);
      if (s0 > kDegenerate) out[e] = s1 / s0;
    }
  } else {
    for (std::size_t e = 0; e < x_eval.size(); ++e) {
      const auto [s0, s1] = exact_sums(pts, x_eval[e], bandwidth);
      if (s0 > kDegenerate) out[e] = s1 / s0;
    }
  }
  return out;
}

NwResult nw_regress(std::span<const double> x_train, std::span<const double> y_train,
                    std::span<const double> weights, const KernelSpec& spec,
                    std::span<const double> x_eval) {
  NwResult r;
  r.bandwidth = resolve_bandwidth(x_train, y_train, weights, spec);
  r.values = nw_regress(x_train, y_train, weights, r.bandwidth, x_eval, spec.evaluation);
  return r;
}

double loocv_risk(std::span<const double> x, std::span<const double> y,
                  std::span<const double> weights, double bandwidth,
                  KernelEvaluation evaluation) {
  check_lengths(x, y, weights);
  check_bandwidth(bandwidth);
  const auto pts = sorted_points(x, y, weights);
  if (pts.size() < 2) return std::numeric_limits<double>::infinity();

  double total_w = 0.0;
  double total_wy = 0.0;
  for (const auto& p : pts) {
    total_w += p.w;
    total_wy += p.wy;
  }

  const double lo = pts.front().x;
  const double hi = pts.back().x;
  const double pairs = static_cast<double>(pts.size()) * static_cast<double>(pts.size());
  const bool binned = use_binned(evaluation, pairs, lo, hi, bandwidth);

  std::optional<BinnedSmoother> smoother;
  if (binned) {
    smoother.emplace(lo, hi, bandwidth);
    for (const auto& p : pts) smoother->add(p.x, p.w, p.wy);
    smoother->smooth();
  }

  const double sparse = kSparseMass * max_weight(pts);
  double risk = 0.0;
  double risk_w = 0.0;
  bool any_regular = false;
  for (const auto& p : pts) {
    const double yi = p.wy / p.w;
    double s0 = 0.0;
    double s1 = 0.0;
    bool degenerate = false;
    if (binned) {
      const auto [f0, f1] = smoother->sums(p.x);
      const double self = smoother->self_weight(p.x);
      s0 = f0 - p.w * self;
      s1 = f1 - p.wy * self;
    }
    if (!binned || !(s0 > sparse)) {
      std::tie(s0, s1) = exact_sums(pts, p.x, bandwidth, &p);
      degenerate = !(s0 > kDegenerate);
    }
    double pred = 0.0;
    if (degenerate) {
      const double rest = total_w - p.w;
      if (!(rest > 0.0)) continue;
      pred = (total_wy - p.wy) / rest;
    } else {
      pred = s1 / s0;
      any_regular = true;
    }
    const double r = yi - pred;
    risk += p.w * r * r;
    risk_w += p.w;
  }
  if (!any_regular || !(risk_w > 0.0)) return std::numeric_limits<double>::infinity();
  return risk / risk_w;
}

double select_bandwidth(std::span<const double> x, std::span<const double> y,
                        std::span<const double> weights, std::span<const double> grid,
                        KernelEvaluation evaluation) {
  if (grid.empty()) throw std::invalid_argument("empty bandwidth grid");
  if (grid.size() == 1) {
    check_bandwidth(grid.front());
    return grid.front();
  }
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  double best_h = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (double h : sorted) {
    const double r = loocv_risk(x, y, weights, h, evaluation);
    if (!std::isfinite(r)) continue;
    if (best_h == 0.0 || r <= best + 1e-12 * std::abs(best)) {
      if (best_h == 0.0 || r < best) best = r;
      best_h = h;
    }
  }
  if (best_h == 0.0) return silverman_bandwidth(x, weights);
  return best_h;
}

double resolve_bandwidth(std::span<const double> x, std::span<const double> y,
                         std::span<const double> weights, const KernelSpec& spec) {
  switch (spec.selector) {
    case KernelSpec::Selector::Fixed:
      check_bandwidth(spec.bandwidth);
      return spec.bandwidth;
    case KernelSpec::Selector::Silverman:
      check_lengths(x, y, weights);
      return silverman_bandwidth(x, weights);
    case KernelSpec::Selector::LeaveOneOutCV:
      break;
  }
  check_lengths(x, y, weights);
  if (!spec.grid.empty()) {
    return select_bandwidth(x, y, weights, spec.grid, spec.evaluation);
  }
  const auto grid = default_bandwidth_grid(x, weights);
  return select_bandwidth(x, y, weights, grid, spec.evaluation);
}

}  // namespace escore
