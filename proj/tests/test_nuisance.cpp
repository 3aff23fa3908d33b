#include "escore/nuisance.hpp"
#include "escore/simlab.hpp"
#include "reference.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

using namespace escore;
using Catch::Matchers::WithinAbs;

namespace {

NuisanceSpec spec_for(Eigen::Index p) { return NuisanceSpec::all_columns(p); }

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// Group means of f over exact-equality groups of c, restricted to weighted rows.
std::map<double, double> group_means(const std::vector<double>& c, const std::vector<double>& f,
                                     const std::vector<double>& w) {
  std::map<double, std::pair<double, double>> acc;
  for (std::size_t i = 0; i < c.size(); ++i) {
    acc[c[i]].first += w[i] * f[i];
    acc[c[i]].second += w[i];
  }
  std::map<double, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / v.second;
  return out;
}

Dataset randomized(std::size_t n, std::uint64_t seed, int p = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::bernoulli_distribution coin(0.5);
  Dataset d;
  d.w.resize(static_cast<Eigen::Index>(n), p);
  d.a.resize(static_cast<Eigen::Index>(n));
  d.y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < d.w.rows(); ++i) {
    for (int j = 0; j < p; ++j) d.w(i, j) = z(rng);
    d.a[i] = coin(rng) ? 1.0 : 0.0;
    d.y[i] = d.a[i] + d.w(i, 0) + z(rng);
  }
  return d;
}

}  // namespace

TEST_CASE("dataset validation") {
  Dataset d = randomized(10, 1);
  CHECK_NOTHROW(d.validate(true));
  Dataset bad = d;
  bad.a[0] = 0.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  Dataset none = d;
  none.a.setZero();
  CHECK_THROWS_AS(none.validate(), std::invalid_argument);
  Dataset all = d;
  all.a.setOnes();
  CHECK_NOTHROW(all.validate());
  CHECK_THROWS_AS(all.validate(true), std::invalid_argument);
  Dataset inf = d;
  inf.y[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(inf.validate(), std::invalid_argument);
  NuisanceSpec s = spec_for(3);
  s.outcome_covariates.push_back(7);
  CHECK_THROWS_AS(fit_all(d, s), std::invalid_argument);
}

TEST_CASE("propensity: no confounding gives nearly constant scores") {
  const Dataset d = randomized(4000, 2);
  const auto fit = fit_propensity(d, spec_for(3));
  const double pa = d.a.mean();
  double mad = 0.0;
  for (double g : fit.g_hat) mad += std::abs(g - pa);
  mad /= static_cast<double>(fit.g_hat.size());
  CHECK(fit.model.converged);
  CHECK(mad < 0.03);
}

TEST_CASE("propensity: perfect predictor is clipped") {
  Dataset d = randomized(40, 3, 1);
  for (Eigen::Index i = 0; i < d.w.rows(); ++i) d.w(i, 0) = d.a[i];
  const auto fit = fit_propensity(d, spec_for(1));
  for (std::size_t i = 0; i < fit.g_hat.size(); ++i) {
    CHECK(fit.g_hat[i] == (d.a[static_cast<Eigen::Index>(i)] == 1.0 ? kProbCeil : kProbFloor));
  }
}

TEST_CASE("propensity: consistent logistic fit on the simulation design") {
  std::mt19937_64 rng(4);
  const Dataset d = sim::generate(100000, 1.0, rng);
  NuisanceSpec s = sim::ScenarioSpec::from_id('A').nuisance_spec();
  const auto fit = fit_propensity(d, s);
  REQUIRE(fit.model.converged);
  const auto& b = fit.model.coefficients;  // intercept, then W1..W15
  CHECK(std::abs(b[0]) < 0.05);
  for (int j = 1; j <= 10; ++j) CHECK_THAT(b[j], WithinAbs(1.0, 0.05));
  for (int j = 11; j <= 15; ++j) CHECK_THAT(b[j], WithinAbs(0.0, 0.05));
  // predict_g agrees with the fitted values.
  std::vector<double> row(d.w.cols());
  for (int j = 0; j < d.w.cols(); ++j) row[static_cast<std::size_t>(j)] = d.w(17, j);
  CHECK_THAT(fit.model.predict(row), WithinAbs(fit.g_hat[17], 1e-15));
}

TEST_CASE("outcome: constant outcome") {
  Dataset d = randomized(30, 5);
  d.y.setConstant(3.0);
  const auto g = fit_propensity(d, spec_for(3));
  const auto m = fit_outcome(d, spec_for(3), g.g_hat);
  for (double v : m.m_hat) CHECK(v == m.scaler.scale(3.0));
  CHECK(m.scaler.scale(3.0) == 0.5);
}

TEST_CASE("outcome: noiseless linear outcome is reproduced among treated") {
  Dataset d = randomized(200, 6);
  for (Eigen::Index i = 0; i < d.w.rows(); ++i) d.y[i] = 2.0 + d.w(i, 0) - 3.0 * d.w(i, 2);
  const auto g = fit_propensity(d, spec_for(3));
  const auto m = fit_outcome(d, spec_for(3), g.g_hat);
  for (Eigen::Index i = 0; i < d.w.rows(); ++i) {
    if (d.a[i] == 1.0) CHECK_THAT(m.scaler.unscale(m.m_hat[static_cast<std::size_t>(i)]), WithinAbs(d.y[i], 1e-8));
  }
}

TEST_CASE("outcome: consistent linear fit on the simulation design") {
  std::mt19937_64 rng(7);
  const Dataset d = sim::generate(100000, 1.0, rng);
  const NuisanceSpec s = sim::ScenarioSpec::from_id('B').nuisance_spec();
  const auto g = fit_propensity(d, s);
  const auto m = fit_outcome(d, s, g.g_hat);
  const auto& b = m.model.coefficients;  // intercept, W1..W15, g_hat
  const double width = m.scaler.width();
  double gbar = 0.0;
  for (double v : g.g_hat) gbar += v;
  gbar /= static_cast<double>(g.g_hat.size());
  // E[Y | A=1, W] = 1 + W6 + ... + W15 on the original scale.
  CHECK_THAT(m.scaler.lo() + width * (b[0] + b[16] * gbar), WithinAbs(1.0, 0.05));
  for (int j = 1; j <= 5; ++j) CHECK_THAT(width * b[j], WithinAbs(0.0, 0.05));
  for (int j = 6; j <= 15; ++j) CHECK_THAT(width * b[j], WithinAbs(1.0, 0.05));
}

TEST_CASE("r_hat examples") {
  std::vector<double> a{1, 1, 0, 1, 0, 1}, g{0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> m{0.1, 0.5, 0.2, 0.9, 0.3, 0.4};
  const auto zero = estimate_r(a, m, g, m, {});
  for (double v : zero.values) CHECK_THAT(v, WithinAbs(0.0, 1e-8));

  auto y = m;
  for (double& v : y) v += 0.125;
  const auto c = estimate_r(a, y, g, m, {});
  for (double v : c.values) CHECK_THAT(v, WithinAbs(0.125, 1e-12));

  // Two propensity levels with treated residual means 0.3 and -0.1.
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z;
  const std::size_t n = 400;
  std::vector<double> aa(n), gg(n), ys(n), mm(n, 0.5), res(n);
  for (std::size_t i = 0; i < n; ++i) {
    gg[i] = i % 2 ? 0.8 : 0.2;
    aa[i] = i % 3 ? 1.0 : 0.0;
    res[i] = (gg[i] == 0.2 ? 0.3 : -0.1) + 0.05 * z(rng);
    ys[i] = 0.5 + res[i];
  }
  const auto expect = group_means(gg, res, aa);
  const auto r = estimate_r(aa, ys, gg, mm, KernelSpec::fixed(1e-3));
  for (std::size_t i = 0; i < n; ++i) CHECK_THAT(r.values[i], WithinAbs(expect.at(gg[i]), 1e-3));
  CHECK_THAT(expect.at(0.2), WithinAbs(0.3, 0.02));
  CHECK_THAT(expect.at(0.8), WithinAbs(-0.1, 0.02));
}

TEST_CASE("e_hat examples") {
  std::vector<double> g{0.1, 0.4, 0.35, 0.9, 0.6};
  std::vector<double> flat(5, 0.02);
  const auto e = estimate_e(std::vector<double>{1, 0, 0, 1, 1}, g, flat, {});
  for (double v : e.values) CHECK_THAT(v, WithinAbs(ref::mean(g), 1e-12));

  // Residual strictly monotone in g_hat: the e-score tracks g_hat.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> gg(2000), a(2000, 1.0), ys(2000), mm(2000, 0.3);
  for (std::size_t i = 0; i < gg.size(); ++i) {
    gg[i] = u(rng);
    ys[i] = 0.3 + 0.5 * gg[i] * gg[i];
  }
  const auto r = estimate_r(a, ys, gg, mm, KernelSpec::fixed(0.005));
  const auto e2 = estimate_e(a, gg, r.values, KernelSpec::fixed(1e-4));
  for (std::size_t i = 0; i < gg.size(); ++i) CHECK_THAT(e2.values[i], WithinAbs(gg[i], 0.02));
}

TEST_CASE("e_hat: instrument-only propensity collapses to P(A=1)") {
  // g depends on W_I only, the outcome residual on an independent W_P only.
  std::mt19937_64 rng(10);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u;
  const Eigen::Index n = 20000;
  Dataset d;
  d.w.resize(n, 2);
  d.a.resize(n);
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.w(i, 0) = z(rng);  // W_I
    d.w(i, 1) = z(rng);  // W_P, left out of the outcome model
    d.a[i] = u(rng) < expit(1.5 * d.w(i, 0)) ? 1.0 : 0.0;
    d.y[i] = d.w(i, 1) + 0.5 * z(rng);
  }
  NuisanceSpec s;
  s.propensity_covariates = {0};
  s.outcome_covariates = {0};
  const auto fit = fit_all(d, s);
  const double pa = d.a.mean();
  double worst = 0.0;
  for (double e : fit.e_hat) worst = std::max(worst, std::abs(e - pa));
  INFO("max |e_hat - P(A=1)| = " << worst << ", bandwidth_e = " << fit.bandwidth_e);
  CHECK(worst < 0.02);
}

TEST_CASE("q_hat and h_hat examples") {
  std::vector<double> a{1, 0, 1, 1, 0}, g{0.2, 0.5, 0.7, 0.3, 0.6}, m{0.1, 0.2, 0.3, 0.4, 0.5};
  auto qh = estimate_q_h(a, g, g, m, {});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(qh.q_hat[i] == 0.0);
    CHECK(qh.h_hat[i] == 0.0);
  }
  std::vector<double> p(5, 0.4);
  qh = estimate_q_h(a, p, p, m, {});
  for (double v : qh.q_hat) CHECK(v == 0.0);

  // Two outcome levels; q_hat matches the enumerated group means of t.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  const std::size_t n = 300;
  std::vector<double> aa(n), gg(n), ee(n), mm(n), t(n), ones(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = i % 2 ? 1.0 : 0.0;
    gg[i] = u(rng);
    ee[i] = u(rng);
    mm[i] = i % 5 ? 0.25 : 0.75;
    t[i] = aa[i] * (1.0 / ee[i] - 1.0 / gg[i]);
  }
  const auto expect = group_means(mm, t, ones);
  qh = estimate_q_h(aa, gg, ee, mm, KernelSpec::fixed(1e-3));
  for (std::size_t i = 0; i < n; ++i) {
    CHECK_THAT(qh.q_hat[i], WithinAbs(expect.at(mm[i]), 1e-3));
    CHECK(qh.h_hat[i] == qh.q_hat[i] / gg[i]);
  }
}

TEST_CASE("fit_all: randomized trial") {
  const Dataset d = randomized(2000, 12);
  const auto fit = fit_all(d, spec_for(3));
  const double pa = d.a.mean();
  for (double e : fit.e_hat) CHECK_THAT(e, WithinAbs(pa, 0.05));
}

TEST_CASE("fit_all: exact outcome fit gives a constant e-score") {
  Dataset d = randomized(300, 13);
  for (Eigen::Index i = 0; i < d.w.rows(); ++i) d.y[i] = 1.0 + 0.5 * d.w(i, 1);
  const auto fit = fit_all(d, spec_for(3));
  for (double r : fit.r_hat) CHECK_THAT(r, WithinAbs(0.0, 1e-8));
  const double gbar = ref::mean(fit.g_hat);
  for (double e : fit.e_hat) CHECK_THAT(e, WithinAbs(gbar, 1e-8));
}

TEST_CASE("fit_all: minimal two-row dataset") {
  Dataset d;
  d.w.resize(2, 1);
  d.w << 0.3, -0.4;
  d.a.resize(2);
  d.a << 1, 0;
  d.y.resize(2);
  d.y << 2.0, 1.0;
  NuisanceFit fit;
  REQUIRE_NOTHROW(fit = fit_all(d, spec_for(1)));
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(std::isfinite(fit.e_hat[i]));
    CHECK(std::isfinite(fit.q_hat[i]));
    CHECK(std::isfinite(fit.m_hat[i]));
  }
}

TEST_CASE("fit_all invariants on the simulation design") {
  for (char scenario : {'A', 'B', 'C', 'D'}) {
    std::mt19937_64 rng(14);
    const Dataset d = sim::generate(3000, 1.0, rng);
    const auto s = sim::ScenarioSpec::from_id(scenario).nuisance_spec();
    for (const Dataset& dd : {d, d.relabeled()}) {
      const auto fit = fit_all(dd, s);
      const auto [glo, ghi] = std::minmax_element(fit.g_hat.begin(), fit.g_hat.end());
      for (double e : fit.e_hat) {
        CHECK(e >= *glo - 1e-12);
        CHECK(e <= *ghi + 1e-12);
      }
      CHECK(ref::variance(fit.e_hat) <= ref::variance(fit.g_hat) + 1e-12);
      for (std::size_t i = 0; i < fit.size(); ++i) CHECK(fit.h_hat[i] == fit.q_hat[i] / fit.g_hat[i]);

      const auto again = fit_all(dd, s);
      CHECK(again.e_hat == fit.e_hat);
      CHECK(again.q_hat == fit.q_hat);
      CHECK(again.m_hat == fit.m_hat);
    }
  }
}

TEST_CASE("fit_all: permutation equivariance") {
  std::mt19937_64 rng(15);
  const Dataset d = sim::generate(800, 1.0, rng);
  const auto s = sim::ScenarioSpec::from_id('A').nuisance_spec();
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(d.size()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Dataset p = d;
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    p.w.row(i) = d.w.row(perm[k]);
    p.a[i] = d.a[perm[k]];
    p.y[i] = d.y[perm[k]];
  }
  const auto f = fit_all(d, s);
  const auto fp = fit_all(p, s);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const auto i = static_cast<std::size_t>(perm[k]);
    CHECK_THAT(fp.g_hat[k], WithinAbs(f.g_hat[i], 1e-10));
    CHECK_THAT(fp.m_hat[k], WithinAbs(f.m_hat[i], 1e-10));
    CHECK_THAT(fp.e_hat[k], WithinAbs(f.e_hat[i], 1e-8));
    CHECK_THAT(fp.q_hat[k], WithinAbs(f.q_hat[i], 1e-6));
  }
}

TEST_CASE("fit_all: residual monotone in g_hat still yields finite e-scores") {
  Dataset d = randomized(500, 16);
  const auto g = fit_propensity(d, spec_for(3));
  for (Eigen::Index i = 0; i < d.w.rows(); ++i) d.y[i] = 5.0 * g.g_hat[static_cast<std::size_t>(i)] * g.g_hat[static_cast<std::size_t>(i)];
  const auto fit = fit_all(d, spec_for(3));
  for (double e : fit.e_hat) CHECK(std::isfinite(e));
  for (double q : fit.q_hat) CHECK(std::isfinite(q));
}
