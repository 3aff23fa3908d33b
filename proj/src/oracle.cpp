#include "escore/oracle.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace escore::oracle {

namespace {

std::vector<double> column(const DiscreteLaw& law, double Atom::*field) {
  std::vector<double> out;
  out.reserve(law.size());
  for (const auto& a : law.atoms) out.push_back(a.*field);
  return out;
}

double expectation(const DiscreteLaw& law, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < law.size(); ++i) s += law.atoms[i].p * f[i];
  return s;
}

double variance(const DiscreteLaw& law, const std::vector<double>& f) {
  const double mu = expectation(law, f);
  double s = 0.0;
  for (std::size_t i = 0; i < law.size(); ++i) s += law.atoms[i].p * (f[i] - mu) * (f[i] - mu);
  return s;
}

void check_size(const DiscreteLaw& law, const std::vector<double>& v, const char* what) {
  if (v.size() != law.size()) {
    throw std::invalid_argument(std::string(what) + " has the wrong number of atoms");
  }
}

bool all_equal(const DiscreteLaw& law, double Atom::*a, double Atom::*b) {
  return std::all_of(law.atoms.begin(), law.atoms.end(),
                     [&](const Atom& x) { return x.*a == x.*b; });
}

}  // namespace

void DiscreteLaw::validate() const {
  if (atoms.empty()) throw std::invalid_argument("law has no atoms");
  double total = 0.0;
  for (const auto& a : atoms) {
    if (!(a.p > 0.0)) throw std::invalid_argument("atom probability must be positive");
    if (!(a.g > 0.0 && a.g < 1.0)) throw std::invalid_argument("g must lie in (0,1)");
    if (!(a.g1 > 0.0 && a.g1 <= 1.0)) throw std::invalid_argument("g1 must lie in (0,1]");
    if (!(a.sigma0_sq >= 0.0)) throw std::invalid_argument("sigma0_sq must be nonnegative");
    if (!std::isfinite(a.m) || !std::isfinite(a.m1)) throw std::invalid_argument("m, m1 must be finite");
    total += a.p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("atom probabilities must sum to 1");
}

double DiscreteLaw::treated_probability() const {
  double s = 0.0;
  for (const auto& a : atoms) s += a.p * a.g;
  return s;
}

double true_theta(const DiscreteLaw& law) { return expectation(law, column(law, &Atom::m)); }

std::vector<double> group_mean(const DiscreteLaw& law, const std::vector<double>& c,
                               const std::vector<double>& f) {
  check_size(law, c, "conditioning values");
  check_size(law, f, "function values");
  std::vector<double> out(law.size());
  for (std::size_t i = 0; i < law.size(); ++i) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t j = 0; j < law.size(); ++j) {
      if (c[j] == c[i]) {
        num += law.atoms[j].p * f[j];
        den += law.atoms[j].p;
      }
    }
    out[i] = num / den;
  }
  return out;
}

EScore escore_chain(const DiscreteLaw& law) {
  law.validate();
  const std::size_t k = law.size();
  EScore out;
  out.r1.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const auto& a = law.atoms[j];
      if (a.g1 == law.atoms[i].g1) {
        num += a.p * a.g * (a.m - a.m1);
        den += a.p * a.g;
      }
    }
    if (!(den > 0.0)) throw std::domain_error("g1 group with no treated mass");
    out.r1[i] = num / den;
  }
  out.e1 = group_mean(law, out.r1, column(law, &Atom::g1));
  return out;
}

std::vector<double> reduced_propensity(const DiscreteLaw& law, Conditioning on) {
  law.validate();
  switch (on) {
    case Conditioning::OnS: {
      std::vector<double> s(law.size());
      for (std::size_t i = 0; i < law.size(); ++i) s[i] = law.atoms[i].m - law.atoms[i].m1;
      return group_mean(law, s, column(law, &Atom::g));
    }
    case Conditioning::OnM:
      return group_mean(law, column(law, &Atom::m), column(law, &Atom::g));
    case Conditioning::OnR1:
      return escore_chain(law).e1;
  }
  throw std::invalid_argument("unknown conditioning");
}

double expected_estimating_function(const DiscreteLaw& law, const std::vector<double>& weight) {
  check_size(law, weight, "weight");
  double s = 0.0;
  for (std::size_t i = 0; i < law.size(); ++i) {
    const auto& a = law.atoms[i];
    s += a.p * (a.g / weight[i] * (a.m - a.m1) + a.m1);
  }
  return s - true_theta(law);
}

IdentityValue check_theorem2(const DiscreteLaw& law) {
  const EScore es = escore_chain(law);
  return {expected_estimating_function(law, es.e1),
          all_equal(law, &Atom::g1, &Atom::g) || all_equal(law, &Atom::m1, &Atom::m)};
}

IdentityValue check_theorem1(const DiscreteLaw& law) {
  const auto gs = reduced_propensity(law, Conditioning::OnS);
  return {expected_estimating_function(law, gs), true};
}

double drift_term(const DiscreteLaw& law, const std::vector<double>& e_hat,
                  const std::vector<double>& m_hat) {
  check_size(law, e_hat, "e_hat");
  check_size(law, m_hat, "m_hat");
  double s = 0.0;
  for (std::size_t i = 0; i < law.size(); ++i) {
    const auto& a = law.atoms[i];
    s += a.p / e_hat[i] * (a.g - e_hat[i]) * (a.m - m_hat[i]);
  }
  return s;
}

double DriftDecomposition::full_identity_deviation() const {
  return std::abs(drift - score_term - remainder - conditioning_gap);
}

double DriftDecomposition::identity_deviation() const {
  return std::abs(drift - score_term - remainder);
}

DriftDecomposition check_lemma1_exact(const DiscreteLaw& law, const std::vector<double>& e_hat,
                                      const std::vector<double>& g_hat,
                                      const std::vector<double>& m_hat) {
  law.validate();
  check_size(law, g_hat, "g_hat");
  const std::size_t k = law.size();
  std::vector<double> a_term(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(e_hat[i] > 0.0) || !(g_hat[i] > 0.0)) throw std::invalid_argument("e_hat, g_hat must be positive");
    a_term[i] = law.atoms[i].g * (1.0 / e_hat[i] - 1.0 / g_hat[i]);
  }
  const auto m = column(law, &Atom::m);

  DriftDecomposition d;
  d.drift = drift_term(law, e_hat, m_hat);
  d.q = group_mean(law, m_hat, a_term);
  d.q0 = group_mean(law, m, a_term);
  double a_mhat = 0.0, a_m = 0.0, q_mhat = 0.0, q0_m = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& at = law.atoms[i];
    const double h = d.q[i] / at.g;
    d.score_term += at.p * at.g * h * (at.m - m_hat[i]);
    d.remainder += at.p / g_hat[i] * (at.g - g_hat[i]) * (at.m - m_hat[i]);
    d.conditioning_gap += at.p * (d.q0[i] - d.q[i]) * at.m;
    a_mhat += at.p * a_term[i] * m_hat[i];
    a_m += at.p * a_term[i] * at.m;
    q_mhat += at.p * d.q[i] * m_hat[i];
    q0_m += at.p * d.q0[i] * at.m;
  }
  d.tower_mhat_deviation = std::abs(q_mhat - a_mhat);
  d.tower_m_deviation = std::abs(q0_m - a_m);
  return d;
}

double efficiency_bound(const DiscreteLaw& law) {
  law.validate();
  const double theta = true_theta(law);
  double s = 0.0;
  for (const auto& a : law.atoms) s += a.p * (a.sigma0_sq / a.g + (a.m - theta) * (a.m - theta));
  return s;
}

std::vector<double> weight_shrinkage(const DiscreteLaw& law) {
  const auto gm = reduced_propensity(law, Conditioning::OnM);
  const double pa = law.treated_probability();
  std::vector<double> out(law.size());
  for (std::size_t i = 0; i < law.size(); ++i) out[i] = 1.0 - (gm[i] - law.atoms[i].g) / pa;
  return out;
}

double if0_variance(const DiscreteLaw& law) {
  const auto factor = weight_shrinkage(law);
  const double theta = true_theta(law);
  double s = 0.0;
  for (std::size_t i = 0; i < law.size(); ++i) {
    const auto& a = law.atoms[i];
    s += a.p * (a.g / (a.g * a.g) * factor[i] * factor[i] * a.sigma0_sq +
                (a.m - theta) * (a.m - theta));
  }
  return s;
}

DiscreteLaw random_law(std::mt19937_64& rng, const RandomLawOptions& options) {
  std::uniform_int_distribution<int> count(options.min_atoms, options.max_atoms);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const int k = count(rng);

  // With probability 0.3 reuse an earlier atom's value.
  auto maybe_repeat = [&](std::vector<double>& v, std::size_t i, double fresh) {
    if (i > 0 && unit(rng) < 0.3) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      v[i] = v[pick(rng)];
    } else {
      v[i] = fresh;
    }
  };

  const auto n = static_cast<std::size_t>(k);
  std::vector<double> p(n), g(n), m(n), g1(n), m1(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = uniform(0.05, 1.0);
    total += p[i];
    g[i] = uniform(0.05, 0.95);
    maybe_repeat(m, i, uniform(-1.0, 1.0));
    maybe_repeat(g1, i, uniform(0.05, 0.95));
    maybe_repeat(m1, i, uniform(-1.0, 1.0));
  }

  DiscreteLaw law;
  law.atoms.resize(n);
  double assigned = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    Atom& a = law.atoms[i];
    a.id = static_cast<int>(i);
    a.p = i + 1 < n ? p[i] / total : 1.0 - assigned;
    assigned += a.p;
    a.m = m[i];
    a.sigma0_sq = uniform(0.0, 2.0);
    switch (options.regime) {
      case Regime::G1EqualsG:
        // Collisions in g1 are collisions in g.
        a.g = g1[i];
        a.g1 = g1[i];
        a.m1 = m1[i];
        break;
      case Regime::M1EqualsM:
        a.g = g[i];
        a.g1 = g1[i];
        a.m1 = a.m;
        break;
      case Regime::Free:
        a.g = g[i];
        a.g1 = g1[i];
        a.m1 = m1[i];
        break;
    }
  }
  return law;
}

WorkingNuisances random_working_nuisances(const DiscreteLaw& law, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  WorkingNuisances w;
  const std::size_t k = law.size();
  w.e_hat.resize(k);
  w.g_hat.resize(k);
  w.m_hat.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    w.e_hat[i] = 0.05 + 0.9 * unit(rng);
    w.g_hat[i] = 0.05 + 0.9 * unit(rng);
  }
  // One offset per distinct m value, so m_hat groups coincide with m groups.
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t first = i;
    for (std::size_t j = 0; j < i; ++j) {
      if (law.atoms[j].m == law.atoms[i].m) {
        first = j;
        break;
      }
    }
    w.m_hat[i] = first == i ? law.atoms[i].m + (unit(rng) - 0.5) : w.m_hat[first];
  }
  return w;
}

SuiteResult run_identity_suite(const SuiteOptions& options) {
  if (options.laws < 1) throw std::invalid_argument("need at least one law");
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  struct Check {
    std::string name;
    double tolerance;
    std::function<double(const DiscreteLaw&, std::mt19937_64&)> deviation;
    Regime regime;
  };

  auto theorem2 = [&](const DiscreteLaw& law) {
    EScore es = escore_chain(law);
    if (options.break_theorem2) {
      for (double& e : es.e1) e += 0.01;
    }
    return std::abs(expected_estimating_function(law, es.e1));
  };

  const double tol = options.tolerance;
  const std::vector<Check> checks{
      {"theorem2 (g1 = g)", tol, [&](const DiscreteLaw& l, auto&) { return theorem2(l); },
       Regime::G1EqualsG},
      {"theorem1 (g1 = g)", tol,
       [](const DiscreteLaw& l, auto&) { return std::abs(check_theorem1(l).value); },
       Regime::G1EqualsG},
      {"theorem2 (m1 = m)", tol, [&](const DiscreteLaw& l, auto&) { return theorem2(l); },
       Regime::M1EqualsM},
      {"theorem1 (m1 = m)", tol,
       [](const DiscreteLaw& l, auto&) { return std::abs(check_theorem1(l).value); },
       Regime::M1EqualsM},
      {"P D (m1 = m, arbitrary e)", tol,
       [&](const DiscreteLaw& l, auto& r) {
         std::vector<double> e(l.size());
         for (double& v : e) v = 0.05 + 0.9 * unit(r);
         return std::abs(expected_estimating_function(l, e));
       },
       Regime::M1EqualsM},
      {"drift decomposition", tol,
       [](const DiscreteLaw& l, auto& r) {
         const auto w = random_working_nuisances(l, r);
         return check_lemma1_exact(l, w.e_hat, w.g_hat, w.m_hat).identity_deviation();
       },
       Regime::Free},
      {"drift = P S_h (g_hat = g)", tol,
       [](const DiscreteLaw& l, auto& r) {
         auto w = random_working_nuisances(l, r);
         for (std::size_t i = 0; i < l.size(); ++i) w.g_hat[i] = l.atoms[i].g;
         const auto d = check_lemma1_exact(l, w.e_hat, w.g_hat, w.m_hat);
         return std::abs(d.drift - d.score_term) + std::abs(d.remainder);
       },
       Regime::Free},
      {"tower identities", tol,
       [](const DiscreteLaw& l, auto& r) {
         const auto w = random_working_nuisances(l, r);
         const auto d = check_lemma1_exact(l, w.e_hat, w.g_hat, w.m_hat);
         return std::max(d.tower_mhat_deviation, d.tower_m_deviation);
       },
       Regime::Free},
      {"drift bilinearity", tol,
       [](const DiscreteLaw& l, auto& r) {
         const auto w = random_working_nuisances(l, r);
         std::vector<double> scaled(l.size());
         for (std::size_t i = 0; i < l.size(); ++i) {
           scaled[i] = l.atoms[i].m - 3.0 * (l.atoms[i].m - w.m_hat[i]);
         }
         return std::abs(drift_term(l, w.e_hat, scaled) - 3.0 * drift_term(l, w.e_hat, w.m_hat));
       },
       Regime::Free},
      {"IF0 variance = bound (g_m = g)", tol,
       [](const DiscreteLaw& l, auto&) {
         DiscreteLaw distinct = l;
         for (std::size_t i = 0; i < distinct.size(); ++i) {
           distinct.atoms[i].m += 1e-3 * static_cast<double>(i);
         }
         return std::abs(if0_variance(distinct) - efficiency_bound(distinct));
       },
       Regime::Free},
      {"e1 variance <= g1 variance", tol,
       [](const DiscreteLaw& l, auto&) {
         const auto es = escore_chain(l);
         return std::max(0.0, variance(l, es.e1) - variance(l, column(l, &Atom::g1)));
       },
       Regime::Free},
      {"e1 within g1 range", tol,
       [](const DiscreteLaw& l, auto&) {
         const auto es = escore_chain(l);
         const auto g1 = column(l, &Atom::g1);
         const auto [lo, hi] = std::minmax_element(g1.begin(), g1.end());
         double dev = 0.0;
         for (double e : es.e1) dev = std::max({dev, *lo - e, e - *hi});
         return dev;
       },
       Regime::Free},
      {"weight factor <= 2 when g <= P(A=1)", tol,
       [](const DiscreteLaw& l, auto&) {
         const auto f = weight_shrinkage(l);
         const double pa = l.treated_probability();
         double dev = 0.0;
         for (std::size_t i = 0; i < l.size(); ++i) {
           if (l.atoms[i].g <= pa) dev = std::max({dev, f[i] - (1.0 + l.atoms[i].g / pa), f[i] - 2.0});
         }
         return dev;
       },
       Regime::Free},
  };

  SuiteResult result;
  for (const auto& c : checks) result.rows.push_back({c.name, 0.0, c.tolerance, true});

  for (int k = 0; k < options.laws; ++k) {
    for (std::size_t c = 0; c < checks.size(); ++c) {
      const DiscreteLaw law = random_law(rng, {3, 10, checks[c].regime});
      const double dev = checks[c].deviation(law, rng);
      CheckRow& row = result.rows[c];
      row.max_abs_deviation = std::max(row.max_abs_deviation, dev);
      if (!(dev <= checks[c].tolerance)) {
        row.passed = false;
        if (!result.offending_law) {
          result.offending_law = law;
          result.offending_check = checks[c].name;
        }
      }
    }
  }
  result.passed = std::all_of(result.rows.begin(), result.rows.end(),
                              [](const CheckRow& r) { return r.passed; });
  return result;
}

std::string to_json(const DiscreteLaw& law) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& a : law.atoms) {
    j.push_back({{"id", a.id}, {"p", a.p}, {"g", a.g}, {"m", a.m},
                 {"sigma0_sq", a.sigma0_sq}, {"g1", a.g1}, {"m1", a.m1}});
  }
  return nlohmann::json{{"atoms", j}}.dump(2);
}

}  // namespace escore::oracle
