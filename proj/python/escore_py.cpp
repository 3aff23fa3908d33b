// Thin bindings: numpy in, dicts out.
#include "escore/estimators.hpp"
#include "escore/oracle.hpp"
#include "escore/simlab.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace escore;

namespace {

py::dict generate(std::size_t n, double delta, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Dataset d = sim::generate(n, delta, rng);
  py::dict out;
  out["W"] = d.w;
  out["A"] = d.a;
  out["Y"] = d.y;
  return out;
}

py::list estimate_rows(const Eigen::MatrixXd& w, const Eigen::VectorXd& a, const Eigen::VectorXd& y,
                  const std::string& target, double alpha, const std::vector<std::string>& estimators) {
  Dataset d{w, a, y};
  TargetSpec t;
  t.alpha = alpha;
  if (target == "ATE") t.target = Target::ATE;
  else if (target == "Y1") t.target = Target::MeanY1;
  else if (target == "Y0") t.target = Target::MeanY0;
  else throw std::invalid_argument("target must be ATE, Y1 or Y0");
  std::vector<EstimatorId> which;
  for (const auto& name : estimators) {
    const auto id = parse_estimator(name);
    if (!id) throw std::invalid_argument("unknown estimator " + name);
    which.push_back(*id);
  }
  if (which.empty()) which = all_estimators();

  py::list out;
  for (const auto& r : escore::estimate(d, NuisanceSpec::all_columns(d.covariates()), t, which)) {
    py::dict row;
    row["estimator"] = std::string(to_string(r.estimator));
    row["estimate"] = r.theta_hat;
    row["se"] = r.se ? py::cast(*r.se) : py::none();
    row["ci"] = r.ci ? py::cast(*r.ci) : py::none();
    row["p_value"] = r.se ? py::cast(*r.p_value()) : py::none();
    row["converged"] = r.converged;
    row["diagnostics"] = r.diagnostics;
    out.append(row);
  }
  return out;
}

py::dict identity_suite(int laws, std::uint64_t seed) {
  oracle::SuiteOptions opt;
  opt.laws = laws;
  opt.seed = seed;
  const auto res = oracle::run_identity_suite(opt);
  py::dict out;
  py::list rows;
  for (const auto& r : res.rows) {
    rows.append(py::dict(py::arg("name") = r.name, py::arg("max_abs_deviation") = r.max_abs_deviation,
                         py::arg("tolerance") = r.tolerance, py::arg("passed") = r.passed));
  }
  out["rows"] = rows;
  out["passed"] = res.passed;
  return out;
}

}  // namespace

PYBIND11_MODULE(_escore, m) {
  py::register_exception<std::invalid_argument>(m, "EscoreError", PyExc_ValueError);
  m.def("generate", &generate, py::arg("n"), py::arg("delta") = 1.0, py::arg("seed") = 1);
  m.def("estimate", &estimate_rows, py::arg("W"), py::arg("A"), py::arg("Y"), py::arg("target") = "ATE",
        py::arg("alpha") = 0.05, py::arg("estimators") = std::vector<std::string>{});
  m.def("identity_suite", &identity_suite, py::arg("laws") = 1000, py::arg("seed") = 20190101);
  m.def("mc_efficiency_bound", &sim::mc_efficiency_bound, py::arg("delta"), py::arg("draws") = 1000000,
        py::arg("seed") = 1);
}
