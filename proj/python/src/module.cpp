#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cli.hpp"
#include "popk/dataset.hpp"
#include "popk/estimator.hpp"
#include "popk/model.hpp"
#include "popk/simulator.hpp"
#include "popk/stats.hpp"

namespace py = pybind11;

namespace {

popk::stats::Sidedness sidedness(const std::string& alternative) {
  if (alternative == "two-sided") return popk::stats::Sidedness::two_sided;
  if (alternative == "greater") return popk::stats::Sidedness::greater;
  if (alternative == "less") return popk::stats::Sidedness::less;
  throw std::invalid_argument("alternative must be 'two-sided', 'greater' or 'less'");
}

py::dict test_result(const popk::stats::TestResult& r) {
  py::dict d;
  d["statistic"] = r.statistic;
  d["p_value"] = r.p_value;
  d["exact"] = r.exact;
  d["note"] = r.note;
  return d;
}

py::dict fit_summary(const popk::StudyDataset& ds, const popk::ModelSpec& ms, const popk::FitResult& r) {
  const popk::PkModel model(ms);
  py::dict est;
  for (const auto& n : popk::parameter_names(model, r.params)) {
    est[py::str(n.name)] = popk::parameter_value(model, r.params, n.name);
  }
  py::dict d;
  d["estimates"] = est;
  d["ofv"] = r.ofv;
  d["converged"] = r.converged;
  d["message"] = r.message;
  d["n_subjects"] = ds.subjects.size();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Population pharmacokinetic engine: exposures, FOCE fitting, simulation and group statistics";
  m.attr("__version__") = POPK_VERSION;

  m.def(
      "exposure_metrics",
      [](double cl, double v, double ka, double dose, double f, double fu) {
        popk::IndividualParams p;
        p.cl = cl;
        p.v = v;
        p.ka = ka;
        p.f = f;
        const auto e = popk::exposure_metrics(p, dose, fu);
        py::dict d;
        d["auc"] = e.auc;
        d["cmax"] = e.cmax;
        d["tmax"] = e.tmax;
        d["cu_max"] = e.cu_max;
        return d;
      },
      py::arg("cl"), py::arg("v"), py::arg("ka"), py::arg("dose"), py::arg("f") = 1.0, py::arg("fu") = 0.01,
      "AUC (mg.min/L), Cmax (mg/L), Tmax (min) and unbound Cmax (ug/L) after one extravascular dose (mg).");

  m.def("unbound_concentration", &popk::unbound_concentration_ugl, py::arg("total_mgl"), py::arg("fu"),
        "Unbound concentration in ug/L from a total concentration in mg/L.");

  m.def(
      "fisher_exact",
      [](long a, long b, long c, long d, const std::string& alternative) {
        return test_result(popk::stats::fisher_exact({a, b, c, d}, sidedness(alternative)));
      },
      py::arg("a"), py::arg("b"), py::arg("c"), py::arg("d"), py::arg("alternative") = "two-sided");

  m.def(
      "rank_sum_test",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        return test_result(popk::stats::rank_sum_test(x, y));
      },
      py::arg("x"), py::arg("y"));

  m.def(
      "simulate_dataset",
      [](const std::string& source_csv, int n_subjects, std::uint64_t seed) {
        const auto source = popk::parse_dataset_text(source_csv);
        popk::StudyDesign d;
        d.n_subjects = n_subjects;
        d.covariates = popk::ResampleCovariates{popk::covariate_pool(source)};
        return popk::serialize_dataset(
            popk::simulate_dataset(d, popk::final_model_spec(), popk::final_model_parameters(), seed));
      },
      py::arg("source_csv"), py::arg("n_subjects"), py::arg("seed"),
      "Simulates a study under the final model, resampling covariates from a source dataset given as CSV text; "
      "returns CSV text.");

  m.def(
      "fit",
      [](const std::string& csv, double lloq) {
        const auto ds = popk::parse_dataset_text(csv, lloq);
        const auto ms = popk::final_model_spec();
        popk::FitResult r;
        {
          py::gil_scoped_release release;
          popk::FitOptions fo;
          fo.compute_standard_errors = false;
          r = popk::fit(ds, ms, popk::final_model_parameters(), fo);
        }
        return fit_summary(ds, ms, r);
      },
      py::arg("csv"), py::arg("lloq") = 0.05, "Fits the final model to a dataset given as CSV text.");

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int status = 0;
        {
          py::gil_scoped_release release;
          status = popk::cli::run(args, out, err);
        }
        return py::make_tuple(status, out.str(), err.str());
      },
      py::arg("args"), "Runs one command-line invocation; returns (exit status, stdout, stderr).");

  py::register_exception<popk::DatasetError>(m, "DatasetError", PyExc_ValueError);
}
