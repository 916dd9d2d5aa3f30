#include "popk/diagnostics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

namespace popk {

namespace {

const std::vector<double>& ebe_for(const FitResult& fit, std::size_t i, const SubjectData& s) {
  if (i >= fit.ebes.size() || fit.subject_ids.at(i) != s.id) {
    throw std::invalid_argument(fmt::format("fit result has no EBE for subject {}", s.id));
  }
  return fit.ebes[i];
}

}  // namespace

std::vector<GofRow> predictions(const PopulationModel& model, std::span<const SubjectData> data,
                                const FitResult& fit) {
  std::vector<GofRow> rows;
  const std::vector<double> zero(model.n_eta(), 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    const auto& eta = ebe_for(fit, i, s);
    std::vector<double> pred(s.n_obs()), ipred(s.n_obs());
    model.predict(s, fit.params.theta, zero, pred);
    model.predict(s, fit.params.theta, eta, ipred);
    for (std::size_t j = 0; j < s.n_obs(); ++j) {
      GofRow r;
      r.subject_id = s.id;
      r.time = s.times[j];
      r.dv = s.y[j];
      r.pred = pred[j];
      r.ipred = ipred[j];
      r.iwres = (s.y[j] - ipred[j]) / error_sd(ipred[j], fit.params.sigma);
      r.cwres = std::numeric_limits<double>::quiet_NaN();
      rows.push_back(r);
    }
  }
  return rows;
}

std::vector<double> cwres(const PopulationModel& model, std::span<const SubjectData> data,
                          const FitResult& fit) {
  std::vector<double> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    if (s.n_obs() == 0) continue;
    const Linearization lin = linearize(model, s, fit.params, ebe_for(fit, i, s));
    const Eigen::LLT<Eigen::MatrixXd> llt(lin.V);
    if (!lin.V.allFinite() || llt.info() != Eigen::Success) {
      throw std::runtime_error(fmt::format("subject {}: covariance V is not positive definite", s.id));
    }
    const Eigen::VectorXd w = llt.matrixL().solve(lin.e);
    out.insert(out.end(), w.data(), w.data() + w.size());
  }
  return out;
}

std::vector<GofRow> goodness_of_fit(const PopulationModel& model, std::span<const SubjectData> data,
                                    const FitResult& fit) {
  auto rows = predictions(model, data, fit);
  const auto cw = cwres(model, data, fit);
  for (std::size_t j = 0; j < rows.size(); ++j) rows[j].cwres = cw[j];
  return rows;
}

std::vector<GofRow> goodness_of_fit(const StudyDataset& ds, const ModelSpec& ms, const FitResult& fit) {
  const PkModel model(ms);
  const auto data = subject_data(ds);
  return goodness_of_fit(model, data, fit);
}

double sample_sd(std::span<const double> values) {
  const auto n = values.size();
  if (n < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(n - 1));
}

Shrinkage shrinkage(std::span<const std::vector<double>> ebes, std::span<const double> omega,
                    std::span<const double> iwres) {
  Shrinkage out;
  out.eta.resize(omega.size());
  for (std::size_t k = 0; k < omega.size(); ++k) {
    if (!(omega[k] > 0.0)) continue;
    std::vector<double> col;
    col.reserve(ebes.size());
    for (const auto& e : ebes) col.push_back(e.at(k));
    out.eta[k].raw = 1.0 - sample_sd(col) / std::sqrt(omega[k]);
  }
  if (!iwres.empty()) out.eps.raw = 1.0 - sample_sd(iwres);
  return out;
}

Shrinkage shrinkage(const FitResult& fit, std::span<const GofRow> rows) {
  std::vector<double> iwres;
  iwres.reserve(rows.size());
  for (const auto& r : rows) iwres.push_back(r.iwres);
  return shrinkage(fit.ebes, fit.params.omega, iwres);
}

void write_gof_csv(std::ostream& out, std::span<const GofRow> rows) {
  out << "ID,TIME,DV,PRED,IPRED,IWRES,CWRES\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{},{:.10g},{:.10g},{:.10g},{:.10g}\n", r.subject_id, r.time, r.dv, r.pred,
                       r.ipred, r.iwres, r.cwres);
  }
}

}  // namespace popk
