#include "popk/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "popk/random.hpp"

namespace popk {

namespace {

void check_params(const ModelSpec& ms, const ParameterSet& params) {
  ms.validate();
  if (params.theta.size() != ms.n_theta() || params.omega.size() != ms.eta_names().size()) {
    throw std::invalid_argument("parameter vector does not match the model");
  }
  for (double w : params.omega) {
    if (!(w >= 0.0)) throw std::invalid_argument("omega variances must be >= 0");
  }
  if (!(params.sigma.prop >= 0.0) || !(params.sigma.add >= 0.0)) {
    throw std::invalid_argument("sigma components must be >= 0");
  }
}

std::vector<double> draw_eta(Engine& rng, const ParameterSet& params) {
  std::vector<double> eta(params.omega.size());
  for (std::size_t k = 0; k < eta.size(); ++k) eta[k] = std::sqrt(params.omega[k]) * standard_normal(rng);
  return eta;
}

// Noise-free sigma is allowed here: zero components simply add nothing.
double residual_sd(double pred, const SigmaParams& s) {
  switch (s.model) {
    case ErrorModel::additive: return s.add;
    case ErrorModel::proportional: return std::abs(pred) * s.prop;
    case ErrorModel::combined: return std::hypot(s.add, pred * s.prop);
  }
  return 0.0;
}

double predict_at(const ModelSpec& ms, const IndividualParams& ip, const Subject& s, double t) {
  double c = 0.0;
  for (const auto& r : s.records) {
    if (r.is_dose() && t > r.time) c += concentration(ms.structure, t - r.time, *r.amt, ip);
  }
  return c;
}

}  // namespace

void StudyDesign::validate() const {
  if (n_subjects <= 0) throw std::invalid_argument("design needs at least one subject");
  if (times.empty()) throw std::invalid_argument("design needs sampling times");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < 0 || (i > 0 && !(times[i] > times[i - 1]))) {
      throw std::invalid_argument("sampling times must be non-negative and strictly increasing");
    }
  }
  if (!(dose_mg_per_kg > 0.0)) throw std::invalid_argument("dose rule must be positive");
  if (!(fraction_high_volume >= 0.0 && fraction_high_volume <= 1.0)) {
    throw std::invalid_argument("fraction_high_volume must lie in [0, 1]");
  }
  if (!(lloq >= 0.0)) throw std::invalid_argument("lloq must be >= 0");
  if (const auto* r = std::get_if<ResampleCovariates>(&covariates); r && r->pool.empty()) {
    throw std::invalid_argument("covariate pool is empty");
  }
  if (const auto* e = std::get_if<ExplicitCovariates>(&covariates);
      e && e->covariates.size() != static_cast<std::size_t>(n_subjects)) {
    throw std::invalid_argument(fmt::format("explicit covariate list has {} entries for {} subjects",
                                            e->covariates.size(), n_subjects));
  }
}

std::vector<Covariates> covariate_pool(const StudyDataset& ds) {
  std::vector<Covariates> pool;
  pool.reserve(ds.subjects.size());
  for (const auto& s : ds.subjects) pool.push_back(s.cov);
  return pool;
}

StudyDataset simulate_dataset(const StudyDesign& design, const ModelSpec& ms, const ParameterSet& params,
                              std::uint64_t seed, SimulationTruth* truth) {
  design.validate();
  check_params(ms, params);
  const auto n = static_cast<std::size_t>(design.n_subjects);
  if (truth) *truth = {};

  const auto* resample = std::get_if<ResampleCovariates>(&design.covariates);
  std::vector<VolumeGroup> groups(n, VolumeGroup::low_volume);
  if (resample) {
    const auto n_high = static_cast<std::size_t>(std::llround(design.fraction_high_volume * static_cast<double>(n)));
    std::fill(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_high), VolumeGroup::high_volume);
    Engine alloc = make_stream(seed, StreamDomain::allocation, 0);
    for (std::size_t i = n; i > 1; --i) std::swap(groups[i - 1], groups[uniform_index(alloc, i)]);
  }

  std::vector<Subject> subjects(n);
  for (std::size_t i = 0; i < n; ++i) {
    Engine rng = make_stream(seed, StreamDomain::subject, i);
    Subject& s = subjects[i];
    s.id = static_cast<int>(i) + 1;
    if (resample) {
      s.cov = resample->pool[uniform_index(rng, resample->pool.size())];
      s.cov.volgrp = groups[i];
    } else {
      s.cov = std::get<ExplicitCovariates>(design.covariates).covariates[i];
    }
    const auto eta = draw_eta(rng, params);
    const IndividualParams ip = individual_params(ms, params.theta, s.cov, eta);
    if (truth) {
      truth->etas.push_back(eta);
      truth->individuals.push_back(ip);
    }

    EventRecord dose;
    dose.subject_id = s.id;
    dose.evid = 1;
    dose.amt = design.dose_mg_per_kg * s.cov.wt;
    dose.mdv = 1;
    dose.cov = s.cov;
    s.records.push_back(dose);
    for (double t : design.times) {
      EventRecord obs;
      obs.subject_id = s.id;
      obs.time = t;
      obs.cov = s.cov;
      const double f = predict_at(ms, ip, s, t);
      obs.dv = f + residual_sd(f, params.sigma) * standard_normal(rng);
      s.records.push_back(obs);
    }
  }
  return make_dataset(std::move(subjects), design.lloq);
}

StudyDataset simulate_like(const StudyDataset& tmpl, const ModelSpec& ms, const ParameterSet& params,
                           std::uint64_t seed, SimulationTruth* truth) {
  check_params(ms, params);
  std::vector<Subject> subjects = tmpl.subjects;
  if (truth) *truth = {};
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    Engine rng = make_stream(seed, StreamDomain::subject, i);
    Subject& s = subjects[i];
    const auto eta = draw_eta(rng, params);
    const IndividualParams ip = individual_params(ms, params.theta, s.cov, eta);
    if (truth) {
      truth->etas.push_back(eta);
      truth->individuals.push_back(ip);
    }
    for (auto& r : s.records) {
      if (!r.is_observation()) continue;
      const double f = predict_at(ms, ip, s, r.time);
      r.dv = f + residual_sd(f, params.sigma) * standard_normal(rng);
      r.mdv = 0;
    }
  }
  return make_dataset(std::move(subjects), tmpl.lloq);
}

StudyDataset apply_lloq(StudyDataset ds, double lloq) {
  if (!(lloq >= 0.0)) throw std::invalid_argument("lloq must be >= 0");
  for (auto& s : ds.subjects) {
    for (auto& r : s.records) {
      if (r.is_observation() && r.dv && *r.dv < lloq) r.mdv = 1;
    }
  }
  ds.lloq = lloq;
  return ds;
}

}  // namespace popk
