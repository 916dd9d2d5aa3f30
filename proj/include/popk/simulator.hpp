#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "popk/dataset.hpp"
#include "popk/model.hpp"

namespace popk {

// Covariates are drawn with replacement from these subjects; the volume group
// is then assigned by the design's allocation fraction.
struct ResampleCovariates {
  std::vector<Covariates> pool;
};

// Subject i receives covariates[i] unchanged, volume group included.
struct ExplicitCovariates {
  std::vector<Covariates> covariates;
};

using CovariateSource = std::variant<ResampleCovariates, ExplicitCovariates>;

struct StudyDesign {
  int n_subjects = 40;
  std::vector<double> times{5, 15, 20, 25, 30, 45, 60, 75};  // min
  double dose_mg_per_kg = 0.4;
  CovariateSource covariates = ResampleCovariates{};
  double fraction_high_volume = 0.5;
  double lloq = 0.05;  // mg/L

  void validate() const;
};

std::vector<Covariates> covariate_pool(const StudyDataset& ds);

// What was drawn for each simulated subject, in subject order.
struct SimulationTruth {
  std::vector<std::vector<double>> etas;
  std::vector<IndividualParams> individuals;
};

StudyDataset simulate_dataset(const StudyDesign& design, const ModelSpec& ms,
                              const ParameterSet& params, std::uint64_t seed,
                              SimulationTruth* truth = nullptr);

// New observations for every observation record of `tmpl`, keeping its
// subjects, covariates, doses and times. Subject i uses stream i.
StudyDataset simulate_like(const StudyDataset& tmpl, const ModelSpec& ms,
                           const ParameterSet& params, std::uint64_t seed,
                           SimulationTruth* truth = nullptr);

// Observations with dv strictly below lloq get mdv=1; dv is kept.
StudyDataset apply_lloq(StudyDataset ds, double lloq);

}  // namespace popk
