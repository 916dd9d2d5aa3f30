#pragma once

#include <iosfwd>
#include <vector>

#include "popk/estimator.hpp"

namespace popk {

struct GofRow {
  int subject_id = 0;
  double time = 0.0;
  double dv = 0.0;
  double pred = 0.0;   // eta = 0
  double ipred = 0.0;  // eta = eta_hat
  double iwres = 0.0;
  double cwres = 0.0;
};

// One row per usable observation, subjects in dataset order. cwres is left
// NaN; see cwres().
std::vector<GofRow> predictions(const PopulationModel& model, std::span<const SubjectData> data,
                                const FitResult& fit);

// CWRES = L^-1 e with V = L L' from the same linearization the objective
// uses. Throws std::runtime_error naming the subject if V is not positive
// definite.
std::vector<double> cwres(const PopulationModel& model, std::span<const SubjectData> data,
                          const FitResult& fit);

std::vector<GofRow> goodness_of_fit(const PopulationModel& model,
                                    std::span<const SubjectData> data, const FitResult& fit);
std::vector<GofRow> goodness_of_fit(const StudyDataset& ds, const ModelSpec& ms,
                                    const FitResult& fit);

// Sample SD with the n-1 denominator; 0 for fewer than two values.
double sample_sd(std::span<const double> values);

Shrinkage shrinkage(std::span<const std::vector<double>> ebes, std::span<const double> omega,
                    std::span<const double> iwres);
Shrinkage shrinkage(const FitResult& fit, std::span<const GofRow> rows);

void write_gof_csv(std::ostream& out, std::span<const GofRow> rows);

}  // namespace popk
