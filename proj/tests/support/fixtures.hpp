#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "popk/dataset.hpp"
#include "popk/estimator.hpp"
#include "popk/simulator.hpp"

namespace fixtures {

// Forty children whose weights follow a log-normal law with median 15 kg and
// quartiles near 12 and 18 kg; ages, sexes and orosomucoid are spread
// deterministically. Volume groups are reassigned by the simulator.
inline std::vector<popk::Covariates> study_pool(int n = 40) {
  const boost::math::normal z;
  std::vector<popk::Covariates> pool;
  for (int i = 0; i < n; ++i) {
    popk::Covariates c;
    const double u = (i + 0.5) / n;
    c.wt = 15.0 * std::exp(0.30 * boost::math::quantile(z, u));
    const int j = (i * 17) % n;
    c.age = 12.0 + 60.0 * (j + 0.5) / n;
    c.sex = (i % 10 < 3) ? popk::Sex::female : popk::Sex::male;
    if (i % 13 != 5) c.aag = 0.5 + 0.02 * ((i * 7) % n);
    pool.push_back(c);
  }
  return pool;
}

inline popk::StudyDesign study_design(int n = 40) {
  popk::StudyDesign d;
  d.n_subjects = n;
  d.covariates = popk::ResampleCovariates{study_pool()};
  return d;
}

inline popk::SubjectData linear_subject(int id, std::vector<double> y) {
  popk::SubjectData s;
  s.id = id;
  s.dose_times = {0.0};
  s.doses = {1.0};
  for (std::size_t j = 0; j < y.size(); ++j) s.times.push_back(static_cast<double>(j + 1));
  s.y = std::move(y);
  return s;
}

inline popk::ParameterSet linear_params(double mu, double omega2, double sigma) {
  popk::ParameterSet p;
  p.theta = {mu};
  p.omega = {omega2};
  p.sigma = {popk::ErrorModel::additive, 0.0, sigma};
  return p;
}

}  // namespace fixtures
