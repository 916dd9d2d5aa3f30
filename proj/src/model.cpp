#include "popk/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace popk {

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view text, const std::array<Enum, N>& values, std::string_view what) {
  for (Enum v : values) {
    if (text == to_string(v)) return v;
  }
  throw std::invalid_argument(fmt::format("unknown {} '{}'", what, text));
}

std::size_t first_covariate_index(Structure s) {
  switch (s) {
    case Structure::one_compartment_first_order: return 4;
    case Structure::one_compartment_zero_order: return 4;
    case Structure::two_compartment_first_order: return 6;
  }
  return 4;
}

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw std::domain_error(fmt::format("{} must be positive and finite (got {})", what, v));
  }
}

// (exp(-a t) - exp(-b t)) / (b - a) without cancellation when a ~ b.
double exp_difference_ratio(double a, double b, double t) {
  const double d = b - a;
  if (std::abs(d) <= kDegenerateRateTol * std::abs(a)) return t * std::exp(-a * t);
  return -std::exp(-a * t) * std::expm1(-d * t) / d;
}

double peak_by_search(Structure s, const IndividualParams& p) {
  // Coarse grid over ten elimination half-lives, then golden-section refinement.
  const double horizon = 10.0 * std::log(2.0) / p.ke() + (s == Structure::one_compartment_zero_order ? p.d1 : 0.0);
  const int n = 2000;
  double best_t = 0.0, best_c = -1.0;
  for (int i = 1; i <= n; ++i) {
    const double t = horizon * i / n;
    const double c = concentration(s, t, 1.0, p);
    if (c > best_c) {
      best_c = c;
      best_t = t;
    }
  }
  double lo = std::max(0.0, best_t - horizon / n), hi = best_t + horizon / n;
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
    const double m1 = hi - r * (hi - lo), m2 = lo + r * (hi - lo);
    if (concentration(s, m1, 1.0, p) < concentration(s, m2, 1.0, p)) lo = m1;
    else hi = m2;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::string_view to_string(Structure s) {
  switch (s) {
    case Structure::one_compartment_first_order: return "one_compartment_first_order";
    case Structure::one_compartment_zero_order: return "one_compartment_zero_order";
    case Structure::two_compartment_first_order: return "two_compartment_first_order";
  }
  return "?";
}

std::string_view to_string(ErrorModel e) {
  switch (e) {
    case ErrorModel::additive: return "additive";
    case ErrorModel::proportional: return "proportional";
    case ErrorModel::combined: return "combined";
  }
  return "?";
}

std::string_view to_string(PkParam p) {
  switch (p) {
    case PkParam::cl: return "CL";
    case PkParam::v: return "V";
    case PkParam::ka: return "KA";
  }
  return "?";
}

std::string_view to_string(CovariateForm f) {
  switch (f) {
    case CovariateForm::linear: return "linear";
    case CovariateForm::power: return "power";
    case CovariateForm::exponential: return "exponential";
  }
  return "?";
}

Structure structure_from_string(std::string_view s) {
  return parse_enum(s,
                    std::array{Structure::one_compartment_first_order, Structure::one_compartment_zero_order,
                               Structure::two_compartment_first_order},
                    "structure");
}

ErrorModel error_model_from_string(std::string_view s) {
  return parse_enum(s, std::array{ErrorModel::additive, ErrorModel::proportional, ErrorModel::combined},
                    "error model");
}

PkParam pk_param_from_string(std::string_view s) {
  return parse_enum(s, std::array{PkParam::cl, PkParam::v, PkParam::ka}, "parameter");
}

CovariateForm covariate_form_from_string(std::string_view s) {
  return parse_enum(s, std::array{CovariateForm::linear, CovariateForm::power, CovariateForm::exponential},
                    "covariate form");
}

void validate(const SigmaParams& s) {
  const bool prop = s.model != ErrorModel::additive;
  const bool add = s.model != ErrorModel::proportional;
  if (prop ? !(s.prop > 0.0) : s.prop != 0.0) {
    throw std::invalid_argument("sigma prop must be > 0 when active and exactly 0 otherwise");
  }
  if (add ? !(s.add > 0.0) : s.add != 0.0) {
    throw std::invalid_argument("sigma add must be > 0 when active and exactly 0 otherwise");
  }
}

double error_sd(double pred, const SigmaParams& sigma) {
  double sd = 0.0;
  switch (sigma.model) {
    case ErrorModel::additive: sd = sigma.add; break;
    case ErrorModel::proportional: sd = std::abs(pred) * sigma.prop; break;
    case ErrorModel::combined: sd = std::hypot(sigma.add, pred * sigma.prop); break;
  }
  return std::max(sd, kResidualSdFloor);
}

double error_sd_slope(double pred, const SigmaParams& sigma) {
  if (error_sd(pred, sigma) <= kResidualSdFloor) return 0.0;
  switch (sigma.model) {
    case ErrorModel::additive: return 0.0;
    case ErrorModel::proportional: return pred >= 0 ? sigma.prop : -sigma.prop;
    case ErrorModel::combined: return pred * sigma.prop * sigma.prop / error_sd(pred, sigma);
  }
  return 0.0;
}

std::string CovariateEffect::name() const {
  std::string form_name(to_string(form));
  std::transform(form_name.begin(), form_name.end(), form_name.begin(), ::toupper);
  return fmt::format("{}_{}_{}", to_string(parameter), to_string(covariate), form_name);
}

double CovariateEffect::factor(double coefficient, const Covariates& cov) const {
  const auto x = cov.value(covariate);
  if (!x) return 1.0;
  switch (form) {
    case CovariateForm::linear: return 1.0 + coefficient * (*x - reference);
    case CovariateForm::power: return std::pow(*x / reference, coefficient);
    case CovariateForm::exponential: return std::exp(coefficient * (*x - reference));
  }
  return 1.0;
}

std::vector<std::string> ModelSpec::theta_names() const {
  std::vector<std::string> names;
  switch (structure) {
    case Structure::one_compartment_first_order: names = {"CL", "V", "KA", "F_LARGE"}; break;
    case Structure::one_compartment_zero_order: names = {"CL", "V", "D1", "F_LARGE"}; break;
    case Structure::two_compartment_first_order: names = {"CL", "V", "KA", "F_LARGE", "Q", "V2"}; break;
  }
  for (const auto& c : covariates) names.push_back(c.name());
  return names;
}

std::size_t ModelSpec::n_theta() const { return first_covariate_index(structure) + covariates.size(); }

std::vector<std::string> ModelSpec::eta_names() const {
  if (structure == Structure::one_compartment_zero_order) return {"CL", "V", "D1"};
  return {"CL", "V", "KA"};
}

std::size_t ModelSpec::theta_index(std::string_view name) const {
  const auto names = theta_names();
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::invalid_argument(fmt::format("unknown theta '{}'", name));
  return static_cast<std::size_t>(it - names.begin());
}

bool ModelSpec::theta_positive(std::size_t index) const { return index < first_covariate_index(structure); }

void ModelSpec::validate() const {
  if (structure != Structure::one_compartment_first_order && !covariates.empty()) {
    throw std::invalid_argument("covariate effects require the one-compartment first-order model");
  }
  auto names = theta_names();
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
    throw std::invalid_argument("duplicate covariate effect in model");
  }
  for (const auto& c : covariates) {
    if (c.form == CovariateForm::power && is_categorical(c.covariate)) {
      throw std::invalid_argument("power form is undefined for categorical covariate " +
                                  std::string(to_string(c.covariate)));
    }
    if (c.form == CovariateForm::power && !(c.reference > 0.0)) {
      throw std::invalid_argument("power form needs a positive reference value");
    }
  }
}

ThetaVector structural_theta(const ModelSpec& ms, std::span<const double> theta) {
  if (theta.size() != ms.n_theta()) {
    throw std::invalid_argument(
        fmt::format("theta has {} entries, model expects {}", theta.size(), ms.n_theta()));
  }
  ThetaVector t;
  t.cl_f = theta[0];
  t.v_f = theta[1];
  t.ka = theta[2];
  t.f_large = theta[3];
  if (ms.structure == Structure::two_compartment_first_order) {
    t.q_f = theta[4];
    t.v2_f = theta[5];
  }
  return t;
}

ModelSpec final_model_spec() {
  ModelSpec ms = base_model_spec();
  ms.covariates.push_back({PkParam::cl, Covariate::wt, CovariateForm::power, kReferenceWeight});
  return ms;
}

ParameterSet final_model_parameters() {
  ParameterSet p = base_model_parameters();
  p.theta.push_back(0.87);
  return p;
}

ModelSpec base_model_spec() {
  ModelSpec ms;
  ms.structure = Structure::one_compartment_first_order;
  ms.error_model = ErrorModel::proportional;
  return ms;
}

ParameterSet base_model_parameters() {
  ParameterSet p;
  p.theta = {0.15, 14.0, 0.18, 0.88};
  p.omega = {0.41 * 0.41, 0.47 * 0.47, 0.81 * 0.81};
  p.sigma = {ErrorModel::proportional, 0.14, 0.0};
  return p;
}

IndividualParams individual_params(const ModelSpec& ms, std::span<const double> theta,
                                   const Covariates& cov, std::span<const double> eta) {
  if (!(cov.wt > 0.0)) throw std::domain_error("weight must be positive");
  const ThetaVector t = structural_theta(ms, theta);
  double cl = t.cl_f, v = t.v_f, ka = t.ka;
  const std::size_t offset = first_covariate_index(ms.structure);
  for (std::size_t k = 0; k < ms.covariates.size(); ++k) {
    const auto& effect = ms.covariates[k];
    const double factor = effect.factor(theta[offset + k], cov);
    switch (effect.parameter) {
      case PkParam::cl: cl *= factor; break;
      case PkParam::v: v *= factor; break;
      case PkParam::ka: ka *= factor; break;
    }
  }
  auto eta_at = [&](std::size_t i) { return i < eta.size() ? eta[i] : 0.0; };
  IndividualParams p;
  p.cl = cl * std::exp(eta_at(0));
  p.v = v * std::exp(eta_at(1));
  const double third = ka * std::exp(eta_at(2));
  if (ms.structure == Structure::one_compartment_zero_order) p.d1 = third;
  else p.ka = third;
  p.f = cov.volgrp == VolumeGroup::high_volume ? t.f_large : 1.0;
  p.q = t.q_f;
  p.v2 = t.v2_f;
  return p;
}

IndividualParams individual_params(const ThetaVector& theta, double wt_exponent, const Covariates& cov,
                                   std::span<const double> eta) {
  const std::array<double, 5> flat{theta.cl_f, theta.v_f, theta.ka, theta.f_large, wt_exponent};
  return individual_params(final_model_spec(), flat, cov, eta);
}

double concentration(double t, double dose, const IndividualParams& p) {
  if (t <= 0.0 || dose == 0.0) return 0.0;
  const double ke = p.ke();
  return p.f * dose * p.ka / p.v * exp_difference_ratio(ke, p.ka, t);
}

double concentration(Structure s, double t, double dose, const IndividualParams& p) {
  switch (s) {
    case Structure::one_compartment_first_order: return concentration(t, dose, p);
    case Structure::one_compartment_zero_order: {
      if (t <= 0.0 || dose == 0.0) return 0.0;
      const double ke = p.ke();
      const double rate = p.f * dose / p.d1;
      const double tin = std::min(t, p.d1);
      const double at_end = -rate / p.cl * std::expm1(-ke * tin);
      return t <= p.d1 ? at_end : at_end * std::exp(-ke * (t - p.d1));
    }
    case Structure::two_compartment_first_order: {
      if (t <= 0.0 || dose == 0.0) return 0.0;
      const double k10 = p.cl / p.v, k12 = p.q / p.v, k21 = p.q / p.v2;
      const double sum = k10 + k12 + k21;
      const double disc = std::sqrt(sum * sum - 4.0 * k10 * k21);
      const double alpha = 0.5 * (sum + disc), beta = 0.5 * (sum - disc);
      const double ka = p.ka;
      const double a = (k21 - alpha) / ((ka - alpha) * (beta - alpha));
      const double b = (k21 - beta) / ((ka - beta) * (alpha - beta));
      const double c = (k21 - ka) / ((alpha - ka) * (beta - ka));
      return p.f * dose * ka / p.v *
             (a * std::exp(-alpha * t) + b * std::exp(-beta * t) + c * std::exp(-ka * t));
    }
  }
  return 0.0;
}

double unbound_concentration_ugl(double total_mgl, double fu) { return total_mgl * fu * 1000.0; }

double time_of_peak(const IndividualParams& p) {
  const double ke = p.ke();
  const double d = p.ka - ke;
  if (std::abs(d) < kDegenerateRateTol * ke) return 1.0 / ke;
  return std::log1p(d / ke) / d;
}

ExposureMetrics exposure_metrics(const IndividualParams& p, double dose, double fu) {
  return exposure_metrics(Structure::one_compartment_first_order, p, dose, fu);
}

ExposureMetrics exposure_metrics(Structure s, const IndividualParams& p, double dose, double fu) {
  require_positive(p.cl, "CL");
  require_positive(p.v, "V");
  require_positive(p.f, "F");
  require_positive(dose, "dose");
  if (s == Structure::one_compartment_zero_order) require_positive(p.d1, "D1");
  else require_positive(p.ka, "KA");
  if (s == Structure::two_compartment_first_order) {
    require_positive(p.q, "Q");
    require_positive(p.v2, "V2");
  }
  if (fu < 0.0 || fu > 1.0) throw std::domain_error("unbound fraction must lie in [0, 1]");

  ExposureMetrics m;
  m.auc = p.f * dose / p.cl;
  switch (s) {
    case Structure::one_compartment_first_order: m.tmax = time_of_peak(p); break;
    case Structure::one_compartment_zero_order: m.tmax = p.d1; break;
    case Structure::two_compartment_first_order: m.tmax = peak_by_search(s, p); break;
  }
  m.cmax = concentration(s, m.tmax, dose, p);
  m.cu_max = unbound_concentration_ugl(m.cmax, fu);
  return m;
}

}  // namespace popk
