#pragma once

#include <array>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "popk/dataset.hpp"

namespace popk {

// Structural alternatives. Only the one-compartment first-order model takes
// covariate effects; the other two exist for structural screening.
enum class Structure {
  one_compartment_first_order,
  one_compartment_zero_order,
  two_compartment_first_order,
};

enum class ErrorModel { additive, proportional, combined };

// Parameters that carry a random effect and can take covariate effects.
enum class PkParam { cl, v, ka };

enum class CovariateForm { linear, power, exponential };

std::string_view to_string(Structure s);
std::string_view to_string(ErrorModel e);
std::string_view to_string(PkParam p);
std::string_view to_string(CovariateForm f);
Structure structure_from_string(std::string_view s);
ErrorModel error_model_from_string(std::string_view s);
PkParam pk_param_from_string(std::string_view s);
CovariateForm covariate_form_from_string(std::string_view s);

inline constexpr double kReferenceWeight = 15.0;  // kg
inline constexpr double kResidualSdFloor = 1e-10;  // mg/L
inline constexpr double kDegenerateRateTol = 1e-8;
inline constexpr double kDefaultUnboundFraction = 0.01;

struct SigmaParams {
  ErrorModel model = ErrorModel::proportional;
  double prop = 0.0;  // CV
  double add = 0.0;   // mg/L

  bool operator==(const SigmaParams&) const = default;
};

void validate(const SigmaParams& s);

// Residual standard deviation at a given prediction, floored at 1e-10 mg/L.
double error_sd(double pred, const SigmaParams& sigma);
// d(error_sd)/d(pred); zero where the floor is active.
double error_sd_slope(double pred, const SigmaParams& sigma);

struct CovariateEffect {
  PkParam parameter = PkParam::cl;
  Covariate covariate = Covariate::wt;
  CovariateForm form = CovariateForm::power;
  double reference = kReferenceWeight;

  // Coefficient name in the theta vector, e.g. "CL_WT_POWER".
  std::string name() const;
  // Multiplier applied to the typical value. A missing covariate value
  // (optional AAG) yields 1.
  double factor(double coefficient, const Covariates& cov) const;
  bool operator==(const CovariateEffect&) const = default;
};

struct ModelSpec {
  Structure structure = Structure::one_compartment_first_order;
  ErrorModel error_model = ErrorModel::proportional;
  std::vector<CovariateEffect> covariates;
  // Parameter names held at their initial value, e.g. "F_LARGE", "OMEGA_KA".
  // F for the low-volume group is always 1 and is not a parameter.
  std::set<std::string> fixed;

  std::vector<std::string> theta_names() const;
  std::vector<std::string> eta_names() const;  // "CL","V","KA" (or "D1")
  std::size_t n_theta() const;
  std::size_t theta_index(std::string_view name) const;
  bool theta_positive(std::size_t index) const;
  void validate() const;
};

struct ParameterSet {
  std::vector<double> theta;
  std::vector<double> omega;  // diagonal variances, one per eta
  SigmaParams sigma;

  bool operator==(const ParameterSet&) const = default;
};

// Named view of the structural theta entries.
struct ThetaVector {
  double cl_f = 0.0;     // L/min
  double v_f = 0.0;      // L
  double ka = 0.0;       // 1/min (duration D1 in min for zero-order input)
  double f_large = 1.0;
  double q_f = 0.0;      // L/min, two-compartment only
  double v2_f = 0.0;     // L, two-compartment only
};

ThetaVector structural_theta(const ModelSpec& ms, std::span<const double> theta);

struct IndividualParams {
  double cl = 0.0;  // L/min
  double v = 0.0;   // L
  double ka = 0.0;  // 1/min
  double f = 1.0;
  double d1 = 0.0;  // zero-order input duration, min
  double q = 0.0;   // two-compartment only
  double v2 = 0.0;

  double ke() const { return cl / v; }
};

// Final model from the levobupivacaine fit: one compartment, first-order
// absorption, power weight effect on CL (reference 15 kg), F estimated for
// the high-volume group, proportional error.
ModelSpec final_model_spec();
ParameterSet final_model_parameters();  // 0.15, 14, 0.18, 0.88, 0.87; BSV 41/47/81 %; 14 %
ModelSpec base_model_spec();            // final model without the weight effect
ParameterSet base_model_parameters();

IndividualParams individual_params(const ModelSpec& ms, std::span<const double> theta,
                                   const Covariates& cov, std::span<const double> eta);
// Convenience for the final model layout.
IndividualParams individual_params(const ThetaVector& theta, double wt_exponent,
                                   const Covariates& cov, std::span<const double> eta);

// Concentration t minutes after a single dose given into the depot.
double concentration(double t, double dose, const IndividualParams& p);
double concentration(Structure s, double t, double dose, const IndividualParams& p);

struct ExposureMetrics {
  double auc = 0.0;     // mg*min/L
  double cmax = 0.0;    // mg/L
  double tmax = 0.0;    // min
  double cu_max = 0.0;  // ug/L
};

double unbound_concentration_ugl(double total_mgl, double fu);
double time_of_peak(const IndividualParams& p);
ExposureMetrics exposure_metrics(const IndividualParams& p, double dose,
                                 double fu = kDefaultUnboundFraction);
ExposureMetrics exposure_metrics(Structure s, const IndividualParams& p, double dose,
                                 double fu = kDefaultUnboundFraction);

}  // namespace popk
