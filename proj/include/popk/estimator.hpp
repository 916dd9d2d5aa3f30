#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "popk/dataset.hpp"
#include "popk/model.hpp"

namespace popk {

// Per-subject data in the form the likelihood needs: dosing history and the
// usable (mdv=0) observations only.
struct SubjectData {
  int id = 0;
  Covariates cov;
  std::vector<double> dose_times;
  std::vector<double> doses;
  std::vector<double> times;  // usable observation times
  std::vector<double> y;      // usable observations

  std::size_t n_obs() const { return y.size(); }
};

SubjectData subject_data(const Subject& s);
std::vector<SubjectData> subject_data(const StudyDataset& ds);

// A population model the FOCE machinery can fit: typical parameters theta,
// diagonal random effects eta and a residual error model.
class PopulationModel {
 public:
  virtual ~PopulationModel() = default;

  virtual std::vector<std::string> theta_names() const = 0;
  virtual std::vector<std::string> eta_names() const = 0;
  virtual bool theta_positive(std::size_t index) const = 0;
  virtual ErrorModel error_model() const = 0;
  // Writes one prediction per usable observation of s. May write non-finite
  // values for parameter combinations outside the model's domain.
  virtual void predict(const SubjectData& s, std::span<const double> theta,
                       std::span<const double> eta, std::span<double> out) const = 0;
  // Predictions and their derivatives with respect to the `active` etas, one
  // column each. Returns false when the model has no closed form, in which
  // case callers fall back to finite differences.
  virtual bool predict_with_jacobian(const SubjectData&, std::span<const double>, std::span<const double>,
                                     std::span<const std::size_t>, Eigen::VectorXd&, Eigen::MatrixXd&) const {
    return false;
  }

  std::size_t n_theta() const { return theta_names().size(); }
  std::size_t n_eta() const { return eta_names().size(); }

  // Names held fixed during estimation (theta names, "OMEGA_<eta>",
  // "SIGMA_PROP", "SIGMA_ADD").
  std::set<std::string> fixed;
};

// The PK model described by a ModelSpec.
class PkModel final : public PopulationModel {
 public:
  explicit PkModel(ModelSpec spec);

  std::vector<std::string> theta_names() const override { return theta_names_; }
  std::vector<std::string> eta_names() const override { return eta_names_; }
  bool theta_positive(std::size_t index) const override;
  ErrorModel error_model() const override { return spec_.error_model; }
  void predict(const SubjectData& s, std::span<const double> theta, std::span<const double> eta,
               std::span<double> out) const override;
  bool predict_with_jacobian(const SubjectData& s, std::span<const double> theta, std::span<const double> eta,
                             std::span<const std::size_t> active, Eigen::VectorXd& f,
                             Eigen::MatrixXd& J) const override;

  const ModelSpec& spec() const { return spec_; }

 private:
  ModelSpec spec_;
  std::vector<std::string> theta_names_;
  std::vector<std::string> eta_names_;
};

// y_ij = theta_0 + eta_i + eps_ij with additive error. FOCE is exact for this
// family, which makes it the reference case for the likelihood code.
class LinearRandomEffectModel final : public PopulationModel {
 public:
  std::vector<std::string> theta_names() const override { return {"MU"}; }
  std::vector<std::string> eta_names() const override { return {"MU"}; }
  bool theta_positive(std::size_t) const override { return false; }
  ErrorModel error_model() const override { return ErrorModel::additive; }
  void predict(const SubjectData& s, std::span<const double> theta, std::span<const double> eta,
               std::span<double> out) const override;
};

struct ExecutionOptions {
  int threads = 1;
};

struct EbeOptions {
  int max_iterations = 200;
  double gradient_tol = 1e-8;
  double step_tol = 1e-8;
  bool multi_start = true;
};

// Sum over usable observations of (y - f)^2/g^2 + ln g^2, plus
// eta' Omega^-1 eta + ln|Omega| over active etas. Returns +inf when a
// prediction is not finite.
double inner_objective(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                       std::span<const double> eta);

struct EbeResult {
  std::vector<double> eta;  // full length; inactive etas are 0
  double objective = 0.0;
  bool converged = true;
  int iterations = 0;
};

// Starts: `warm` when given, otherwise eta = 0; with multi_start, eta = 0
// (if not already used) and 0.5 sqrt(omega) are added. The best end point wins.
EbeResult estimate_ebe(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                       const EbeOptions& opts = {}, std::span<const double> warm = {});

// Linearization of one subject's predictions around eta_hat, shared by the
// objective function and CWRES.
struct Linearization {
  Eigen::VectorXd f;  // predictions at eta_hat
  Eigen::MatrixXd G;  // df/deta at eta_hat
  Eigen::VectorXd g;  // residual sd at eta_hat
  Eigen::VectorXd e;  // y - f + G eta_hat
  Eigen::MatrixXd V;  // G Omega G' + diag(g^2)
};

Linearization linearize(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                        std::span<const double> eta_hat);

struct SubjectOfv {
  EbeResult ebe;
  double ofv = 0.0;  // ln|V| + e'V^-1 e; +inf when V is not positive definite
};

SubjectOfv subject_ofv(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                       const EbeOptions& opts = {}, std::span<const double> warm = {});

struct OfvResult {
  double ofv = 0.0;  // n ln(2 pi) omitted
  std::vector<SubjectOfv> subjects;
  bool ok() const;
};

// `warm`, when non-empty, holds one EBE start per subject.
OfvResult foce_ofv(const PopulationModel& model, std::span<const SubjectData> data,
                   const ParameterSet& p, const ExecutionOptions& exec = {},
                   const EbeOptions& ebe = {},
                   std::span<const std::vector<double>> warm = {});
double foce_ofv(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& p,
                const ExecutionOptions& exec = {});

// Maps a ParameterSet onto the unconstrained vector the outer optimizer works
// in: log for positive theta, omega variances and sigma; identity otherwise.
// Fixed parameters and zero omegas are left out.
class ParameterTransform {
 public:
  ParameterTransform(const PopulationModel& model, const ParameterSet& reference);

  std::size_t size() const { return entries_.size(); }
  Eigen::VectorXd to_vector(const ParameterSet& p) const;
  ParameterSet from_vector(const Eigen::VectorXd& x) const;
  const std::vector<std::string>& names() const { return names_; }
  bool log_scale(std::size_t i) const;
  double natural_value(const ParameterSet& p, std::size_t i) const;

 private:
  enum class Slot { theta, omega, sigma_prop, sigma_add };
  struct Entry {
    Slot slot;
    std::size_t index;
    bool log;
  };
  ParameterSet reference_;
  std::vector<Entry> entries_;
  std::vector<std::string> names_;
};

// Every parameter of the model in reporting order, with whether it is
// estimated.
struct ParameterName {
  std::string name;
  bool estimated = false;
};
std::vector<ParameterName> parameter_names(const PopulationModel& model, const ParameterSet& p);
double parameter_value(const PopulationModel& model, const ParameterSet& p, std::string_view name);

struct FitOptions {
  int max_evaluations = 20000;
  double ofv_rel_tol = 1e-6;
  double gradient_tol = 1e-3;
  double gradient_step = 1e-4;
  double hessian_step = 1e-4;
  bool compute_standard_errors = true;
  EbeOptions ebe;
  ExecutionOptions exec;
};

struct ParameterEstimate {
  std::string name;
  double estimate = 0.0;
  bool fixed = false;
  std::optional<double> se;
  std::optional<double> rse_percent;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
};

struct StandardErrors {
  bool ok = false;
  std::string message;
  std::vector<ParameterEstimate> rows;  // estimated parameters only
  Eigen::MatrixXd covariance;           // transformed scale
};

struct ShrinkageValue {
  std::optional<double> raw;  // 1 - SD/expected; missing when undefined
  std::optional<double> clamped() const;
};

struct Shrinkage {
  std::vector<ShrinkageValue> eta;  // one per eta
  ShrinkageValue eps;
};

struct FitResult {
  ParameterSet params;
  double ofv = 0.0;
  std::vector<int> subject_ids;
  std::vector<std::vector<double>> ebes;  // per subject, full eta length
  std::vector<bool> ebe_flagged;          // inner search did not converge
  Shrinkage shrinkage;
  std::optional<StandardErrors> standard_errors;
  bool converged = false;
  int n_function_evals = 0;
  int iterations = 0;
  std::string message;
};

// Minimizes the FOCE objective. Throws std::invalid_argument when the initial
// objective is not finite.
FitResult fit(const PopulationModel& model, std::span<const SubjectData> data,
              const ParameterSet& init, const FitOptions& opts = {});
FitResult fit(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& init,
              const FitOptions& opts = {});

// Central-difference Hessian of the objective in transformed space,
// covariance 2 H^-1, delta-method back-transform.
StandardErrors standard_errors(const PopulationModel& model, std::span<const SubjectData> data,
                               const ParameterSet& estimate, const FitOptions& opts = {});

// Reporting convention: RSE = 100 se/estimate, CI = estimate -/+ 1.96 se.
ParameterEstimate make_estimate_row(std::string name, double estimate, double se);

struct CovariateCandidate {
  PkParam parameter = PkParam::cl;
  Covariate covariate = Covariate::wt;
};

struct CovariateSearchStep {
  std::string phase;  // "forward" or "backward"
  int round = 0;
  CovariateEffect effect;
  bool fit_ok = false;
  double ofv = 0.0;
  double delta_ofv = 0.0;  // reference OFV - candidate OFV (forward), candidate - reference (backward)
  bool selected = false;
  std::string note;
};

struct CovariateSearchOptions {
  double forward_threshold = 3.84;
  double backward_threshold = 3.84;
  FitOptions fit;
};

struct CovariateSearchResult {
  ModelSpec model;
  ParameterSet params;
  double ofv = 0.0;
  std::vector<CovariateSearchStep> trace;
};

// Reference value used for a covariate effect: 15 kg for weight, the dataset
// median for the other continuous covariates, 0 for categorical ones.
double covariate_reference(const StudyDataset& ds, Covariate c);

CovariateSearchResult covariate_search(const StudyDataset& ds, const ModelSpec& base,
                                       const ParameterSet& base_init,
                                       std::span<const CovariateCandidate> candidates,
                                       const CovariateSearchOptions& opts = {});

// Adds (or removes) one covariate coefficient, keeping the remaining theta
// values. A new coefficient starts at 0, which reproduces the parent model.
std::pair<ModelSpec, ParameterSet> add_covariate(const ModelSpec& ms, const ParameterSet& p,
                                                 const CovariateEffect& effect);
std::pair<ModelSpec, ParameterSet> remove_covariate(const ModelSpec& ms, const ParameterSet& p,
                                                    std::size_t effect_index);

}  // namespace popk
