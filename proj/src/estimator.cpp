#include "popk/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "popk/diagnostics.hpp"
#include "popk/optimizer.hpp"
#include "popk/parallel.hpp"

namespace popk {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kJacobianStep = 1e-5;

std::vector<std::size_t> active_etas(const ParameterSet& p) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < p.omega.size(); ++k) {
    if (p.omega[k] > 0.0) idx.push_back(k);
  }
  return idx;
}

void check_shapes(const PopulationModel& model, const ParameterSet& p) {
  if (p.theta.size() != model.n_theta()) {
    throw std::invalid_argument(
        fmt::format("theta has {} entries, model expects {}", p.theta.size(), model.n_theta()));
  }
  if (p.omega.size() != model.n_eta()) {
    throw std::invalid_argument(
        fmt::format("omega has {} entries, model expects {}", p.omega.size(), model.n_eta()));
  }
  if (p.sigma.model != model.error_model()) {
    throw std::invalid_argument("sigma error model does not match the model's error model");
  }
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Predictions at eta and central-difference Jacobian over the active etas.
struct Sensitivity {
  Eigen::VectorXd f;
  Eigen::MatrixXd J;  // n_obs x n_active
  bool ok = true;
};

Sensitivity sensitivity(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                        std::span<const double> eta, std::span<const std::size_t> active) {
  const auto n = static_cast<Eigen::Index>(s.n_obs());
  Sensitivity out;
  if (model.predict_with_jacobian(s, p.theta, eta, active, out.f, out.J)) return out;
  out.f.resize(n);
  out.J.resize(n, static_cast<Eigen::Index>(active.size()));
  model.predict(s, p.theta, eta, {out.f.data(), s.n_obs()});
  out.ok = all_finite({out.f.data(), s.n_obs()});
  std::vector<double> e(eta.begin(), eta.end());
  Eigen::VectorXd fp(n), fm(n);
  for (std::size_t c = 0; c < active.size(); ++c) {
    const std::size_t k = active[c];
    const double h = kJacobianStep * std::max(1.0, std::abs(eta[k]));
    e[k] = eta[k] + h;
    model.predict(s, p.theta, e, {fp.data(), s.n_obs()});
    e[k] = eta[k] - h;
    model.predict(s, p.theta, e, {fm.data(), s.n_obs()});
    e[k] = eta[k];
    out.J.col(static_cast<Eigen::Index>(c)) = (fp - fm) / (2.0 * h);
  }
  out.ok = out.ok && out.J.allFinite();
  return out;
}

std::vector<std::vector<double>> ebes_of(const OfvResult& r) {
  std::vector<std::vector<double>> out;
  out.reserve(r.subjects.size());
  for (const auto& s : r.subjects) out.push_back(s.ebe.eta);
  return out;
}

}  // namespace

SubjectData subject_data(const Subject& s) {
  SubjectData d;
  d.id = s.id;
  d.cov = s.cov;
  for (const auto& r : s.records) {
    if (r.is_dose()) {
      d.dose_times.push_back(r.time);
      d.doses.push_back(*r.amt);
    } else if (r.usable()) {
      d.times.push_back(r.time);
      d.y.push_back(*r.dv);
    }
  }
  return d;
}

std::vector<SubjectData> subject_data(const StudyDataset& ds) {
  std::vector<SubjectData> out;
  out.reserve(ds.subjects.size());
  for (const auto& s : ds.subjects) out.push_back(subject_data(s));
  return out;
}

PkModel::PkModel(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  theta_names_ = spec_.theta_names();
  eta_names_ = spec_.eta_names();
  fixed = spec_.fixed;
}

bool PkModel::theta_positive(std::size_t index) const { return spec_.theta_positive(index); }

void PkModel::predict(const SubjectData& s, std::span<const double> theta, std::span<const double> eta,
                      std::span<double> out) const {
  const IndividualParams ip = individual_params(spec_, theta, s.cov, eta);
  const bool valid = ip.cl > 0 && ip.v > 0 && ip.f > 0 &&
                     (spec_.structure == Structure::one_compartment_zero_order ? ip.d1 > 0 : ip.ka > 0) &&
                     std::isfinite(ip.cl + ip.v + ip.ka + ip.f + ip.d1);
  for (std::size_t j = 0; j < s.times.size(); ++j) {
    if (!valid) {
      out[j] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    double c = 0.0;
    for (std::size_t d = 0; d < s.doses.size(); ++d) {
      if (s.times[j] > s.dose_times[d]) {
        c += concentration(spec_.structure, s.times[j] - s.dose_times[d], s.doses[d], ip);
      }
    }
    out[j] = c;
  }
}

bool PkModel::predict_with_jacobian(const SubjectData& s, std::span<const double> theta,
                                    std::span<const double> eta, std::span<const std::size_t> active,
                                    Eigen::VectorXd& f, Eigen::MatrixXd& J) const {
  if (spec_.structure != Structure::one_compartment_first_order) return false;
  const IndividualParams ip = individual_params(spec_, theta, s.cov, eta);
  if (!(ip.cl > 0 && ip.v > 0 && ip.ka > 0 && ip.f > 0) || !std::isfinite(ip.cl + ip.v + ip.ka + ip.f)) return false;
  const double a = ip.ke(), b = ip.ka, d = b - a;
  const auto n = static_cast<Eigen::Index>(s.n_obs());
  f.setZero(n);
  J.setZero(n, static_cast<Eigen::Index>(active.size()));
  // C = A R with A = F dose ka / V and R = (exp(-a t) - exp(-b t)) / (b - a);
  // eta 0, 1, 2 scale CL, V and KA exponentially.
  for (Eigen::Index j = 0; j < n; ++j) {
    const double tj = s.times[static_cast<std::size_t>(j)];
    for (std::size_t k = 0; k < s.doses.size(); ++k) {
      const double t = tj - s.dose_times[k];
      if (t <= 0.0 || s.doses[k] == 0.0) continue;
      if (std::abs(d) * t < 1e-2) return false;
      const double ea = std::exp(-a * t), eb = std::exp(-b * t);
      const double amp = ip.f * s.doses[k] * b / ip.v;
      const double r = (ea - eb) / d;
      const double dr_da = (r - t * ea) / d;
      const double dr_db = (t * eb - r) / d;
      const double c = amp * r;
      f[j] += c;
      for (std::size_t col = 0; col < active.size(); ++col) {
        double g = 0.0;
        switch (active[col]) {
          case 0: g = amp * a * dr_da; break;
          case 1: g = -c - amp * a * dr_da; break;
          case 2: g = c + amp * b * dr_db; break;
          default: return false;
        }
        J(j, static_cast<Eigen::Index>(col)) += g;
      }
    }
  }
  return f.allFinite() && J.allFinite();
}

void LinearRandomEffectModel::predict(const SubjectData& s, std::span<const double> theta,
                                      std::span<const double> eta, std::span<double> out) const {
  for (std::size_t j = 0; j < s.n_obs(); ++j) out[j] = theta[0] + eta[0];
}

double inner_objective(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                       std::span<const double> eta) {
  std::vector<double> f(s.n_obs());
  model.predict(s, p.theta, eta, f);
  double obj = 0.0;
  for (std::size_t j = 0; j < s.n_obs(); ++j) {
    if (!std::isfinite(f[j])) return kInf;
    const double g = error_sd(f[j], p.sigma);
    const double r = s.y[j] - f[j];
    obj += r * r / (g * g) + std::log(g * g);
  }
  for (std::size_t k = 0; k < p.omega.size(); ++k) {
    if (p.omega[k] > 0.0) obj += eta[k] * eta[k] / p.omega[k] + std::log(p.omega[k]);
  }
  return std::isfinite(obj) ? obj : kInf;
}

EbeResult estimate_ebe(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                       const EbeOptions& opts, std::span<const double> warm) {
  EbeResult best;
  best.eta.assign(model.n_eta(), 0.0);
  const auto active = active_etas(p);
  if (s.n_obs() == 0 || active.empty()) {
    best.objective = inner_objective(model, s, p, best.eta);
    return best;
  }

  const std::size_t n_eta = best.eta.size();
  auto expand = [&](const Eigen::VectorXd& z) {
    std::vector<double> eta(n_eta, 0.0);
    for (std::size_t c = 0; c < active.size(); ++c) eta[active[c]] = z[static_cast<Eigen::Index>(c)];
    return eta;
  };
  const detail::ObjectiveFn objective = [&](const Eigen::VectorXd& z) {
    return inner_objective(model, s, p, expand(z));
  };
  // Analytic chain rule around a finite-difference Jacobian of the predictions.
  auto derivatives = [&](const Eigen::VectorXd& z, Eigen::VectorXd* grad, Eigen::MatrixXd* info) {
    const auto eta = expand(z);
    const Sensitivity sens = sensitivity(model, s, p, eta, active);
    const auto n = static_cast<Eigen::Index>(s.n_obs());
    Eigen::VectorXd dobj(n), w(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double f = sens.f[j];
      const double g = error_sd(f, p.sigma);
      const double gp = error_sd_slope(f, p.sigma);
      const double r = s.y[static_cast<std::size_t>(j)] - f;
      dobj[j] = -2.0 * r / (g * g) - 2.0 * r * r * gp / (g * g * g) + 2.0 * gp / g;
      w[j] = 2.0 / (g * g) + 4.0 * gp * gp / (g * g);
    }
    if (grad) {
      *grad = sens.J.transpose() * dobj;
      for (std::size_t c = 0; c < active.size(); ++c) {
        (*grad)[static_cast<Eigen::Index>(c)] += 2.0 * z[static_cast<Eigen::Index>(c)] / p.omega[active[c]];
      }
      if (!sens.ok) grad->setConstant(std::numeric_limits<double>::quiet_NaN());
    }
    if (info) {
      *info = sens.J.transpose() * w.asDiagonal() * sens.J;
      for (std::size_t c = 0; c < active.size(); ++c) {
        const auto i = static_cast<Eigen::Index>(c);
        (*info)(i, i) += 2.0 / p.omega[active[c]];
      }
    }
  };
  const detail::GradientFn gradient = [&](const Eigen::VectorXd& z, double, const detail::ObjectiveFn&) {
    Eigen::VectorXd g;
    derivatives(z, &g, nullptr);
    return g;
  };

  detail::BfgsOptions bo;
  bo.max_iterations = opts.max_iterations;
  bo.gradient_tol = opts.gradient_tol;
  bo.step_tol = opts.step_tol;
  bo.max_step = 2.0;
  bo.stall_gradient_tol = 1e-6;

  const auto na = static_cast<Eigen::Index>(active.size());
  std::vector<Eigen::VectorXd> starts;
  if (!warm.empty()) {
    if (warm.size() != model.n_eta()) throw std::invalid_argument("warm start has the wrong length");
    Eigen::VectorXd z(na);
    for (std::size_t c = 0; c < active.size(); ++c) z[static_cast<Eigen::Index>(c)] = warm[active[c]];
    if (z.allFinite()) starts.push_back(z);
  }
  if (starts.empty() || (opts.multi_start && !starts.front().isZero(0.0))) {
    starts.push_back(Eigen::VectorXd::Zero(na));
  }
  if (opts.multi_start) {
    Eigen::VectorXd z(na);
    for (std::size_t c = 0; c < active.size(); ++c) {
      z[static_cast<Eigen::Index>(c)] = 0.5 * std::sqrt(p.omega[active[c]]);
    }
    starts.push_back(z);
  }

  bool have = false;
  for (const auto& z0 : starts) {
    Eigen::MatrixXd info;
    derivatives(z0, nullptr, &info);
    if (!info.allFinite()) info = Eigen::MatrixXd();
    const auto r = detail::minimize_bfgs(objective, gradient, z0, bo, info);
    if (!std::isfinite(r.f)) continue;
    if (!have || r.f < best.objective) {
      best.eta = expand(r.x);
      best.objective = r.f;
      best.converged = r.converged;
      best.iterations = r.iterations;
      have = true;
    }
  }
  if (!have) {
    best.eta.assign(model.n_eta(), 0.0);
    best.objective = kInf;
    best.converged = false;
  }
  return best;
}

Linearization linearize(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                        std::span<const double> eta_hat) {
  const auto active = active_etas(p);
  const Sensitivity sens = sensitivity(model, s, p, eta_hat, active);
  const auto n = static_cast<Eigen::Index>(s.n_obs());
  const auto neta = static_cast<Eigen::Index>(model.n_eta());
  Linearization lin;
  lin.f = sens.f;
  lin.G = Eigen::MatrixXd::Zero(n, neta);
  for (std::size_t c = 0; c < active.size(); ++c) {
    lin.G.col(static_cast<Eigen::Index>(active[c])) = sens.J.col(static_cast<Eigen::Index>(c));
  }
  lin.g.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) lin.g[j] = error_sd(lin.f[j], p.sigma);
  Eigen::VectorXd eta(neta);
  for (Eigen::Index k = 0; k < neta; ++k) eta[k] = eta_hat[static_cast<std::size_t>(k)];
  Eigen::VectorXd omega(neta);
  for (Eigen::Index k = 0; k < neta; ++k) omega[k] = p.omega[static_cast<std::size_t>(k)];
  const Eigen::Map<const Eigen::VectorXd> y(s.y.data(), n);
  lin.e = y - lin.f + lin.G * eta;
  lin.V = lin.G * omega.asDiagonal() * lin.G.transpose();
  lin.V.diagonal() += lin.g.cwiseAbs2();
  return lin;
}

SubjectOfv subject_ofv(const PopulationModel& model, const SubjectData& s, const ParameterSet& p,
                       const EbeOptions& opts, std::span<const double> warm) {
  SubjectOfv out;
  out.ebe = estimate_ebe(model, s, p, opts, warm);
  if (s.n_obs() == 0) return out;
  if (!std::isfinite(out.ebe.objective)) {
    out.ofv = kInf;
    return out;
  }
  const Linearization lin = linearize(model, s, p, out.ebe.eta);
  if (!lin.V.allFinite() || !lin.e.allFinite()) {
    out.ofv = kInf;
    return out;
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(lin.V);
  if (llt.info() != Eigen::Success) {
    out.ofv = kInf;
    return out;
  }
  const Eigen::MatrixXd L = llt.matrixL();
  const Eigen::VectorXd w = llt.matrixL().solve(lin.e);
  out.ofv = 2.0 * L.diagonal().array().log().sum() + w.squaredNorm();
  if (!std::isfinite(out.ofv)) out.ofv = kInf;
  return out;
}

bool OfvResult::ok() const { return std::isfinite(ofv); }

OfvResult foce_ofv(const PopulationModel& model, std::span<const SubjectData> data, const ParameterSet& p,
                   const ExecutionOptions& exec, const EbeOptions& ebe,
                   std::span<const std::vector<double>> warm) {
  check_shapes(model, p);
  if (!warm.empty() && warm.size() != data.size()) {
    throw std::invalid_argument("warm starts must cover every subject");
  }
  OfvResult out;
  out.subjects.resize(data.size());
  parallel_for(data.size(), exec.threads, [&](std::size_t i) {
    out.subjects[i] = subject_ofv(model, data[i], p, ebe, warm.empty() ? std::span<const double>{} : warm[i]);
  });
  double total = 0.0;
  for (const auto& s : out.subjects) total += s.ofv;
  out.ofv = std::isfinite(total) ? total : kInf;
  return out;
}

double foce_ofv(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& p,
                const ExecutionOptions& exec) {
  const PkModel model(ms);
  const auto data = subject_data(ds);
  return foce_ofv(model, data, p, exec).ofv;
}

ParameterTransform::ParameterTransform(const PopulationModel& model, const ParameterSet& reference)
    : reference_(reference) {
  check_shapes(model, reference);
  validate(reference.sigma);
  const auto theta_names = model.theta_names();
  const auto eta_names = model.eta_names();
  for (std::size_t i = 0; i < theta_names.size(); ++i) {
    const bool positive = model.theta_positive(i);
    if (positive && !(reference.theta[i] > 0.0)) {
      throw std::invalid_argument(fmt::format("{} must be positive (got {})", theta_names[i], reference.theta[i]));
    }
    if (!std::isfinite(reference.theta[i])) {
      throw std::invalid_argument(fmt::format("{} is not finite", theta_names[i]));
    }
    if (model.fixed.count(theta_names[i])) continue;
    entries_.push_back({Slot::theta, i, positive});
    names_.push_back(theta_names[i]);
  }
  for (std::size_t k = 0; k < eta_names.size(); ++k) {
    const std::string name = "OMEGA_" + eta_names[k];
    if (!(reference.omega[k] >= 0.0)) throw std::invalid_argument(name + " must be >= 0");
    if (reference.omega[k] == 0.0 || model.fixed.count(name)) continue;
    entries_.push_back({Slot::omega, k, true});
    names_.push_back(name);
  }
  const auto& sg = reference.sigma;
  if (sg.model != ErrorModel::additive && !model.fixed.count("SIGMA_PROP")) {
    entries_.push_back({Slot::sigma_prop, 0, true});
    names_.push_back("SIGMA_PROP");
  }
  if (sg.model != ErrorModel::proportional && !model.fixed.count("SIGMA_ADD")) {
    entries_.push_back({Slot::sigma_add, 0, true});
    names_.push_back("SIGMA_ADD");
  }
}

bool ParameterTransform::log_scale(std::size_t i) const { return entries_.at(i).log; }

double ParameterTransform::natural_value(const ParameterSet& p, std::size_t i) const {
  const Entry& e = entries_.at(i);
  switch (e.slot) {
    case Slot::theta: return p.theta[e.index];
    case Slot::omega: return p.omega[e.index];
    case Slot::sigma_prop: return p.sigma.prop;
    case Slot::sigma_add: return p.sigma.add;
  }
  return 0.0;
}

Eigen::VectorXd ParameterTransform::to_vector(const ParameterSet& p) const {
  Eigen::VectorXd x(static_cast<Eigen::Index>(entries_.size()));
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const double v = natural_value(p, i);
    x[static_cast<Eigen::Index>(i)] = entries_[i].log ? std::log(v) : v;
  }
  return x;
}

ParameterSet ParameterTransform::from_vector(const Eigen::VectorXd& x) const {
  ParameterSet p = reference_;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const double u = x[static_cast<Eigen::Index>(i)];
    const double v = entries_[i].log ? std::exp(u) : u;
    switch (entries_[i].slot) {
      case Slot::theta: p.theta[entries_[i].index] = v; break;
      case Slot::omega: p.omega[entries_[i].index] = v; break;
      case Slot::sigma_prop: p.sigma.prop = v; break;
      case Slot::sigma_add: p.sigma.add = v; break;
    }
  }
  return p;
}

std::vector<ParameterName> parameter_names(const PopulationModel& model, const ParameterSet& p) {
  std::vector<ParameterName> out;
  for (const auto& n : model.theta_names()) out.push_back({n, !model.fixed.count(n)});
  const auto etas = model.eta_names();
  for (std::size_t k = 0; k < etas.size(); ++k) {
    const std::string n = "OMEGA_" + etas[k];
    out.push_back({n, !model.fixed.count(n) && p.omega.at(k) > 0.0});
  }
  if (p.sigma.model != ErrorModel::additive) out.push_back({"SIGMA_PROP", !model.fixed.count("SIGMA_PROP")});
  if (p.sigma.model != ErrorModel::proportional) out.push_back({"SIGMA_ADD", !model.fixed.count("SIGMA_ADD")});
  return out;
}

double parameter_value(const PopulationModel& model, const ParameterSet& p, std::string_view name) {
  const auto thetas = model.theta_names();
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    if (thetas[i] == name) return p.theta.at(i);
  }
  const auto etas = model.eta_names();
  for (std::size_t k = 0; k < etas.size(); ++k) {
    if ("OMEGA_" + etas[k] == name) return p.omega.at(k);
  }
  if (name == "SIGMA_PROP") return p.sigma.prop;
  if (name == "SIGMA_ADD") return p.sigma.add;
  throw std::invalid_argument(fmt::format("unknown parameter '{}'", name));
}

std::optional<double> ShrinkageValue::clamped() const {
  if (!raw) return std::nullopt;
  return std::clamp(*raw, 0.0, 1.0);
}

ParameterEstimate make_estimate_row(std::string name, double estimate, double se) {
  ParameterEstimate row;
  row.name = std::move(name);
  row.estimate = estimate;
  row.se = se;
  if (estimate != 0.0) row.rse_percent = 100.0 * se / std::abs(estimate);
  row.ci_low = estimate - 1.96 * se;
  row.ci_high = estimate + 1.96 * se;
  return row;
}

StandardErrors standard_errors(const PopulationModel& model, std::span<const SubjectData> data,
                               const ParameterSet& estimate, const FitOptions& opts) {
  StandardErrors out;
  const ParameterTransform tr(model, estimate);
  const Eigen::VectorXd x = tr.to_vector(estimate);
  const auto anchor = ebes_of(foce_ofv(model, data, estimate, opts.exec, opts.ebe));
  EbeOptions warm_opts = opts.ebe;
  warm_opts.multi_start = false;
  const detail::ObjectiveFn objective = [&](const Eigen::VectorXd& v) {
    return foce_ofv(model, data, tr.from_vector(v), opts.exec, warm_opts, anchor).ofv;
  };
  Eigen::MatrixXd h = detail::central_hessian(objective, x, opts.hessian_step);
  h = 0.5 * (h + h.transpose());
  if (!h.allFinite()) {
    out.message = "Hessian is not finite";
    return out;
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(h);
  if (llt.info() != Eigen::Success) {
    out.message = "Hessian is not positive definite";
    return out;
  }
  const auto n = x.size();
  out.covariance = 2.0 * llt.solve(Eigen::MatrixXd::Identity(n, n));
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const double value = tr.natural_value(estimate, i);
    const double se_t = std::sqrt(out.covariance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)));
    const double se = tr.log_scale(i) ? std::abs(value) * se_t : se_t;
    out.rows.push_back(make_estimate_row(tr.names()[i], value, se));
  }
  out.ok = true;
  return out;
}

FitResult fit(const PopulationModel& model, std::span<const SubjectData> data, const ParameterSet& init,
              const FitOptions& opts) {
  const ParameterTransform tr(model, init);
  // EBEs at the latest accepted iterate, found with the full multi-start.
  // Trial and finite-difference points start their inner search there.
  std::vector<std::vector<double>> anchor;
  int anchor_evals = 0;
  EbeOptions warm_opts = opts.ebe;
  warm_opts.multi_start = false;
  const detail::ObjectiveFn objective = [&](const Eigen::VectorXd& v) {
    if (anchor.empty()) return foce_ofv(model, data, tr.from_vector(v), opts.exec, opts.ebe).ofv;
    return foce_ofv(model, data, tr.from_vector(v), opts.exec, warm_opts, anchor).ofv;
  };
  const detail::GradientFn gradient = [&](const Eigen::VectorXd& v, double, const detail::ObjectiveFn& f) {
    anchor = ebes_of(foce_ofv(model, data, tr.from_vector(v), opts.exec, opts.ebe, anchor));
    ++anchor_evals;
    return detail::central_gradient(f, v, opts.gradient_step);
  };
  const Eigen::VectorXd x0 = tr.to_vector(init);
  if (!std::isfinite(objective(x0))) {
    throw std::invalid_argument("objective function is not finite at the initial estimates");
  }

  detail::BfgsOptions bo;
  bo.max_iterations = 100000;
  bo.max_evaluations = opts.max_evaluations;
  bo.gradient_tol = opts.gradient_tol;
  bo.f_rel_tol = opts.ofv_rel_tol;
  bo.step_tol = kInf;
  bo.max_step = 1.0;
  bo.stall_gradient_tol = 10.0 * opts.gradient_tol;
  bo.stall_f_rel_tol = opts.ofv_rel_tol;
  const auto r = detail::minimize_bfgs(objective, gradient, x0, bo);

  FitResult res;
  res.params = tr.from_vector(r.x);
  res.converged = r.converged;
  res.iterations = r.iterations;
  res.n_function_evals = r.evaluations + anchor_evals + 2;
  res.message = r.message;

  const OfvResult final_ofv = foce_ofv(model, data, res.params, opts.exec, opts.ebe, anchor);
  res.ofv = final_ofv.ofv;
  for (std::size_t i = 0; i < data.size(); ++i) {
    res.subject_ids.push_back(data[i].id);
    res.ebes.push_back(final_ofv.subjects[i].ebe.eta);
    res.ebe_flagged.push_back(!final_ofv.subjects[i].ebe.converged);
  }
  const auto rows = predictions(model, data, res);
  res.shrinkage = shrinkage(res, rows);
  if (opts.compute_standard_errors && res.converged) {
    res.standard_errors = standard_errors(model, data, res.params, opts);
  }
  return res;
}

FitResult fit(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& init, const FitOptions& opts) {
  const PkModel model(ms);
  const auto data = subject_data(ds);
  return fit(model, data, init, opts);
}

double covariate_reference(const StudyDataset& ds, Covariate c) {
  if (c == Covariate::wt) return kReferenceWeight;
  if (is_categorical(c)) return 0.0;
  std::vector<double> values;
  for (const auto& s : ds.subjects) {
    if (const auto v = s.cov.value(c)) values.push_back(*v);
  }
  if (values.empty()) throw std::invalid_argument(fmt::format("no values for covariate {}", to_string(c)));
  return quantile(std::move(values), 0.5);
}

std::pair<ModelSpec, ParameterSet> add_covariate(const ModelSpec& ms, const ParameterSet& p,
                                                 const CovariateEffect& effect) {
  ModelSpec out = ms;
  ParameterSet params = p;
  const std::size_t index = ms.n_theta();
  out.covariates.push_back(effect);
  out.validate();
  params.theta.insert(params.theta.begin() + static_cast<std::ptrdiff_t>(index), 0.0);
  return {out, params};
}

std::pair<ModelSpec, ParameterSet> remove_covariate(const ModelSpec& ms, const ParameterSet& p,
                                                    std::size_t effect_index) {
  if (effect_index >= ms.covariates.size()) throw std::out_of_range("covariate effect index");
  const std::size_t theta_index = ms.theta_index(ms.covariates[effect_index].name());
  ModelSpec out = ms;
  ParameterSet params = p;
  out.fixed.erase(ms.covariates[effect_index].name());
  out.covariates.erase(out.covariates.begin() + static_cast<std::ptrdiff_t>(effect_index));
  params.theta.erase(params.theta.begin() + static_cast<std::ptrdiff_t>(theta_index));
  return {out, params};
}

CovariateSearchResult covariate_search(const StudyDataset& ds, const ModelSpec& base,
                                       const ParameterSet& base_init,
                                       std::span<const CovariateCandidate> candidates,
                                       const CovariateSearchOptions& opts) {
  const auto data = subject_data(ds);
  auto run = [&](const ModelSpec& ms, const ParameterSet& init, CovariateSearchStep& step) -> std::optional<FitResult> {
    FitOptions fo = opts.fit;
    fo.compute_standard_errors = false;
    try {
      const PkModel model(ms);
      FitResult r = fit(model, data, init, fo);
      step.ofv = r.ofv;
      step.fit_ok = r.converged && std::isfinite(r.ofv);
      if (!step.fit_ok) step.note = "minimization unsuccessful: " + r.message;
      if (step.fit_ok) return r;
    } catch (const std::exception& e) {
      step.fit_ok = false;
      step.note = e.what();
    }
    return std::nullopt;
  };

  CovariateSearchResult res;
  res.model = base;
  {
    CovariateSearchStep base_step;
    const auto base_fit = run(base, base_init, base_step);
    if (!base_fit) throw std::runtime_error("base model fit failed: " + base_step.note);
    res.params = base_fit->params;
    res.ofv = base_fit->ofv;
  }
  if (candidates.empty()) return res;

  auto already_in = [&](const CovariateCandidate& c) {
    return std::any_of(res.model.covariates.begin(), res.model.covariates.end(), [&](const CovariateEffect& e) {
      return e.parameter == c.parameter && e.covariate == c.covariate;
    });
  };

  std::vector<CovariateCandidate> remaining;
  for (const auto& c : candidates) {
    if (!already_in(c)) remaining.push_back(c);
  }

  for (int round = 1; !remaining.empty(); ++round) {
    std::optional<std::size_t> best_step;
    std::optional<FitResult> best_fit;
    std::size_t best_candidate = 0;
    for (std::size_t ci = 0; ci < remaining.size(); ++ci) {
      const auto& cand = remaining[ci];
      for (CovariateForm form : {CovariateForm::linear, CovariateForm::power, CovariateForm::exponential}) {
        CovariateSearchStep step;
        step.phase = "forward";
        step.round = round;
        step.effect = {cand.parameter, cand.covariate, form, covariate_reference(ds, cand.covariate)};
        if (form == CovariateForm::power && is_categorical(cand.covariate)) {
          step.note = "power form undefined for a categorical covariate";
          res.trace.push_back(step);
          continue;
        }
        const auto [ms, init] = add_covariate(res.model, res.params, step.effect);
        auto r = run(ms, init, step);
        if (r) {
          step.delta_ofv = res.ofv - r->ofv;
          if (!best_step || step.delta_ofv > res.trace[*best_step].delta_ofv) {
            best_step = res.trace.size();
            best_fit = std::move(r);
            best_candidate = ci;
          }
        }
        res.trace.push_back(step);
      }
    }
    if (!best_step || res.trace[*best_step].delta_ofv < opts.forward_threshold) break;
    res.trace[*best_step].selected = true;
    res.model.covariates.push_back(res.trace[*best_step].effect);
    res.params = best_fit->params;
    res.ofv = best_fit->ofv;
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best_candidate));
  }

  for (int round = 1; !res.model.covariates.empty(); ++round) {
    std::optional<std::size_t> weakest_step;
    std::optional<FitResult> weakest_fit;
    std::size_t weakest_index = 0;
    for (std::size_t k = 0; k < res.model.covariates.size(); ++k) {
      CovariateSearchStep step;
      step.phase = "backward";
      step.round = round;
      step.effect = res.model.covariates[k];
      const auto [ms, init] = remove_covariate(res.model, res.params, k);
      auto r = run(ms, init, step);
      if (r) {
        step.delta_ofv = r->ofv - res.ofv;
        if (!weakest_step || step.delta_ofv < res.trace[*weakest_step].delta_ofv) {
          weakest_step = res.trace.size();
          weakest_fit = std::move(r);
          weakest_index = k;
        }
      }
      res.trace.push_back(step);
    }
    if (!weakest_step || res.trace[*weakest_step].delta_ofv >= opts.backward_threshold) break;
    res.trace[*weakest_step].selected = true;
    res.model = remove_covariate(res.model, res.params, weakest_index).first;
    res.params = weakest_fit->params;
    res.ofv = weakest_fit->ofv;
  }
  return res;
}

}  // namespace popk
