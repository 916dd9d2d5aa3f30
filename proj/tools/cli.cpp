#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "config.hpp"
#include "popk/diagnostics.hpp"
#include "popk/stats.hpp"

#ifndef POPK_VERSION
#define POPK_VERSION "0.0.0"
#endif

namespace popk::cli {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Analysis could not complete; maps to exit status 1.
class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Estimates {
  ModelSpec model;
  ParameterSet params;
};

struct Context {
  Context(std::string cmd, RunConfig c, int n_threads, std::ostream& o, std::ostream& e)
      : command(std::move(cmd)), cfg(std::move(c)), threads(n_threads), out(o), err(e) {}

  std::string command;
  RunConfig cfg;
  fs::path out_dir;
  int threads = 1;
  std::ostream& out;
  std::ostream& err;
  std::optional<StudyDataset> data;
  std::optional<Estimates> estimates;  // from cfg.parameters
  std::string labels_text;
  ordered_json inputs = ordered_json::object();
  std::vector<std::string> artifacts;
  std::vector<std::string> warnings;
};

std::string num(double v) {
  if (!std::isfinite(v)) return ".";
  return fmt::format("{:.10g}", v);
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError(fmt::format("cannot open '{}'", p.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_artifact(Context& ctx, const std::string& name, const std::string& content) {
  std::ofstream f(ctx.out_dir / name, std::ios::binary);
  if (!f) throw AnalysisError(fmt::format("cannot write '{}'", (ctx.out_dir / name).string()));
  f << content;
  ctx.artifacts.push_back(name);
}

template <typename Writer>
void write_artifact_with(Context& ctx, const std::string& name, Writer&& w) {
  std::ostringstream ss;
  w(ss);
  write_artifact(ctx, name, ss.str());
}

void record_input(Context& ctx, const std::string& key, const std::string& as_written, const std::string& bytes) {
  ctx.inputs[key] = {{"path", as_written}, {"fnv1a", hex64(fnv1a(bytes))}};
}

void load_dataset(Context& ctx) {
  if (ctx.cfg.dataset.empty()) throw UsageError("config: 'dataset' is required for this command");
  const fs::path p = ctx.cfg.resolve(ctx.cfg.dataset);
  const std::string bytes = read_bytes(p);
  try {
    ctx.data = parse_dataset_text(bytes, ctx.cfg.lloq);
  } catch (const DatasetError& e) {
    throw UsageError(fmt::format("dataset '{}': {}", ctx.cfg.dataset, e.what()));
  }
  if (ctx.data->subjects.empty()) throw UsageError(fmt::format("dataset '{}' has no subjects", ctx.cfg.dataset));
  record_input(ctx, "dataset", ctx.cfg.dataset, bytes);
}

void load_estimates(Context& ctx) {
  if (ctx.cfg.parameters.empty()) return;
  const std::string bytes = read_bytes(ctx.cfg.resolve(ctx.cfg.parameters));
  json j;
  try {
    j = json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw UsageError(fmt::format("parameters file '{}' is not valid JSON: {}", ctx.cfg.parameters, e.what()));
  }
  if (!j.contains("model") || !j.contains("parameters")) {
    throw UsageError(fmt::format("parameters file '{}' needs 'model' and 'parameters'", ctx.cfg.parameters));
  }
  Estimates est;
  est.model = model_from_json(j.at("model"));
  est.params = parameters_from_json(j.at("parameters"), est.model);
  ctx.estimates = est;
  record_input(ctx, "parameters", ctx.cfg.parameters, bytes);
}

std::uint64_t require_seed(const Context& ctx) {
  if (!ctx.cfg.seed) throw UsageError(fmt::format("'{}' needs an explicit seed (--seed or config 'seed')", ctx.command));
  return *ctx.cfg.seed;
}

FitOptions fit_options(const Context& ctx) {
  FitOptions fo = ctx.cfg.fit;
  fo.exec.threads = ctx.threads;
  return fo;
}

// Model and population parameters to evaluate: a previous fit when given,
// otherwise the configured model at its initial estimates.
Estimates working_estimates(const Context& ctx) {
  if (ctx.estimates) return *ctx.estimates;
  return {ctx.cfg.model, ctx.cfg.initial};
}

ordered_json result_json(const ModelSpec& ms, const ParameterSet& p, double ofv) {
  ordered_json j;
  j["model"] = model_json(ms);
  j["parameters"] = parameters_json(ms, p);
  j["ofv"] = ofv;
  return j;
}

std::string cell_or_dash(const std::optional<double>& v) { return v ? fmt::format("{:.4g}", *v) : "-"; }

// Parameter table layout: estimate, RSE (%), [95% CI], shrinkage (%). Variability
// rows are reported as CV % with delta-method uncertainty.
std::string parameter_table(const ModelSpec& ms, const FitResult& r) {
  std::map<std::string, ParameterEstimate> se_rows;
  if (r.standard_errors && r.standard_errors->ok) {
    for (const auto& row : r.standard_errors->rows) se_rows[row.name] = row;
  }
  std::ostringstream out;
  out << "Parameter,Estimate,RSE (%),[95% CI],Shrinkage (%)\n";
  auto emit = [&](const std::string& name, const std::string& estimate, std::optional<double> rse,
                  std::optional<double> lo, std::optional<double> hi, std::optional<double> shrink) {
    const std::string ci = lo && hi ? fmt::format("[{:.4g} - {:.4g}]", *lo, *hi) : "-";
    out << name << ',' << estimate << ',' << cell_or_dash(rse) << ',' << ci << ',' << cell_or_dash(shrink) << '\n';
  };
  auto percent = [](const std::optional<double>& v) -> std::optional<double> {
    if (!v) return std::nullopt;
    return 100.0 * *v;
  };
  const auto thetas = ms.theta_names();
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    const double value = r.params.theta[i];
    if (thetas[i] == "F_LARGE") emit("F_SMALL", "1 FIX", {}, {}, {}, {});
    if (ms.fixed.count(thetas[i])) {
      emit(thetas[i], fmt::format("{:.4g} FIX", value), {}, {}, {}, {});
      continue;
    }
    const auto it = se_rows.find(thetas[i]);
    if (it == se_rows.end()) emit(thetas[i], fmt::format("{:.4g}", value), {}, {}, {}, {});
    else emit(thetas[i], fmt::format("{:.4g}", value), it->second.rse_percent, it->second.ci_low, it->second.ci_high, {});
  }
  const auto etas = ms.eta_names();
  for (std::size_t k = 0; k < etas.size(); ++k) {
    const std::string name = "OMEGA_" + etas[k];
    const double w = r.params.omega[k];
    const double cv = 100.0 * std::sqrt(w);
    std::optional<double> shrink;
    if (k < r.shrinkage.eta.size()) shrink = percent(r.shrinkage.eta[k].raw);
    const std::string label = "BSV_" + etas[k] + " (CV %)";
    const auto it = se_rows.find(name);
    if (ms.fixed.count(name) || w == 0.0) {
      emit(label, fmt::format("{:.4g} FIX", cv), {}, {}, {}, shrink);
    } else if (it == se_rows.end() || !it->second.se) {
      emit(label, fmt::format("{:.4g}", cv), {}, {}, {}, shrink);
    } else {
      const double se_cv = 100.0 * *it->second.se / (2.0 * std::sqrt(w));
      emit(label, fmt::format("{:.4g}", cv), 100.0 * se_cv / cv, cv - 1.96 * se_cv, cv + 1.96 * se_cv, shrink);
    }
  }
  const auto eps_shrink = percent(r.shrinkage.eps.raw);
  auto sigma_row = [&](const std::string& name, const std::string& label, double value, double scale) {
    const auto it = se_rows.find(name);
    if (ms.fixed.count(name)) {
      emit(label, fmt::format("{:.4g} FIX", scale * value), {}, {}, {}, eps_shrink);
    } else if (it == se_rows.end() || !it->second.se) {
      emit(label, fmt::format("{:.4g}", scale * value), {}, {}, {}, eps_shrink);
    } else {
      const double se = scale * *it->second.se;
      emit(label, fmt::format("{:.4g}", scale * value), it->second.rse_percent, scale * value - 1.96 * se,
           scale * value + 1.96 * se, eps_shrink);
    }
  };
  if (r.params.sigma.model != ErrorModel::additive) sigma_row("SIGMA_PROP", "SIGMA_PROP (CV %)", r.params.sigma.prop, 100.0);
  if (r.params.sigma.model != ErrorModel::proportional) sigma_row("SIGMA_ADD", "SIGMA_ADD (mg/L)", r.params.sigma.add, 1.0);
  return out.str();
}

std::string ebe_table(const ModelSpec& ms, const FitResult& r) {
  std::ostringstream out;
  out << "ID";
  for (const auto& e : ms.eta_names()) out << ",ETA_" << e;
  out << ",FLAGGED\n";
  for (std::size_t i = 0; i < r.subject_ids.size(); ++i) {
    out << r.subject_ids[i];
    for (double v : r.ebes[i]) out << ',' << num(v);
    out << ',' << (r.ebe_flagged[i] ? 1 : 0) << '\n';
  }
  return out.str();
}

ordered_json shrinkage_json(const ModelSpec& ms, const Shrinkage& s) {
  ordered_json j;
  const auto etas = ms.eta_names();
  for (std::size_t k = 0; k < etas.size() && k < s.eta.size(); ++k) {
    j["eta"][etas[k]] = s.eta[k].raw ? ordered_json(*s.eta[k].raw) : ordered_json(nullptr);
  }
  j["eps"] = s.eps.raw ? ordered_json(*s.eps.raw) : ordered_json(nullptr);
  return j;
}

// Writes the GOF table; returns false when CWRES could not be computed.
bool write_gof(Context& ctx, const ModelSpec& ms, const FitResult& r) {
  try {
    const auto rows = goodness_of_fit(*ctx.data, ms, r);
    write_artifact_with(ctx, "gof.csv", [&](std::ostream& o) { write_gof_csv(o, rows); });
    return true;
  } catch (const std::runtime_error& e) {
    const PkModel model(ms);
    const auto data = subject_data(*ctx.data);
    const auto rows = predictions(model, data, r);
    write_artifact_with(ctx, "gof.csv", [&](std::ostream& o) { write_gof_csv(o, rows); });
    ctx.warnings.push_back(fmt::format("CWRES unavailable: {}", e.what()));
    return false;
  }
}

// EBEs and shrinkage at fixed population parameters, without estimation.
FitResult evaluate_at(const Context& ctx, const Estimates& est) {
  const PkModel model(est.model);
  const auto data = subject_data(*ctx.data);
  ExecutionOptions exec;
  exec.threads = ctx.threads;
  const auto ofv = foce_ofv(model, data, est.params, exec);
  FitResult r;
  r.params = est.params;
  r.ofv = ofv.ofv;
  r.converged = ofv.ok();
  r.message = "evaluated at supplied parameters";
  for (std::size_t i = 0; i < data.size(); ++i) {
    r.subject_ids.push_back(data[i].id);
    r.ebes.push_back(ofv.subjects[i].ebe.eta);
    r.ebe_flagged.push_back(!ofv.subjects[i].ebe.converged);
  }
  r.shrinkage = shrinkage(r, predictions(model, data, r));
  return r;
}

// Fitted or supplied estimates with their EBEs. Warns when a fit did not
// converge.
std::pair<Estimates, FitResult> individual_estimates(Context& ctx) {
  if (ctx.estimates) return {*ctx.estimates, evaluate_at(ctx, *ctx.estimates)};
  FitOptions fo = fit_options(ctx);
  fo.compute_standard_errors = false;
  auto r = fit(*ctx.data, ctx.cfg.model, ctx.cfg.initial, fo);
  if (!r.converged) ctx.warnings.push_back(fmt::format("fit did not converge: {}", r.message));
  return {{ctx.cfg.model, r.params}, std::move(r)};
}

int cmd_fit(Context& ctx) {
  auto fo = fit_options(ctx);
  const auto& ms = ctx.cfg.model;
  FitResult r;
  try {
    r = fit(*ctx.data, ms, ctx.cfg.initial, fo);
  } catch (const std::invalid_argument& e) {
    throw AnalysisError(e.what());
  }
  write_artifact(ctx, "parameters.csv", parameter_table(ms, r));
  write_artifact(ctx, "ebes.csv", ebe_table(ms, r));
  const bool gof_ok = write_gof(ctx, ms, r);

  ordered_json report;
  report["converged"] = r.converged;
  report["message"] = r.message;
  report["ofv"] = r.ofv;
  report["iterations"] = r.iterations;
  report["n_function_evals"] = r.n_function_evals;
  report["n_subjects"] = ctx.data->subjects.size();
  report["n_observations"] = ctx.data->n_usable();
  report["n_censored"] = ctx.data->n_censored();
  if (r.standard_errors) {
    report["standard_errors"] = {{"ok", r.standard_errors->ok}, {"message", r.standard_errors->message}};
  } else {
    report["standard_errors"] = nullptr;
  }
  report["shrinkage"] = shrinkage_json(ms, r.shrinkage);
  report["flagged_subjects"] = ordered_json::array();
  for (std::size_t i = 0; i < r.subject_ids.size(); ++i) {
    if (r.ebe_flagged[i]) report["flagged_subjects"].push_back(r.subject_ids[i]);
  }
  report["cwres_ok"] = gof_ok;
  write_artifact(ctx, "fit_report.json", report.dump(2) + "\n");
  write_artifact(ctx, "params.json", result_json(ms, r.params, r.ofv).dump(2) + "\n");

  if (!r.converged) {
    ctx.warnings.push_back(fmt::format("minimization did not converge: {}", r.message));
    return kExitAnalysisFailure;
  }
  if (r.standard_errors && !r.standard_errors->ok) {
    ctx.warnings.push_back(fmt::format("standard errors unavailable: {}", r.standard_errors->message));
  }
  return kExitSuccess;
}

int cmd_simulate(Context& ctx) {
  const auto seed = require_seed(ctx);
  const StudyDesign& design = ctx.cfg.design;
  const Estimates est = working_estimates(ctx);
  SimulationTruth truth;
  const auto ds = simulate_dataset(design, est.model, est.params, seed, &truth);
  write_artifact(ctx, "dataset.csv", serialize_dataset(ds));
  std::ostringstream t;
  t << "ID";
  for (const auto& e : est.model.eta_names()) t << ",ETA_" << e;
  t << ",CL,V,KA,F\n";
  for (std::size_t i = 0; i < ds.subjects.size(); ++i) {
    t << ds.subjects[i].id;
    for (double v : truth.etas[i]) t << ',' << num(v);
    const auto& ip = truth.individuals[i];
    t << ',' << num(ip.cl) << ',' << num(ip.v) << ',' << num(ip.ka) << ',' << num(ip.f) << '\n';
  }
  write_artifact(ctx, "simulation_truth.csv", t.str());
  return kExitSuccess;
}

int cmd_bootstrap(Context& ctx) {
  const auto seed = require_seed(ctx);
  const Estimates est = working_estimates(ctx);
  BootstrapOptions bo;
  bo.n = ctx.cfg.bootstrap_n;
  bo.seed = seed;
  bo.fit = ctx.cfg.fit;
  bo.fit.compute_standard_errors = false;
  bo.threads = ctx.threads;
  const auto s = bootstrap(*ctx.data, est.model, est.params, bo);
  write_artifact_with(ctx, "bootstrap.csv", [&](std::ostream& o) { write_bootstrap_csv(o, s); });
  std::ostringstream reps;
  reps << "REPLICATE";
  for (const auto& p : s.parameters) reps << ',' << p.name;
  reps << '\n';
  for (std::size_t i = 0; i < s.replicates.size(); ++i) {
    reps << i + 1;
    for (double v : s.replicates[i]) reps << ',' << num(v);
    reps << '\n';
  }
  write_artifact(ctx, "bootstrap_replicates.csv", reps.str());
  ordered_json meta;
  meta["n_requested"] = s.n_requested;
  meta["n_converged"] = s.n_converged;
  meta["failure_rate"] = s.failure_rate;
  meta["warning"] = s.warning;
  meta["point_estimates"] = parameters_json(est.model, est.params);
  write_artifact(ctx, "bootstrap_meta.json", meta.dump(2) + "\n");
  if (s.warning) ctx.warnings.push_back(fmt::format("{} of {} replicates failed", s.n_requested - s.n_converged, s.n_requested));
  if (s.n_converged == 0) throw AnalysisError("no bootstrap replicate converged");
  return kExitSuccess;
}

int cmd_vpc(Context& ctx) {
  const auto seed = require_seed(ctx);
  const Estimates est = working_estimates(ctx);
  VpcOptions vo;
  vo.n = ctx.cfg.vpc_n;
  vo.seed = seed;
  vo.binning = ctx.cfg.vpc_binning;
  vo.n_bins = ctx.cfg.vpc_bins;
  vo.threads = ctx.threads;
  const auto s = vpc(*ctx.data, est.model, est.params, vo);
  write_artifact_with(ctx, "vpc.csv", [&](std::ostream& o) { write_vpc_csv(o, s); });
  return kExitSuccess;
}

int cmd_covariate_search(Context& ctx) {
  CovariateSearchOptions so;
  so.forward_threshold = ctx.cfg.forward_threshold;
  so.backward_threshold = ctx.cfg.backward_threshold;
  so.fit = fit_options(ctx);
  so.fit.compute_standard_errors = false;
  CovariateSearchResult r;
  try {
    r = covariate_search(*ctx.data, ctx.cfg.model, ctx.cfg.initial, ctx.cfg.candidates, so);
  } catch (const std::invalid_argument& e) {
    throw AnalysisError(e.what());
  }
  std::ostringstream t;
  t << "PHASE,ROUND,PARAMETER,COVARIATE,FORM,FIT_OK,OFV,DELTA_OFV,SELECTED,NOTE\n";
  for (const auto& s : r.trace) {
    t << s.phase << ',' << s.round << ',' << to_string(s.effect.parameter) << ',' << to_string(s.effect.covariate)
      << ',' << to_string(s.effect.form) << ',' << (s.fit_ok ? 1 : 0) << ',' << (s.fit_ok ? num(s.ofv) : ".") << ','
      << (s.fit_ok ? num(s.delta_ofv) : ".") << ',' << (s.selected ? 1 : 0) << ',' << s.note << '\n';
  }
  write_artifact(ctx, "covariate_trace.csv", t.str());
  write_artifact(ctx, "final_model.json", result_json(r.model, r.params, r.ofv).dump(2) + "\n");
  return kExitSuccess;
}

struct SubjectExposure {
  int id = 0;
  double dose = 0.0;
  IndividualParams ip;
  ExposureMetrics m;
};

std::vector<SubjectExposure> subject_exposures(const Context& ctx, const Estimates& est, const FitResult& r) {
  std::vector<SubjectExposure> out;
  for (std::size_t i = 0; i < ctx.data->subjects.size(); ++i) {
    const auto& s = ctx.data->subjects[i];
    SubjectExposure e;
    e.id = s.id;
    e.dose = s.total_dose();
    e.ip = individual_params(est.model, est.params.theta, s.cov, r.ebes.at(i));
    e.m = exposure_metrics(est.model.structure, e.ip, e.dose, ctx.cfg.fu);
    out.push_back(e);
  }
  return out;
}

int cmd_exposures(Context& ctx) {
  const auto [est, r] = individual_estimates(ctx);
  const auto rows = subject_exposures(ctx, est, r);
  std::ostringstream t;
  t << "ID,DOSE,AUC,CMAX,TMAX,CU_MAX\n";
  for (const auto& e : rows) {
    t << e.id << ',' << num(e.dose) << ',' << num(e.m.auc) << ',' << num(e.m.cmax) << ',' << num(e.m.tmax) << ','
      << num(e.m.cu_max) << '\n';
  }
  write_artifact(ctx, "exposures.csv", t.str());

  std::ostringstream s;
  s << "Variable,N,Mean,Median [Q1 - Q3]\n";
  auto summary = [&](const std::string& name, auto field) {
    std::vector<double> v;
    for (const auto& e : rows) v.push_back(field(e.m));
    const auto c = summarize_values(name, v);
    s << name << ',' << c.n << ',' << fmt::format("{:.3g}", c.mean) << ','
      << fmt::format("{:.3g} [{:.3g} - {:.3g}]", c.median, c.q1, c.q3) << '\n';
  };
  summary("AUC (mg.min/L)", [](const ExposureMetrics& m) { return m.auc; });
  summary("Cmax (mg/L)", [](const ExposureMetrics& m) { return m.cmax; });
  summary("Cu max (ug/L)", [](const ExposureMetrics& m) { return m.cu_max; });
  summary("Tmax (min)", [](const ExposureMetrics& m) { return m.tmax; });
  write_artifact(ctx, "exposures_summary.csv", s.str());
  return r.converged ? kExitSuccess : kExitAnalysisFailure;
}

int cmd_gof(Context& ctx) {
  const auto [est, r] = individual_estimates(ctx);
  const bool ok = write_gof(ctx, est.model, r);
  ordered_json j;
  j["ofv"] = r.ofv;
  j["source"] = ctx.estimates ? "parameters" : "fit";
  j["converged"] = r.converged;
  j["shrinkage"] = shrinkage_json(est.model, r.shrinkage);
  j["cwres_ok"] = ok;
  write_artifact(ctx, "gof_summary.json", j.dump(2) + "\n");
  return r.converged && ok ? kExitSuccess : kExitAnalysisFailure;
}

std::map<int, int> parse_labels(const Context& ctx) {
  std::istringstream in(ctx.labels_text);
  std::string line;
  std::map<int, int> labels;
  if (!std::getline(in, line)) throw UsageError("labels file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "ID,SUCCESS") throw UsageError("labels file header must be 'ID,SUCCESS'");
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument("missing column");
      std::size_t used = 0;
      const std::string id_text = line.substr(0, comma);
      const int id = std::stoi(id_text, &used);
      if (used != id_text.size()) throw std::invalid_argument("ID must be an integer");
      const std::string v = line.substr(comma + 1);
      if (v != "0" && v != "1") throw std::invalid_argument("SUCCESS must be 0 or 1");
      if (!labels.emplace(id, v == "1" ? 1 : 0).second) throw std::invalid_argument("duplicate ID");
    } catch (const std::exception& e) {
      throw UsageError(fmt::format("labels file row {}: {}", row, e.what()));
    }
  }
  return labels;
}

std::vector<int> subject_labels(const Context& ctx) {
  const auto labels = parse_labels(ctx);
  std::vector<int> success;
  for (const auto& s : ctx.data->subjects) {
    const auto it = labels.find(s.id);
    if (it == labels.end()) throw UsageError(fmt::format("labels file has no entry for subject {}", s.id));
    success.push_back(it->second);
  }
  return success;
}

int cmd_compare_groups(Context& ctx) {
  const auto success = subject_labels(ctx);
  const auto [est, r] = individual_estimates(ctx);
  const auto rows = subject_exposures(ctx, est, r);
  std::vector<stats::NumericVariable> numeric{{"CL", {}}, {"V", {}}, {"KA", {}},    {"AUC", {}},
                                              {"CMAX", {}}, {"TMAX", {}}, {"CU_MAX", {}}, {"WT", {}},
                                              {"AGE", {}}};
  std::vector<stats::CategoricalVariable> categorical{{"SEX", {}}, {"VOLGRP", {}}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& e = rows[i];
    const auto& cov = ctx.data->subjects[i].cov;
    const double values[] = {e.ip.cl, e.ip.v, e.ip.ka, e.m.auc, e.m.cmax, e.m.tmax, e.m.cu_max, cov.wt, cov.age};
    for (std::size_t k = 0; k < numeric.size(); ++k) numeric[k].values.push_back(values[k]);
    categorical[0].values.push_back(cov.sex == Sex::female ? 1 : 0);
    categorical[1].values.push_back(cov.volgrp == VolumeGroup::high_volume ? 1 : 0);
  }
  const auto report = stats::compare_groups(numeric, categorical, success);
  write_artifact_with(ctx, "compare_groups.csv", [&](std::ostream& o) { stats::write_report_csv(o, report); });
  return r.converged ? kExitSuccess : kExitAnalysisFailure;
}

struct CommandSpec {
  std::string name;
  std::string description;
  bool needs_dataset;
  std::function<int(Context&)> run;
};

const std::vector<CommandSpec>& commands() {
  static const std::vector<CommandSpec> list{
      {"fit", "Estimate population parameters (FOCE-I)", true, cmd_fit},
      {"simulate", "Simulate a study dataset", false, cmd_simulate},
      {"bootstrap", "Nonparametric bootstrap of the fit", true, cmd_bootstrap},
      {"vpc", "Visual predictive check tables", true, cmd_vpc},
      {"covariate-search", "Forward inclusion, backward elimination", true, cmd_covariate_search},
      {"exposures", "Individual AUC, Cmax, tmax and unbound Cmax", true, cmd_exposures},
      {"gof", "Goodness-of-fit table", true, cmd_gof},
      {"compare-groups", "Compare TAP success and failure groups", true, cmd_compare_groups},
  };
  return list;
}

void validate_command(Context& ctx, const CommandSpec& spec) {
  auto& c = ctx.cfg;
  if (spec.needs_dataset || (ctx.command == "simulate" && !c.explicit_covariates)) load_dataset(ctx);
  load_estimates(ctx);
  if (ctx.command == "simulate" || ctx.command == "bootstrap" || ctx.command == "vpc") require_seed(ctx);
  if (ctx.command == "simulate") {
    if (!c.explicit_covariates) c.design.covariates = ResampleCovariates{covariate_pool(*ctx.data)};
    try {
      c.design.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(fmt::format("config: simulation: {}", e.what()));
    }
  }
  if (ctx.command == "bootstrap" && c.bootstrap_n <= 0) throw UsageError("config: bootstrap.n must be positive");
  if (ctx.command == "vpc" && c.vpc_n <= 0) throw UsageError("config: vpc.n must be positive");
  if (ctx.command == "vpc" && c.vpc_binning == VpcBinning::equal_count && c.vpc_bins <= 0) {
    throw UsageError("config: vpc.n_bins must be positive");
  }
  if (ctx.command == "compare-groups") {
    if (c.labels.empty()) throw UsageError("config: compare_groups.labels is required");
    ctx.labels_text = read_bytes(c.resolve(c.labels));
    record_input(ctx, "labels", c.labels, ctx.labels_text);
    subject_labels(ctx);
  }
  if (ctx.command == "covariate-search" && c.candidates.empty()) {
    throw UsageError("config: covariate_search.candidates is empty");
  }
}

void write_manifest(Context& ctx, int status, const std::string& message) {
  const ordered_json config = to_json(ctx.cfg);
  ordered_json m;
  m["engine"] = "popk";
  m["version"] = POPK_VERSION;
  m["command"] = ctx.command;
  m["config_hash"] = hex64(fnv1a(config.dump()));
  m["seed"] = ctx.cfg.seed ? ordered_json(*ctx.cfg.seed) : ordered_json(nullptr);
  m["inputs"] = ctx.inputs;
  m["exit_status"] = status;
  m["message"] = message;
  m["warnings"] = ctx.warnings;
  m["artifacts"] = ctx.artifacts;
  m["config"] = config;
  std::ofstream f(ctx.out_dir / "manifest.json", std::ios::binary);
  f << m.dump(2) << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Population pharmacokinetic analysis of levobupivacaine", "popk"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(POPK_VERSION));
  struct Flags {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
    int threads = 1;
  } flags;
  for (const auto& spec : commands()) {
    auto* sub = app.add_subcommand(spec.name, spec.description);
    sub->add_option("--config", flags.config, "JSON configuration file")->required();
    sub->add_option("--output", flags.output, "Output directory (overrides config 'output')");
    sub->add_option("--seed", flags.seed, "Random seed (overrides config 'seed')");
    sub->add_option("--threads", flags.threads, "Worker threads")->check(CLI::PositiveNumber);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitSuccess;
  } catch (const CLI::CallForVersion&) {
    out << POPK_VERSION << '\n';
    return kExitSuccess;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitSuccess;
    }
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  const CommandSpec* spec = nullptr;
  for (const auto& c : commands()) {
    if (app.got_subcommand(c.name)) spec = &c;
  }

  std::optional<Context> ctx;
  try {
    RunConfig cfg = load_config(flags.config);
    if (flags.seed) cfg.seed = flags.seed;
    if (!flags.output.empty()) cfg.output = flags.output;
    if (cfg.output.empty()) throw UsageError("no output directory (--output or config 'output')");
    ctx.emplace(spec->name, std::move(cfg), flags.threads, out, err);
    ctx->out_dir = flags.output.empty() ? ctx->cfg.resolve(ctx->cfg.output) : fs::path(flags.output);
    validate_command(*ctx, *spec);
    fs::create_directories(ctx->out_dir);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  int status = kExitSuccess;
  std::string message = "ok";
  try {
    status = spec->run(*ctx);
    if (status != kExitSuccess) message = "analysis incomplete";
  } catch (const UsageError& e) {
    status = kExitUsage;
    message = e.what();
  } catch (const std::exception& e) {
    status = kExitAnalysisFailure;
    message = e.what();
  }
  try {
    write_manifest(*ctx, status, message);
  } catch (const std::exception& e) {
    err << "error: cannot write manifest: " << e.what() << '\n';
    return kExitAnalysisFailure;
  }
  for (const auto& w : ctx->warnings) err << "warning: " << w << '\n';
  if (status == kExitSuccess) {
    out << fmt::format("{}: wrote {} artifacts to {}\n", spec->name, ctx->artifacts.size() + 1, ctx->out_dir.string());
  } else if (message != "analysis incomplete") {
    err << "error: " << message << '\n';
  }
  return status;
}

}  // namespace popk::cli
