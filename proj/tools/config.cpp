#include "config.hpp"

#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>

namespace popk::cli {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw UsageError(fmt::format("config: '{}' must be an object", where));
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw UsageError(fmt::format("config: unknown key '{}' in {}", key, where));
  }
}

template <typename T>
T get(const json& j, std::string_view key, std::string_view where) {
  try {
    return j.at(std::string(key)).get<T>();
  } catch (const json::exception&) {
    throw UsageError(fmt::format("config: '{}' in {} has the wrong type", key, where));
  }
}

template <typename T>
void read_opt(const json& j, std::string_view key, std::string_view where, T& out) {
  if (j.contains(std::string(key))) out = get<T>(j, key, where);
}

// Final-model values used when the config leaves an entry out.
std::optional<double> default_theta(std::string_view name) {
  static const std::map<std::string, double, std::less<>> values{
      {"CL", 0.15}, {"V", 14.0}, {"KA", 0.18}, {"F_LARGE", 0.88}, {"CL_WT_POWER", 0.87}};
  if (const auto it = values.find(name); it != values.end()) return it->second;
  if (name.find('_') != std::string_view::npos && name != "F_LARGE") {
    for (auto form : {"_LINEAR", "_POWER", "_EXPONENTIAL"}) {
      if (name.ends_with(form)) return 0.0;
    }
  }
  return std::nullopt;
}

std::optional<double> default_omega(std::string_view eta) {
  if (eta == "CL") return 0.41 * 0.41;
  if (eta == "V") return 0.47 * 0.47;
  if (eta == "KA") return 0.81 * 0.81;
  return std::nullopt;
}

template <typename F>
auto wrap(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(fmt::format("config: {}", e.what()));
  }
}

Covariates covariates_from_json(const json& j) {
  check_keys(j, "simulation.covariates[]", {"wt", "age", "sex", "volgrp", "aag"});
  Covariates c;
  c.wt = get<double>(j, "wt", "simulation.covariates[]");
  read_opt(j, "age", "simulation.covariates[]", c.age);
  if (j.contains("sex")) {
    const auto s = get<std::string>(j, "sex", "simulation.covariates[]");
    if (s == "male") c.sex = Sex::male;
    else if (s == "female") c.sex = Sex::female;
    else throw UsageError(fmt::format("config: sex must be 'male' or 'female', got '{}'", s));
  }
  if (j.contains("volgrp")) {
    const auto v = get<std::string>(j, "volgrp", "simulation.covariates[]");
    if (v == "low_volume") c.volgrp = VolumeGroup::low_volume;
    else if (v == "high_volume") c.volgrp = VolumeGroup::high_volume;
    else throw UsageError(fmt::format("config: volgrp must be 'low_volume' or 'high_volume', got '{}'", v));
  }
  if (j.contains("aag") && !j.at("aag").is_null()) c.aag = get<double>(j, "aag", "simulation.covariates[]");
  return c;
}

ordered_json covariates_json(const Covariates& c) {
  ordered_json j;
  j["wt"] = c.wt;
  j["age"] = c.age;
  j["sex"] = c.sex == Sex::female ? "female" : "male";
  j["volgrp"] = c.volgrp == VolumeGroup::high_volume ? "high_volume" : "low_volume";
  j["aag"] = c.aag ? ordered_json(*c.aag) : ordered_json(nullptr);
  return j;
}

std::string_view binning_name(VpcBinning b) { return b == VpcBinning::nominal ? "nominal" : "equal_count"; }

}  // namespace

std::filesystem::path RunConfig::resolve(const std::string& p) const {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

ModelSpec model_from_json(const json& j) {
  return wrap([&] {
    check_keys(j, "model", {"structure", "error_model", "covariates", "fixed"});
    ModelSpec ms;
    if (j.contains("structure")) ms.structure = structure_from_string(get<std::string>(j, "structure", "model"));
    if (j.contains("error_model")) {
      ms.error_model = error_model_from_string(get<std::string>(j, "error_model", "model"));
    }
    if (j.contains("covariates")) {
      for (const auto& c : j.at("covariates")) {
        check_keys(c, "model.covariates[]", {"parameter", "covariate", "form", "reference"});
        CovariateEffect e;
        e.parameter = pk_param_from_string(get<std::string>(c, "parameter", "model.covariates[]"));
        e.covariate = covariate_from_string(get<std::string>(c, "covariate", "model.covariates[]"));
        e.form = covariate_form_from_string(get<std::string>(c, "form", "model.covariates[]"));
        e.reference = is_categorical(e.covariate) ? 0.0 : kReferenceWeight;
        read_opt(c, "reference", "model.covariates[]", e.reference);
        ms.covariates.push_back(e);
      }
    }
    if (j.contains("fixed")) {
      for (const auto& f : j.at("fixed")) ms.fixed.insert(f.get<std::string>());
    }
    ms.validate();
    return ms;
  });
}

ordered_json model_json(const ModelSpec& ms) {
  ordered_json j;
  j["structure"] = to_string(ms.structure);
  j["error_model"] = to_string(ms.error_model);
  j["covariates"] = ordered_json::array();
  for (const auto& c : ms.covariates) {
    ordered_json e;
    e["parameter"] = to_string(c.parameter);
    e["covariate"] = to_string(c.covariate);
    e["form"] = to_string(c.form);
    e["reference"] = c.reference;
    j["covariates"].push_back(e);
  }
  j["fixed"] = ordered_json::array();
  for (const auto& f : ms.fixed) j["fixed"].push_back(f);
  return j;
}

ParameterSet parameters_from_json(const json& j, const ModelSpec& ms) {
  return wrap([&] {
    check_keys(j, "parameters", {"theta", "omega", "sigma"});
    const json empty = json::object();
    const json& theta = j.contains("theta") ? j.at("theta") : empty;
    const json& omega = j.contains("omega") ? j.at("omega") : empty;
    const json& sigma = j.contains("sigma") ? j.at("sigma") : empty;
    check_keys(sigma, "sigma", {"prop", "add"});

    ParameterSet p;
    const auto names = ms.theta_names();
    const std::set<std::string> theta_set(names.begin(), names.end());
    for (const auto& [key, value] : theta.items()) {
      if (!theta_set.count(key)) throw UsageError(fmt::format("config: '{}' is not a theta of this model", key));
    }
    for (const auto& n : names) {
      if (theta.contains(n)) p.theta.push_back(get<double>(theta, n, "theta"));
      else if (const auto d = default_theta(n)) p.theta.push_back(*d);
      else throw UsageError(fmt::format("config: missing initial estimate for theta '{}'", n));
    }
    const auto etas = ms.eta_names();
    const std::set<std::string> eta_set(etas.begin(), etas.end());
    for (const auto& [key, value] : omega.items()) {
      if (!eta_set.count(key)) throw UsageError(fmt::format("config: '{}' is not an eta of this model", key));
    }
    for (const auto& e : etas) {
      if (omega.contains(e)) p.omega.push_back(get<double>(omega, e, "omega"));
      else if (const auto d = default_omega(e)) p.omega.push_back(*d);
      else throw UsageError(fmt::format("config: missing initial omega for eta '{}'", e));
    }
    p.sigma.model = ms.error_model;
    if (ms.error_model != ErrorModel::additive) {
      p.sigma.prop = sigma.contains("prop") ? get<double>(sigma, "prop", "sigma") : 0.14;
    }
    if (ms.error_model != ErrorModel::proportional) {
      if (!sigma.contains("add")) throw UsageError("config: missing initial sigma 'add'");
      p.sigma.add = get<double>(sigma, "add", "sigma");
    }
    validate(p.sigma);
    for (double w : p.omega) {
      if (!(w >= 0.0)) throw UsageError("config: omega variances must be >= 0");
    }
    return p;
  });
}

ordered_json parameters_json(const ModelSpec& ms, const ParameterSet& p) {
  ordered_json j;
  const auto names = ms.theta_names();
  for (std::size_t i = 0; i < names.size(); ++i) j["theta"][names[i]] = p.theta.at(i);
  const auto etas = ms.eta_names();
  for (std::size_t k = 0; k < etas.size(); ++k) j["omega"][etas[k]] = p.omega.at(k);
  j["sigma"] = ordered_json::object();
  if (p.sigma.model != ErrorModel::additive) j["sigma"]["prop"] = p.sigma.prop;
  if (p.sigma.model != ErrorModel::proportional) j["sigma"]["add"] = p.sigma.add;
  return j;
}

RunConfig parse_config(const json& j, const std::filesystem::path& base_dir) {
  check_keys(j, "config",
             {"dataset", "lloq", "model", "initial", "parameters", "estimation", "seed", "output", "simulation",
              "bootstrap", "vpc", "covariate_search", "exposures", "compare_groups"});
  RunConfig c;
  c.base_dir = base_dir;
  read_opt(j, "dataset", "config", c.dataset);
  read_opt(j, "lloq", "config", c.lloq);
  if (!(c.lloq >= 0.0)) throw UsageError("config: lloq must be >= 0");
  c.design.lloq = c.lloq;
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  else c.model = final_model_spec();
  c.initial = parameters_from_json(j.contains("initial") ? j.at("initial") : json::object(), c.model);
  read_opt(j, "parameters", "config", c.parameters);
  {
    const PkModel model(c.model);
    std::set<std::string> known;
    for (const auto& n : parameter_names(model, c.initial)) known.insert(n.name);
    for (const auto& f : c.model.fixed) {
      if (!known.count(f)) throw UsageError(fmt::format("config: fixed parameter '{}' is not in the model", f));
    }
  }

  if (j.contains("estimation")) {
    const auto& e = j.at("estimation");
    check_keys(e, "estimation",
               {"max_evaluations", "ofv_rel_tol", "gradient_tol", "gradient_step", "hessian_step",
                "standard_errors"});
    read_opt(e, "max_evaluations", "estimation", c.fit.max_evaluations);
    read_opt(e, "ofv_rel_tol", "estimation", c.fit.ofv_rel_tol);
    read_opt(e, "gradient_tol", "estimation", c.fit.gradient_tol);
    read_opt(e, "gradient_step", "estimation", c.fit.gradient_step);
    read_opt(e, "hessian_step", "estimation", c.fit.hessian_step);
    read_opt(e, "standard_errors", "estimation", c.fit.compute_standard_errors);
    if (c.fit.max_evaluations <= 0 || !(c.fit.ofv_rel_tol > 0.0) || !(c.fit.gradient_tol > 0.0) ||
        !(c.fit.gradient_step > 0.0) || !(c.fit.hessian_step > 0.0)) {
      throw UsageError("config: estimation settings must be positive");
    }
  }
  if (j.contains("seed") && !j.at("seed").is_null()) {
    if (!j.at("seed").is_number_unsigned()) throw UsageError("config: seed must be a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  read_opt(j, "output", "config", c.output);

  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    check_keys(s, "simulation", {"n_subjects", "times", "dose_mg_per_kg", "fraction_high_volume", "covariates"});
    read_opt(s, "n_subjects", "simulation", c.design.n_subjects);
    read_opt(s, "times", "simulation", c.design.times);
    read_opt(s, "dose_mg_per_kg", "simulation", c.design.dose_mg_per_kg);
    read_opt(s, "fraction_high_volume", "simulation", c.design.fraction_high_volume);
    if (s.contains("covariates")) {
      std::vector<Covariates> list;
      for (const auto& e : s.at("covariates")) list.push_back(covariates_from_json(e));
      c.design.covariates = ExplicitCovariates{list};
      c.design.n_subjects = static_cast<int>(list.size());
      c.explicit_covariates = true;
    }
  }

  if (j.contains("bootstrap")) {
    check_keys(j.at("bootstrap"), "bootstrap", {"n"});
    read_opt(j.at("bootstrap"), "n", "bootstrap", c.bootstrap_n);
  }
  if (j.contains("vpc")) {
    const auto& v = j.at("vpc");
    check_keys(v, "vpc", {"n", "binning", "n_bins"});
    read_opt(v, "n", "vpc", c.vpc_n);
    read_opt(v, "n_bins", "vpc", c.vpc_bins);
    if (v.contains("binning")) {
      const auto b = get<std::string>(v, "binning", "vpc");
      if (b == "nominal") c.vpc_binning = VpcBinning::nominal;
      else if (b == "equal_count") c.vpc_binning = VpcBinning::equal_count;
      else throw UsageError(fmt::format("config: unknown vpc binning '{}'", b));
    }
  }
  if (j.contains("covariate_search")) {
    const auto& s = j.at("covariate_search");
    check_keys(s, "covariate_search", {"candidates", "forward_threshold", "backward_threshold"});
    read_opt(s, "forward_threshold", "covariate_search", c.forward_threshold);
    read_opt(s, "backward_threshold", "covariate_search", c.backward_threshold);
    if (s.contains("candidates")) {
      for (const auto& e : s.at("candidates")) {
        check_keys(e, "covariate_search.candidates[]", {"parameter", "covariate"});
        c.candidates.push_back(wrap([&] {
          return CovariateCandidate{
              pk_param_from_string(get<std::string>(e, "parameter", "covariate_search.candidates[]")),
              covariate_from_string(get<std::string>(e, "covariate", "covariate_search.candidates[]"))};
        }));
      }
    }
  }
  if (j.contains("exposures")) {
    check_keys(j.at("exposures"), "exposures", {"fu"});
    read_opt(j.at("exposures"), "fu", "exposures", c.fu);
    if (!(c.fu > 0.0 && c.fu <= 1.0)) throw UsageError("config: fu must be in (0, 1]");
  }
  if (j.contains("compare_groups")) {
    check_keys(j.at("compare_groups"), "compare_groups", {"labels"});
    read_opt(j.at("compare_groups"), "labels", "compare_groups", c.labels);
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError(fmt::format("cannot open config file '{}'", path.string()));
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw UsageError(fmt::format("config file '{}' is not valid JSON: {}", path.string(), e.what()));
  }
  return parse_config(j, path.parent_path());
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["dataset"] = c.dataset;
  j["lloq"] = c.lloq;
  j["model"] = model_json(c.model);
  j["initial"] = parameters_json(c.model, c.initial);
  j["parameters"] = c.parameters;
  j["estimation"] = {{"max_evaluations", c.fit.max_evaluations},     {"ofv_rel_tol", c.fit.ofv_rel_tol},
                     {"gradient_tol", c.fit.gradient_tol},           {"gradient_step", c.fit.gradient_step},
                     {"hessian_step", c.fit.hessian_step},           {"standard_errors", c.fit.compute_standard_errors}};
  j["seed"] = c.seed ? ordered_json(*c.seed) : ordered_json(nullptr);
  ordered_json sim;
  sim["n_subjects"] = c.design.n_subjects;
  sim["times"] = c.design.times;
  sim["dose_mg_per_kg"] = c.design.dose_mg_per_kg;
  sim["fraction_high_volume"] = c.design.fraction_high_volume;
  if (c.explicit_covariates) {
    sim["covariates"] = ordered_json::array();
    for (const auto& cov : std::get<ExplicitCovariates>(c.design.covariates).covariates) {
      sim["covariates"].push_back(covariates_json(cov));
    }
  }
  j["simulation"] = sim;
  j["bootstrap"] = {{"n", c.bootstrap_n}};
  j["vpc"] = {{"n", c.vpc_n}, {"binning", binning_name(c.vpc_binning)}, {"n_bins", c.vpc_bins}};
  ordered_json cs;
  cs["candidates"] = ordered_json::array();
  for (const auto& k : c.candidates) {
    cs["candidates"].push_back({{"parameter", to_string(k.parameter)}, {"covariate", to_string(k.covariate)}});
  }
  cs["forward_threshold"] = c.forward_threshold;
  cs["backward_threshold"] = c.backward_threshold;
  j["covariate_search"] = cs;
  j["exposures"] = {{"fu", c.fu}};
  j["compare_groups"] = {{"labels", c.labels}};
  return j;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

}  // namespace popk::cli
