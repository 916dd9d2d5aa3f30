#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "popk/estimator.hpp"
#include "popk/simulator.hpp"
#include "popk/validation.hpp"

namespace popk::cli {

// Invalid command line or configuration; maps to exit status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::filesystem::path base_dir;  // relative paths resolve against this

  std::string dataset;  // as written
  double lloq = 0.05;

  ModelSpec model = final_model_spec();
  ParameterSet initial = final_model_parameters();
  std::string parameters;  // estimates from a previous fit (params.json), optional

  FitOptions fit;
  std::optional<std::uint64_t> seed;
  std::string output;

  StudyDesign design;
  bool explicit_covariates = false;

  int bootstrap_n = 1000;
  int vpc_n = 1000;
  VpcBinning vpc_binning = VpcBinning::nominal;
  int vpc_bins = 8;

  std::vector<CovariateCandidate> candidates;
  double forward_threshold = 3.84;
  double backward_threshold = 3.84;

  double fu = kDefaultUnboundFraction;
  std::string labels;  // ID,SUCCESS file for compare-groups

  std::filesystem::path resolve(const std::string& p) const;
};

// Reads the JSON config. Throws UsageError with a one-line cause.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);

// Fully resolved configuration, defaults included. The output directory and
// thread count are left out so the echo does not depend on them.
nlohmann::ordered_json to_json(const RunConfig& c);

// Parameter block in the same shape as the config's "initial" section.
nlohmann::ordered_json parameters_json(const ModelSpec& ms, const ParameterSet& p);
// Missing entries fall back to the final-model values where one exists.
ParameterSet parameters_from_json(const nlohmann::json& j, const ModelSpec& ms);
nlohmann::ordered_json model_json(const ModelSpec& ms);
ModelSpec model_from_json(const nlohmann::json& j);

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace popk::cli
