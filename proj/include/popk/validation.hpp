#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "popk/estimator.hpp"

namespace popk {

struct BootstrapParameter {
  std::string name;
  double median = 0.0;
  double mean = 0.0;
  double sd = 0.0;
  double p2_5 = 0.0;
  double p97_5 = 0.0;
};

struct BootstrapSummary {
  std::vector<BootstrapParameter> parameters;
  int n_requested = 0;
  int n_converged = 0;
  double failure_rate = 0.0;
  bool warning = false;  // more than half of the replicates failed
  // Estimates of converged replicates, in replicate order, one row per
  // replicate with columns matching `parameters`.
  std::vector<std::vector<double>> replicates;
};

struct BootstrapOptions {
  int n = 1000;
  std::uint64_t seed = 0;
  FitOptions fit;  // fit.exec.threads is ignored; replicates run in parallel
  int threads = 1;
};

// Resamples subjects with replacement (fresh ids 1..N), refits each replicate
// from `init` and summarizes converged replicates.
BootstrapSummary bootstrap(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& init,
                           const BootstrapOptions& opts);

enum class VpcBinning { nominal, equal_count };

struct VpcOptions {
  int n = 1000;
  std::uint64_t seed = 0;
  VpcBinning binning = VpcBinning::nominal;
  int n_bins = 8;  // equal_count only
  int threads = 1;
};

struct VpcBin {
  double time = 0.0;  // nominal time, or median observation time of the bin
  double lower = 0.0;  // bin edges (inclusive)
  double upper = 0.0;
  std::size_t n_observed = 0;
  std::optional<double> obs_p5, obs_p50, obs_p95;
  std::optional<double> sim_p5_lo, sim_p5_hi;
  std::optional<double> sim_p50_lo, sim_p50_hi;
  std::optional<double> sim_p95_lo, sim_p95_hi;
};

struct VpcSummary {
  std::vector<VpcBin> bins;
  int n_simulations = 0;
};

// Simulates n replicates of the observed design. Simulated values below the
// LLOQ are dropped, matching the treatment of the observed data.
VpcSummary vpc(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& params,
               const VpcOptions& opts);

void write_bootstrap_csv(std::ostream& out, const BootstrapSummary& s);
void write_vpc_csv(std::ostream& out, const VpcSummary& s);

// Resampled dataset for bootstrap replicate r.
StudyDataset bootstrap_sample(const StudyDataset& ds, std::uint64_t seed, std::uint64_t replicate);

}  // namespace popk
