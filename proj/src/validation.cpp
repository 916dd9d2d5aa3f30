#include "popk/validation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>

#include "popk/diagnostics.hpp"
#include "popk/parallel.hpp"
#include "popk/random.hpp"
#include "popk/simulator.hpp"

namespace popk {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::optional<double> to_optional(double v) {
  if (std::isnan(v)) return std::nullopt;
  return v;
}

std::string csv_value(const std::optional<double>& v) {
  return v ? fmt::format("{:.10g}", *v) : std::string(".");
}

struct BinEdges {
  double time, lower, upper;
};

std::vector<BinEdges> make_bins(const StudyDataset& ds, const VpcOptions& opts) {
  std::vector<double> times;
  for (const auto& s : ds.subjects)
    for (const auto& r : s.records)
      if (r.is_observation()) times.push_back(r.time);
  if (times.empty()) throw std::invalid_argument("dataset has no observation records");
  std::sort(times.begin(), times.end());

  std::vector<BinEdges> bins;
  if (opts.binning == VpcBinning::nominal) {
    times.erase(std::unique(times.begin(), times.end()), times.end());
    for (double t : times) bins.push_back({t, t, t});
    return bins;
  }
  if (opts.n_bins <= 0) throw std::invalid_argument("n_bins must be positive");
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(opts.n_bins), times.size());
  std::size_t begin = 0;
  for (std::size_t b = 0; b < k && begin < times.size(); ++b) {
    std::size_t end = (b + 1) * times.size() / k;
    end = std::max(end, begin + 1);
    // keep tied times in one bin
    while (end < times.size() && times[end] == times[end - 1]) ++end;
    std::vector<double> in(times.begin() + static_cast<std::ptrdiff_t>(begin),
                           times.begin() + static_cast<std::ptrdiff_t>(end));
    bins.push_back({quantile(in, 0.5), in.front(), in.back()});
    begin = end;
  }
  return bins;
}

std::optional<std::size_t> bin_of(const std::vector<BinEdges>& bins, double t) {
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (t >= bins[b].lower && t <= bins[b].upper) return b;
  }
  return std::nullopt;
}

// p5, p50, p95 of the usable observations in each bin; NaN when fewer than 3.
std::vector<std::array<double, 3>> bin_percentiles(const StudyDataset& ds, const std::vector<BinEdges>& bins) {
  std::vector<std::vector<double>> values(bins.size());
  for (const auto& s : ds.subjects) {
    for (const auto& r : s.records) {
      if (!r.usable()) continue;
      if (const auto b = bin_of(bins, r.time)) values[*b].push_back(*r.dv);
    }
  }
  std::vector<std::array<double, 3>> out(bins.size(), {kNaN, kNaN, kNaN});
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (values[b].size() < 3) continue;
    std::sort(values[b].begin(), values[b].end());
    out[b] = {quantile(values[b], 0.05), quantile(values[b], 0.5), quantile(values[b], 0.95)};
  }
  return out;
}

}  // namespace

StudyDataset bootstrap_sample(const StudyDataset& ds, std::uint64_t seed, std::uint64_t replicate) {
  if (ds.subjects.empty()) throw std::invalid_argument("cannot resample an empty dataset");
  Engine rng = make_stream(seed, StreamDomain::bootstrap, replicate);
  std::vector<Subject> subjects;
  subjects.reserve(ds.subjects.size());
  for (std::size_t k = 0; k < ds.subjects.size(); ++k) {
    Subject s = ds.subjects[uniform_index(rng, ds.subjects.size())];
    s.id = static_cast<int>(k) + 1;
    for (auto& r : s.records) r.subject_id = s.id;
    subjects.push_back(std::move(s));
  }
  return make_dataset(std::move(subjects), ds.lloq);
}

BootstrapSummary bootstrap(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& init,
                           const BootstrapOptions& opts) {
  if (opts.n <= 0) throw std::invalid_argument("bootstrap needs at least one replicate");
  const PkModel model(ms);
  const auto names = parameter_names(model, init);

  std::vector<std::optional<std::vector<double>>> estimates(static_cast<std::size_t>(opts.n));
  FitOptions fo = opts.fit;
  fo.compute_standard_errors = false;
  fo.exec.threads = 1;
  parallel_for(estimates.size(), opts.threads, [&](std::size_t r) {
    const StudyDataset sample = bootstrap_sample(ds, opts.seed, r);
    const auto data = subject_data(sample);
    try {
      const FitResult f = fit(model, data, init, fo);
      if (!f.converged) return;
      std::vector<double> row;
      for (const auto& n : names) {
        if (n.estimated) row.push_back(parameter_value(model, f.params, n.name));
      }
      estimates[r] = std::move(row);
    } catch (const std::exception&) {
      // counted as a failed replicate
    }
  });

  BootstrapSummary out;
  out.n_requested = opts.n;
  for (auto& e : estimates) {
    if (e) out.replicates.push_back(std::move(*e));
  }
  out.n_converged = static_cast<int>(out.replicates.size());
  out.failure_rate = 1.0 - static_cast<double>(out.n_converged) / static_cast<double>(opts.n);
  out.warning = out.failure_rate > 0.5;
  if (out.replicates.empty()) return out;

  std::size_t col = 0;
  for (const auto& n : names) {
    if (!n.estimated) continue;
    std::vector<double> v;
    v.reserve(out.replicates.size());
    for (const auto& row : out.replicates) v.push_back(row[col]);
    BootstrapParameter p;
    p.name = n.name;
    p.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    p.sd = sample_sd(v);
    p.median = quantile(v, 0.5);
    p.p2_5 = quantile(v, 0.025);
    p.p97_5 = quantile(v, 0.975);
    out.parameters.push_back(p);
    ++col;
  }
  return out;
}

VpcSummary vpc(const StudyDataset& ds, const ModelSpec& ms, const ParameterSet& params, const VpcOptions& opts) {
  if (opts.n <= 0) throw std::invalid_argument("vpc needs at least one simulation");
  const auto edges = make_bins(ds, opts);
  const auto observed = bin_percentiles(ds, edges);

  std::vector<std::vector<std::array<double, 3>>> simulated(static_cast<std::size_t>(opts.n));
  parallel_for(simulated.size(), opts.threads, [&](std::size_t r) {
    const StudyDataset sim = simulate_like(ds, ms, params, derive_seed(opts.seed, StreamDomain::vpc, r));
    simulated[r] = bin_percentiles(sim, edges);
  });

  VpcSummary out;
  out.n_simulations = opts.n;
  for (std::size_t b = 0; b < edges.size(); ++b) {
    VpcBin bin;
    bin.time = edges[b].time;
    bin.lower = edges[b].lower;
    bin.upper = edges[b].upper;
    bin.obs_p5 = to_optional(observed[b][0]);
    bin.obs_p50 = to_optional(observed[b][1]);
    bin.obs_p95 = to_optional(observed[b][2]);
    for (const auto& s : ds.subjects)
      for (const auto& r : s.records)
        if (r.usable() && r.time >= bin.lower && r.time <= bin.upper) ++bin.n_observed;

    std::array<std::pair<std::optional<double>*, std::optional<double>*>, 3> targets{
        std::pair{&bin.sim_p5_lo, &bin.sim_p5_hi}, std::pair{&bin.sim_p50_lo, &bin.sim_p50_hi},
        std::pair{&bin.sim_p95_lo, &bin.sim_p95_hi}};
    for (std::size_t q = 0; q < 3; ++q) {
      std::vector<double> v;
      for (const auto& rep : simulated) {
        if (!std::isnan(rep[b][q])) v.push_back(rep[b][q]);
      }
      if (v.empty()) continue;
      std::sort(v.begin(), v.end());
      *targets[q].first = quantile(v, 0.025);
      *targets[q].second = quantile(v, 0.975);
    }
    out.bins.push_back(bin);
  }
  return out;
}

void write_bootstrap_csv(std::ostream& out, const BootstrapSummary& s) {
  out << "PARAM,MEDIAN,MEAN,SD,P2.5,P97.5\n";
  for (const auto& p : s.parameters) {
    out << fmt::format("{},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g}\n", p.name, p.median, p.mean, p.sd, p.p2_5,
                       p.p97_5);
  }
}

void write_vpc_csv(std::ostream& out, const VpcSummary& s) {
  out << "BIN_TIME,OBS_P5,OBS_P50,OBS_P95,SIM_P5_LO,SIM_P5_HI,SIM_P50_LO,SIM_P50_HI,SIM_P95_LO,SIM_P95_HI\n";
  for (const auto& b : s.bins) {
    out << fmt::format("{:.10g},{},{},{},{},{},{},{},{},{}\n", b.time, csv_value(b.obs_p5), csv_value(b.obs_p50),
                       csv_value(b.obs_p95), csv_value(b.sim_p5_lo), csv_value(b.sim_p5_hi),
                       csv_value(b.sim_p50_lo), csv_value(b.sim_p50_hi), csv_value(b.sim_p95_lo),
                       csv_value(b.sim_p95_hi));
  }
}

}  // namespace popk
