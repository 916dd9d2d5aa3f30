// Acceptance run: one PASS/FAIL line per criterion, details underneath.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include <json.hpp>

#include "cli.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "popk/diagnostics.hpp"
#include "popk/random.hpp"
#include "popk/stats.hpp"
#include "popk/validation.hpp"

using namespace popk;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, std::string line) {
    pass = pass && ok;
    details.push_back(fmt::format("{} {}", ok ? "ok  " : "MISS", line));
  }
  void note(std::string line) { details.push_back("     " + line); }
};

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

FitOptions quiet_fit() {
  FitOptions fo;
  fo.compute_standard_errors = false;
  return fo;
}

// Starting values away from the generating ones.
ParameterSet perturbed_start() {
  ParameterSet p = final_model_parameters();
  p.theta = {0.2, 10.0, 0.25, 1.0, 0.5};
  p.omega = {0.2, 0.2, 0.2};
  p.sigma.prop = 0.2;
  return p;
}

Outcome typical_exposures() {
  Outcome o;
  IndividualParams ip;
  ip.cl = 0.15;
  ip.v = 14.0;
  ip.ka = 0.18;
  ip.f = 1.0;
  const double dose = 0.4 * 15.0;
  const auto m = exposure_metrics(ip, dose);
  o.check(rel(m.auc, 41.0) <= 0.05, fmt::format("AUC {:.4f} mg.min/L vs reported median 41 (rel {:.3f}, tol 0.05)", m.auc, rel(m.auc, 41.0)));
  o.check(rel(m.tmax, 17.0) <= 0.05, fmt::format("tmax {:.3f} min vs reported median 17 (rel {:.3f}, tol 0.05)", m.tmax, rel(m.tmax, 17.0)));
  o.check(rel(m.cmax, 0.315) <= 0.15,
          fmt::format("Cmax {:.4f} mg/L vs reported median 0.315 (rel {:.3f}, tol 0.15)", m.cmax, rel(m.cmax, 0.315)));
  // Independent checks of the closed form: dose/CL, and the numerically
  // integrated ODE at the reported peak.
  o.check(std::abs(m.auc - dose / ip.cl) <= 1e-9, fmt::format("AUC equals dose/CL = {:.6f}", dose / ip.cl));
  const double c_ode = oracle::rk4_one_compartment(ip.ka, ip.ke(), ip.v, ip.f, dose, m.tmax);
  o.check(std::abs(c_ode - m.cmax) <= 1e-6, fmt::format("Cmax matches the ODE oracle at tmax ({:.9f})", c_ode));
  return o;
}

Outcome unbound_exposure() {
  Outcome o;
  const double cu = unbound_concentration_ugl(0.315, 0.01);
  o.check(std::abs(cu - 3.15) <= 1e-12, fmt::format("Cu,max {:.12g} ug/L vs reported 3.15", cu));
  return o;
}

double linear_marginal(const std::vector<double>& y, double mu, double omega2, double sigma2) {
  const double n = static_cast<double>(y.size());
  double s1 = 0.0, s2 = 0.0;
  for (double v : y) {
    s1 += v - mu;
    s2 += (v - mu) * (v - mu);
  }
  return n * std::log(sigma2) + std::log(1.0 + n * omega2 / sigma2) +
         (s2 - omega2 / (sigma2 + n * omega2) * s1 * s1) / sigma2;
}

double bateman(double t, double dose, double cl, double v, double ka) {
  const double ke = cl / v;
  return dose * ka / (v * (ka - ke)) * (std::exp(-ke * t) - std::exp(-ka * t));
}

Outcome likelihood() {
  Outcome o;
  const LinearRandomEffectModel linear;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.05, 4.0), y(-5.0, 5.0);
  std::uniform_int_distribution<int> nobs(1, 6);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> obs(static_cast<std::size_t>(nobs(rng)));
    for (auto& v : obs) v = y(rng);
    const double mu = y(rng) / 5, omega2 = u(rng), sigma = std::sqrt(u(rng));
    const std::vector<SubjectData> data{fixtures::linear_subject(1, obs)};
    const double ofv = foce_ofv(linear, data, fixtures::linear_params(mu, omega2, sigma)).ofv;
    worst = std::max(worst, std::abs(ofv - linear_marginal(obs, mu, omega2, sigma * sigma)));
  }
  o.check(worst <= 1e-6, fmt::format("linear family, 100 draws: max |FOCE - analytic| = {:.3g} (tol 1e-6)", worst));

  ParameterSet p = base_model_parameters();
  p.omega = {0.41 * 0.41, 0.0, 0.0};
  const PkModel model(base_model_spec());
  SubjectData s;
  s.id = 1;
  s.dose_times = {0};
  s.doses = {6};
  s.times = {5, 15, 20, 25, 30, 45, 60, 75};
  auto stream = make_stream(31, StreamDomain::replicate, 0);
  for (double t : s.times) s.y.push_back(bateman(t, 6, 0.15 * std::exp(0.3), 14, 0.18) * (1 + 0.14 * standard_normal(stream)));
  const double w = p.omega[0];
  auto h = [&](double eta) {
    double obj = eta * eta / w + std::log(w);
    for (std::size_t j = 0; j < s.times.size(); ++j) {
      const double f = bateman(s.times[j], 6, 0.15 * std::exp(eta), 14, 0.18);
      const double g = 0.14 * f;
      obj += (s.y[j] - f) * (s.y[j] - f) / (g * g) + std::log(g * g);
    }
    return obj;
  };
  const double exact = oracle::adaptive_gh_neg2log(h, 64) + std::log(2 * M_PI);
  const std::vector<SubjectData> data{s};
  const double foce = foce_ofv(model, data, p).ofv;
  o.check(rel(foce, exact) <= 0.02,
          fmt::format("1-eta PK subject: FOCE {:.5f} vs 64-node adaptive GH {:.5f} (rel {:.4f}, tol 0.02)", foce, exact,
                      rel(foce, exact)));
  return o;
}

Outcome parameter_recovery() {
  Outcome o;
  const auto truth = final_model_parameters();
  const std::array<std::string, 3> names{"CL/F", "V/F", "Ka"};
  std::array<std::vector<double>, 3> est;
  std::array<int, 3> within{0, 0, 0};
  int converged = 0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    const auto ds = simulate_dataset(fixtures::study_design(), final_model_spec(), truth, 4000 + r);
    const auto fit = popk::fit(ds, final_model_spec(), perturbed_start(), quiet_fit());
    converged += fit.converged;
    for (std::size_t k = 0; k < 3; ++k) {
      est[k].push_back(fit.params.theta[k]);
      if (fit.converged && rel(fit.params.theta[k], truth.theta[k]) <= 0.20) ++within[k];
    }
  }
  o.note(fmt::format("{} of {} fits converged (non-converged fits count as misses)", converged, reps));
  for (std::size_t k = 0; k < 3; ++k) {
    o.check(within[k] >= 16, fmt::format("{}: {} of {} within 20% of truth (need 16)", names[k], within[k], reps));
    const double med = median(est[k]);
    o.check(rel(med, truth.theta[k]) <= 0.10,
            fmt::format("{}: median {:.4g} vs truth {:.4g} (rel {:.3f}, tol 0.10)", names[k], med, truth.theta[k],
                        rel(med, truth.theta[k])));
  }
  return o;
}

Outcome covariate_search_power() {
  Outcome o;
  const std::vector<CovariateCandidate> cands{{PkParam::cl, Covariate::wt}, {PkParam::v, Covariate::wt},
                                              {PkParam::cl, Covariate::age}};
  CovariateSearchOptions so;
  so.fit = quiet_fit();
  auto forward_selected = [](const CovariateSearchResult& r, const CovariateCandidate& c) {
    for (const auto& s : r.trace) {
      if (s.phase == "forward" && s.selected && s.effect.parameter == c.parameter && s.effect.covariate == c.covariate) {
        return true;
      }
    }
    return false;
  };

  int hits = 0;
  std::vector<std::string> deltas;
  for (int r = 0; r < 10; ++r) {
    const auto ds = simulate_dataset(fixtures::study_design(), final_model_spec(), final_model_parameters(), 5000 + r);
    const auto res = covariate_search(ds, base_model_spec(), base_model_parameters(), cands, so);
    const bool hit = forward_selected(res, cands[0]);
    hits += hit;
    double best = 0.0;
    for (const auto& s : res.trace) {
      if (s.phase == "forward" && s.round == 1 && s.fit_ok && s.effect.parameter == PkParam::cl &&
          s.effect.covariate == Covariate::wt) {
        best = std::max(best, s.delta_ofv);
      }
    }
    deltas.push_back(fmt::format("{:.2f}", best));
  }
  o.check(hits >= 8, fmt::format("weight on CL selected in {} of 10 replicates (need 8)", hits));
  o.note(fmt::format("first-round best dOFV for weight on CL: {}", fmt::join(deltas, " ")));

  std::vector<int> null_hits(cands.size(), 0);
  ParameterSet null_truth = base_model_parameters();
  for (int r = 0; r < 20; ++r) {
    const auto ds = simulate_dataset(fixtures::study_design(), base_model_spec(), null_truth, 5500 + r);
    const auto res = covariate_search(ds, base_model_spec(), base_model_parameters(), cands, so);
    for (std::size_t k = 0; k < cands.size(); ++k) null_hits[k] += forward_selected(res, cands[k]);
  }
  for (std::size_t k = 0; k < cands.size(); ++k) {
    o.check(null_hits[k] <= 3, fmt::format("null data: {} on {} included in {} of 20 (max 3 = 15%)",
                                           to_string(cands[k].covariate), to_string(cands[k].parameter), null_hits[k]));
  }
  return o;
}

Outcome bootstrap_check() {
  Outcome o;
  const auto truth = final_model_parameters();
  const auto ds = simulate_dataset(fixtures::study_design(), final_model_spec(), truth, 6000);
  const auto point = popk::fit(ds, final_model_spec(), truth, quiet_fit());
  o.check(point.converged, fmt::format("point fit converged ({})", point.message));
  BootstrapOptions bo;
  bo.n = 200;
  bo.seed = 6001;
  bo.fit = quiet_fit();
  bo.threads = 4;
  const auto s = bootstrap(ds, final_model_spec(), point.params, bo);
  o.note(fmt::format("{} of {} replicates converged", s.n_converged, s.n_requested));
  const PkModel model(final_model_spec());
  for (const auto& p : s.parameters) {
    const double est = parameter_value(model, point.params, p.name);
    o.check(rel(p.median, est) <= 0.15, fmt::format("{}: bootstrap median {:.4g} vs estimate {:.4g} (rel {:.3f}, tol 0.15)",
                                                    p.name, p.median, est, rel(p.median, est)));
  }
  for (const std::string name : {"CL", "V", "KA"}) {
    const auto it = std::find_if(s.parameters.begin(), s.parameters.end(), [&](const auto& p) { return p.name == name; });
    const double t = parameter_value(model, truth, name);
    const bool covered = it != s.parameters.end() && it->p2_5 <= t && t <= it->p97_5;
    o.check(covered, fmt::format("{}: truth {:.4g} in [{:.4g}, {:.4g}]", name, t, it->p2_5, it->p97_5));
  }
  return o;
}

Outcome vpc_check() {
  Outcome o;
  const auto truth = final_model_parameters();
  const auto ds = simulate_dataset(fixtures::study_design(), final_model_spec(), truth, 7000);
  VpcOptions vo;
  vo.n = 1000;
  vo.seed = 7001;
  const auto good = vpc(ds, final_model_spec(), truth, vo);
  int inside = 0;
  for (const auto& b : good.bins) {
    if (b.obs_p50 && b.sim_p50_lo && *b.sim_p50_lo <= *b.obs_p50 && *b.obs_p50 <= *b.sim_p50_hi) ++inside;
  }
  o.check(good.bins.size() == 8, fmt::format("{} bins", good.bins.size()));
  o.check(inside >= 7, fmt::format("true model: observed median inside the simulated median band in {} of 8 bins (need 7)", inside));

  auto doubled = truth;
  doubled.theta[0] *= 2.0;
  const auto bad = vpc(ds, final_model_spec(), doubled, vo);
  int late_out = 0;
  std::vector<std::string> which;
  for (const auto& b : bad.bins) {
    if (b.time < 30.0 || !b.obs_p50 || !b.sim_p50_lo) continue;
    if (*b.obs_p50 < *b.sim_p50_lo || *b.obs_p50 > *b.sim_p50_hi) {
      ++late_out;
      which.push_back(fmt::format("{:g}", b.time));
    }
  }
  o.check(late_out >= 3, fmt::format("doubled CL: observed median outside the band in {} late bins (t >= 30 min: {}) (need 3)",
                                     late_out, fmt::join(which, ", ")));
  return o;
}

Outcome diagnostics_check() {
  Outcome o;
  auto design = fixtures::study_design(30);
  design.lloq = 0.0;
  const auto truth = final_model_parameters();
  const auto ds = simulate_dataset(design, final_model_spec(), truth, 8000);
  const auto data = subject_data(ds);
  const PkModel model(final_model_spec());
  FitResult r;
  r.params = truth;
  for (const auto& s : data) {
    r.subject_ids.push_back(s.id);
    r.ebes.push_back(estimate_ebe(model, s, truth).eta);
  }
  const auto rows = goodness_of_fit(model, data, r);
  std::vector<double> cw;
  for (const auto& row : rows) cw.push_back(row.cwres);
  o.check(cw.size() == 240, fmt::format("N = {} residuals", cw.size()));
  const double m = oracle::mean(cw), sd = oracle::sd(cw);
  o.check(std::abs(m) <= 0.15, fmt::format("CWRES mean {:.4f} (tol 0.15)", m));
  o.check(std::abs(sd - 1.0) <= 0.2, fmt::format("CWRES SD {:.4f} (tol 1 +/- 0.2)", sd));

  const std::vector<std::vector<double>> zeros(30, std::vector<double>(3, 0.0));
  std::vector<double> iwres;
  for (const auto& row : rows) iwres.push_back(row.iwres);
  const auto sh = shrinkage(zeros, truth.omega, iwres);
  bool all_one = true;
  for (const auto& e : sh.eta) all_one = all_one && e.raw && *e.raw == 1.0;
  o.check(all_one, "all-zero EBEs give eta-shrinkage exactly 100% for CL, V and KA");
  return o;
}

Outcome statistics_check() {
  Outcome o;
  const auto p = stats::fisher_exact({11, 1, 16, 12}, stats::Sidedness::greater).p_value;
  const double ref = oracle::fisher_enumerate(11, 1, 16, 12, 1);
  o.check(std::abs(p - ref) <= 1e-9, fmt::format("Fisher one-sided {:.12f} vs enumeration {:.12f} (tol 1e-9)", p, ref));
  o.check(std::round(p * 100) / 100 == 0.03, fmt::format("Fisher one-sided {:.4f} rounds to the reported 0.03", p));
  const std::vector<double> x{1, 2, 3}, y{4, 5, 6};
  const auto w = stats::rank_sum_test(x, y);
  o.check(std::abs(w.p_value - 0.1) <= 1e-12 && w.exact, fmt::format("rank-sum exact p {:.12g} (expect 0.1)", w.p_value));
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism_check() {
  Outcome o;
  const fs::path src = POPK_SOURCE_DIR;
  const fs::path work = fs::temp_directory_path() / "popk_acceptance_determinism";
  fs::remove_all(work);
  fs::create_directories(work);
  std::string cfg = slurp(src / "configs" / "study.json");
  {
    auto j = nlohmann::json::parse(cfg);
    j["dataset"] = (src / "data" / "levobupivacaine_synthetic.csv").string();
    j["compare_groups"]["labels"] = (src / "data" / "tap_outcome.csv").string();
    j["bootstrap"]["n"] = 20;
    j["vpc"]["n"] = 200;
    std::ofstream(work / "config.json") << j.dump(2);
  }
  for (std::string cmd : {"simulate", "bootstrap", "vpc"}) {
    std::vector<std::string> listing;
    bool same = true;
    for (int threads : {1, 4}) {
      const auto out = work / fmt::format("{}_{}", cmd, threads);
      std::ostringstream so, se;
      const int status = popk::cli::run({cmd, "--config", (work / "config.json").string(), "--output", out.string(),
                                         "--seed", "20240", "--threads", std::to_string(threads)},
                                        so, se);
      if (status != 0) {
        same = false;
        o.note(fmt::format("{} --threads {} exited {}: {}", cmd, threads, status, se.str()));
      }
    }
    const auto a = work / fmt::format("{}_1", cmd);
    const auto b = work / fmt::format("{}_4", cmd);
    std::size_t files = 0;
    if (fs::exists(a) && fs::exists(b)) {
      for (const auto& e : fs::directory_iterator(a)) {
        ++files;
        same = same && fs::exists(b / e.path().filename()) && slurp(e.path()) == slurp(b / e.path().filename());
      }
      std::size_t files_b = 0;
      for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++files_b;
      same = same && files == files_b && files > 0;
    } else {
      same = false;
    }
    o.check(same, fmt::format("{}: {} artifacts byte-identical at --threads 1 and 4", cmd, files));
  }
  return o;
}

struct Criterion {
  int number;
  std::string title;
  double budget_s;  // 0 = no runtime limit
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "typical-subject exposures", 0, typical_exposures},
      {2, "unbound exposure", 0, unbound_exposure},
      {3, "likelihood correctness", 10, likelihood},
      {4, "parameter recovery", 600, parameter_recovery},
      {5, "covariate search", 900, covariate_search_power},
      {6, "bootstrap (200 replicates)", 1800, bootstrap_check},
      {7, "VPC self-consistency", 300, vpc_check},
      {8, "diagnostics", 0, diagnostics_check},
      {9, "statistics", 0, statistics_check},
      {10, "determinism across thread counts", 0, determinism_check},
  };
  int failed = 0;
  std::vector<std::string> summary;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.check(false, fmt::format("exception: {}", e.what()));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0) o.check(secs <= c.budget_s, fmt::format("runtime {:.1f} s (limit {:.0f} s)", secs, c.budget_s));
    else o.note(fmt::format("runtime {:.1f} s", secs));
    const std::string line = fmt::format("{} criterion {}: {}", o.pass ? "PASS" : "FAIL", c.number, c.title);
    std::printf("%s\n", line.c_str());
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    summary.push_back(line);
    failed += !o.pass;
  }
  std::printf("\nSummary\n");
  for (const auto& s : summary) std::printf("%s\n", s.c_str());
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
