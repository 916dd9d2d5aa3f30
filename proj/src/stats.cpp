#include "popk/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

namespace popk::stats {

namespace {

double log_choose(long n, long k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

double clamp01(double p) { return std::clamp(p, 0.0, 1.0); }

// Midranks of the pooled sample (x first, then y).
std::vector<double> pooled_ranks(std::span<const double> x, std::span<const double> y, double* tie_sum) {
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> ranks(pooled.size());
  *tie_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    const double t = static_cast<double>(j - i + 1);
    *tie_sum += t * t * t - t;
    i = j + 1;
  }
  return ranks;
}

double mean(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double variance(std::span<const double> v) {
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

}  // namespace

void ContingencyTable2x2::validate() const {
  if (a < 0 || b < 0 || c < 0 || d < 0) throw std::invalid_argument("table counts must be >= 0");
  if (a + b + c + d == 0) throw std::invalid_argument("table is empty");
}

TestResult fisher_exact(const ContingencyTable2x2& t, Sidedness side) {
  t.validate();
  TestResult res;
  res.exact = true;
  const long r1 = t.a + t.b, r2 = t.c + t.d, c1 = t.a + t.c, c2 = t.b + t.d, n = r1 + r2;
  res.statistic = (t.b * t.c == 0) ? std::numeric_limits<double>::infinity()
                                   : static_cast<double>(t.a * t.d) / static_cast<double>(t.b * t.c);
  if (r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0) {
    res.p_value = 1.0;
    res.flagged = true;
    res.note = "zero margin";
    return res;
  }
  const long lo = std::max(0L, c1 - r2), hi = std::min(r1, c1);
  const double denom = log_choose(n, c1);
  auto prob = [&](long x) { return std::exp(log_choose(r1, x) + log_choose(r2, c1 - x) - denom); };
  const double observed = prob(t.a);
  double p = 0.0;
  for (long x = lo; x <= hi; ++x) {
    const double px = prob(x);
    switch (side) {
      case Sidedness::greater: p += x >= t.a ? px : 0.0; break;
      case Sidedness::less: p += x <= t.a ? px : 0.0; break;
      case Sidedness::two_sided: p += px <= observed * (1.0 + 1e-7) ? px : 0.0; break;
    }
  }
  res.p_value = clamp01(p);
  return res;
}

TestResult rank_sum_test(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw std::invalid_argument("rank-sum test needs two non-empty samples");
  TestResult res;
  double tie_sum = 0.0;
  const auto ranks = pooled_ranks(x, y, &tie_sum);
  const auto nx = x.size(), ny = y.size(), n = nx + ny;
  const double w = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(nx), 0.0);
  res.statistic = w;
  const double expected = static_cast<double>(nx) * static_cast<double>(n + 1) / 2.0;

  const double first = x.front();
  const bool all_equal = std::all_of(x.begin(), x.end(), [&](double v) { return v == first; }) &&
                         std::all_of(y.begin(), y.end(), [&](double v) { return v == first; });
  if (all_equal) {
    res.p_value = 1.0;
    res.flagged = true;
    res.note = "all values identical";
    return res;
  }

  const double observed_dev = std::abs(w - expected);
  if (n <= 12) {
    // Enumerate every assignment of nx of the pooled ranks to x.
    std::vector<bool> pick(n, false);
    std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(nx), true);
    long total = 0, extreme = 0;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += pick[i] ? ranks[i] : 0.0;
      ++total;
      if (std::abs(s - expected) >= observed_dev - 1e-9) ++extreme;
    } while (std::prev_permutation(pick.begin(), pick.end()));
    res.p_value = clamp01(static_cast<double>(extreme) / static_cast<double>(total));
    res.exact = true;
    return res;
  }

  const double dnx = static_cast<double>(nx), dny = static_cast<double>(ny), dn = static_cast<double>(n);
  const double var = dnx * dny / 12.0 * ((dn + 1.0) - tie_sum / (dn * (dn - 1.0)));
  const double z = std::max(0.0, observed_dev - 0.5) / std::sqrt(var);
  const boost::math::normal normal;
  res.p_value = clamp01(2.0 * boost::math::cdf(boost::math::complement(normal, z)));
  return res;
}

TestResult welch_t_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() < 2 || y.size() < 2) throw std::invalid_argument("Welch test needs at least two values per group");
  TestResult res;
  const double mx = mean(x), my = mean(y);
  const double vx = variance(x) / static_cast<double>(x.size());
  const double vy = variance(y) / static_cast<double>(y.size());
  const double se2 = vx + vy;
  if (se2 == 0.0) {
    res.flagged = true;
    if (mx == my) {
      res.p_value = 1.0;
      res.note = "zero variance and equal means";
    } else {
      res.statistic = mx > my ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      res.p_value = 0.0;
      res.note = "zero variance with unequal means";
    }
    return res;
  }
  res.statistic = (mx - my) / std::sqrt(se2);
  res.df = se2 * se2 /
           (vx * vx / static_cast<double>(x.size() - 1) + vy * vy / static_cast<double>(y.size() - 1));
  const boost::math::students_t dist(res.df);
  res.p_value = clamp01(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(res.statistic))));
  return res;
}

std::vector<ReportRow> compare_groups(std::span<const NumericVariable> numeric,
                                      std::span<const CategoricalVariable> categorical,
                                      std::span<const int> success) {
  std::vector<ReportRow> rows;
  const auto n = success.size();
  const auto n_success = static_cast<std::size_t>(std::count(success.begin(), success.end(), 1));
  const std::size_t n_failed = n - n_success;
  auto note_row = [&](std::string variable, std::string note) {
    ReportRow r;
    r.variable = std::move(variable);
    r.test = "none";
    r.note = std::move(note);
    r.has_result = false;
    rows.push_back(std::move(r));
  };
  if (n_success == 0 || n_failed == 0) {
    note_row("ALL", "single group; no tests performed");
    return rows;
  }

  for (const auto& var : numeric) {
    if (var.values.size() != n) throw std::invalid_argument("variable " + var.name + " does not cover all subjects");
    std::vector<double> ok, failed;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::isnan(var.values[i])) continue;
      (success[i] == 1 ? ok : failed).push_back(var.values[i]);
    }
    if (ok.size() < 2 || failed.size() < 2) {
      note_row(var.name, "group with fewer than 2 subjects; tests skipped");
      continue;
    }
    const auto w = rank_sum_test(ok, failed);
    rows.push_back({var.name, "wilcoxon_rank_sum", w.statistic, w.p_value, w.note});
    const auto t = welch_t_test(ok, failed);
    rows.push_back({var.name, "welch_t", t.statistic, t.p_value, t.note});
  }

  for (const auto& var : categorical) {
    if (var.values.size() != n) throw std::invalid_argument("variable " + var.name + " does not cover all subjects");
    ContingencyTable2x2 table;
    for (std::size_t i = 0; i < n; ++i) {
      const bool level = var.values[i] == 1;
      const bool good = success[i] == 1;
      if (level) (good ? table.a : table.b)++;
      else (good ? table.c : table.d)++;
    }
    const std::string layout = fmt::format("table [[{} {}] [{} {}]]", table.a, table.b, table.c, table.d);
    for (auto [side, label] : {std::pair{Sidedness::two_sided, "fisher_two_sided"},
                               std::pair{Sidedness::greater, "fisher_greater"},
                               std::pair{Sidedness::less, "fisher_less"}}) {
      const auto f = fisher_exact(table, side);
      rows.push_back({var.name, label, f.statistic, f.p_value, f.note.empty() ? layout : layout + "; " + f.note});
    }
  }
  return rows;
}

void write_report_csv(std::ostream& out, std::span<const ReportRow> rows) {
  out << "VARIABLE,TEST,STATISTIC,P_VALUE,NOTE\n";
  for (const auto& r : rows) {
    if (r.has_result) {
      out << fmt::format("{},{},{:.10g},{:.10g},{}\n", r.variable, r.test, r.statistic, r.p_value, r.note);
    } else {
      out << fmt::format("{},{},.,.,{}\n", r.variable, r.test, r.note);
    }
  }
}

}  // namespace popk::stats
