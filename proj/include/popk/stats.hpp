#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace popk::stats {

// Rows are the grouping factor, columns the outcome:
//   [[a, b],
//    [c, d]]
struct ContingencyTable2x2 {
  long a = 0, b = 0, c = 0, d = 0;
  void validate() const;
};

enum class Sidedness {
  two_sided,
  greater,  // a larger than expected under independence
  less,
};

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double df = 0.0;      // Welch only
  bool exact = false;
  bool flagged = false;  // degenerate input handled by convention
  std::string note;
};

// Exact hypergeometric test. Two-sided p sums all tables with probability
// no greater than the observed one.
TestResult fisher_exact(const ContingencyTable2x2& t, Sidedness side);

// Wilcoxon-Mann-Whitney, two-sided. Statistic is the rank sum of x.
TestResult rank_sum_test(std::span<const double> x, std::span<const double> y);

// Welch two-sample t test, two-sided.
TestResult welch_t_test(std::span<const double> x, std::span<const double> y);

struct NumericVariable {
  std::string name;
  std::vector<double> values;  // one per subject
};

struct CategoricalVariable {
  std::string name;
  std::vector<int> values;  // 0/1 per subject
};

struct ReportRow {
  std::string variable;
  std::string test;
  double statistic = 0.0;
  double p_value = 1.0;
  std::string note;
  bool has_result = true;
};

// success[i] labels subject i (true = TAP successful).
std::vector<ReportRow> compare_groups(std::span<const NumericVariable> numeric,
                                      std::span<const CategoricalVariable> categorical,
                                      std::span<const int> success);

void write_report_csv(std::ostream& out, std::span<const ReportRow> rows);

}  // namespace popk::stats
