#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace popk {

enum class Sex { male = 0, female = 1 };
enum class VolumeGroup { low_volume = 0, high_volume = 1 };
enum class Covariate { wt, age, sex, volgrp, aag };

std::string_view to_string(Covariate c);
Covariate covariate_from_string(std::string_view name);
bool is_categorical(Covariate c);

// Thrown for malformed dataset files. row() is the 1-based line number in the
// input (header is line 1), or 0 when the problem is not tied to one line.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::size_t row);
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

struct Covariates {
  double wt = 15.0;    // kg
  double age = 0.0;    // months
  Sex sex = Sex::male;
  VolumeGroup volgrp = VolumeGroup::low_volume;
  std::optional<double> aag;  // g/L

  std::optional<double> value(Covariate c) const;
  bool operator==(const Covariates&) const = default;
};

struct EventRecord {
  int subject_id = 0;
  double time = 0.0;  // min
  int evid = 0;       // 0 observation, 1 dose
  std::optional<double> amt;  // mg
  std::optional<double> dv;   // mg/L, raw value kept even when censored
  int mdv = 0;
  Covariates cov;

  bool is_dose() const { return evid == 1; }
  bool is_observation() const { return evid == 0; }
  // Observation that enters the likelihood.
  bool usable() const { return evid == 0 && mdv == 0 && dv.has_value(); }
  bool operator==(const EventRecord&) const = default;
};

struct Subject {
  int id = 0;
  Covariates cov;
  std::vector<EventRecord> records;  // sorted by time, doses first on ties

  double total_dose() const;
  std::size_t n_usable() const;
  bool operator==(const Subject&) const = default;
};

struct StudyDataset {
  std::vector<Subject> subjects;  // ascending id
  double lloq = 0.05;             // mg/L

  std::size_t n_observation_rows() const;
  std::size_t n_usable() const;
  std::size_t n_censored() const;
  const Subject* find(int id) const;
  bool operator==(const StudyDataset&) const = default;
};

// Column layout: ID,TIME,EVID,AMT,DV,MDV,WT,AGE,SEX,VOLGRP,AAG ("." = missing).
// Columns may appear in any order; AAG may be omitted. Observations with
// dv < lloq are flagged mdv=1 on load.
StudyDataset parse_dataset(std::istream& in, double lloq = 0.05);
StudyDataset parse_dataset_text(std::string_view text, double lloq = 0.05);
StudyDataset read_dataset(const std::string& path, double lloq = 0.05);

void write_dataset(std::ostream& out, const StudyDataset& ds);
std::string serialize_dataset(const StudyDataset& ds);

// Builds a dataset from already grouped subjects: sorts, validates and
// applies the lloq flag. Used by the simulator and the bootstrap.
StudyDataset make_dataset(std::vector<Subject> subjects, double lloq);

struct ContinuousSummary {
  std::string name;
  std::size_t n = 0;
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

struct CategoryCount {
  std::string covariate;
  std::string level;
  std::size_t n = 0;
  double percent = 0.0;
};

struct CovariateSummary {
  std::vector<ContinuousSummary> continuous;  // WT, AGE, AAG
  std::vector<CategoryCount> categories;      // SEX, VOLGRP levels
};

CovariateSummary summarize_covariates(const StudyDataset& ds);

// Type-7 quantile (linear interpolation between closest ranks). Sorts a copy.
double quantile(std::vector<double> values, double p);
ContinuousSummary summarize_values(std::string name, std::vector<double> values);

}  // namespace popk
