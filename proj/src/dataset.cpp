#include "popk/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

namespace popk {

namespace {

constexpr std::array<std::string_view, 11> kColumns = {
    "ID", "TIME", "EVID", "AMT", "DV", "MDV", "WT", "AGE", "SEX", "VOLGRP", "AAG"};

enum Col { ID, TIME, EVID, AMT, DV, MDV, WT, AGE, SEX, VOLGRP, AAG };

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
  return out;
}

bool is_missing(std::string_view s) { return s.empty() || s == "."; }

std::optional<double> parse_number(std::string_view field, std::string_view column, std::size_t row) {
  if (is_missing(field)) return std::nullopt;
  double value = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || !std::isfinite(value)) {
    throw DatasetError(fmt::format("row {}: column {} is not numeric: '{}'", row, column, field), row);
  }
  return value;
}

double require_number(std::string_view field, std::string_view column, std::size_t row) {
  const auto v = parse_number(field, column, row);
  if (!v) throw DatasetError(fmt::format("row {}: column {} is missing", row, column), row);
  return *v;
}

int require_integer(std::string_view field, std::string_view column, std::size_t row) {
  const double v = require_number(field, column, row);
  if (v != std::floor(v) || std::abs(v) > 2e9) {
    throw DatasetError(fmt::format("row {}: column {} must be an integer: '{}'", row, column, field), row);
  }
  return static_cast<int>(v);
}

int require_flag(std::string_view field, std::string_view column, std::size_t row) {
  const int v = require_integer(field, column, row);
  if (v != 0 && v != 1) {
    throw DatasetError(fmt::format("row {}: column {} must be 0 or 1", row, column), row);
  }
  return v;
}

void sort_records(std::vector<EventRecord>& records) {
  std::sort(records.begin(), records.end(), [](const EventRecord& a, const EventRecord& b) {
    // doses precede observations recorded at the same time
    return std::make_tuple(a.time, -a.evid) < std::make_tuple(b.time, -b.evid);
  });
}

void flag_below_lloq(std::vector<EventRecord>& records, double lloq) {
  for (auto& r : records) {
    if (r.is_observation() && r.dv && *r.dv < lloq) r.mdv = 1;
  }
}

std::string format_number(double v) { return fmt::format("{}", v); }

}  // namespace

std::string_view to_string(Covariate c) {
  switch (c) {
    case Covariate::wt: return "WT";
    case Covariate::age: return "AGE";
    case Covariate::sex: return "SEX";
    case Covariate::volgrp: return "VOLGRP";
    case Covariate::aag: return "AAG";
  }
  return "?";
}

Covariate covariate_from_string(std::string_view name) {
  const std::string u = upper(name);
  for (Covariate c : {Covariate::wt, Covariate::age, Covariate::sex, Covariate::volgrp, Covariate::aag}) {
    if (u == to_string(c)) return c;
  }
  throw std::invalid_argument(fmt::format("unknown covariate '{}'", name));
}

bool is_categorical(Covariate c) { return c == Covariate::sex || c == Covariate::volgrp; }

DatasetError::DatasetError(const std::string& what, std::size_t row)
    : std::runtime_error(what), row_(row) {}

std::optional<double> Covariates::value(Covariate c) const {
  switch (c) {
    case Covariate::wt: return wt;
    case Covariate::age: return age;
    case Covariate::sex: return static_cast<double>(sex);
    case Covariate::volgrp: return static_cast<double>(volgrp);
    case Covariate::aag: return aag;
  }
  return std::nullopt;
}

double Subject::total_dose() const {
  double total = 0.0;
  for (const auto& r : records) {
    if (r.is_dose()) total += r.amt.value_or(0.0);
  }
  return total;
}

std::size_t Subject::n_usable() const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const EventRecord& r) { return r.usable(); }));
}

std::size_t StudyDataset::n_observation_rows() const {
  std::size_t n = 0;
  for (const auto& s : subjects)
    for (const auto& r : s.records) n += r.is_observation();
  return n;
}

std::size_t StudyDataset::n_usable() const {
  std::size_t n = 0;
  for (const auto& s : subjects) n += s.n_usable();
  return n;
}

std::size_t StudyDataset::n_censored() const {
  std::size_t n = 0;
  for (const auto& s : subjects)
    for (const auto& r : s.records) n += (r.is_observation() && r.mdv == 1);
  return n;
}

const Subject* StudyDataset::find(int id) const {
  const auto it = std::lower_bound(subjects.begin(), subjects.end(), id,
                                   [](const Subject& s, int v) { return s.id < v; });
  return (it != subjects.end() && it->id == id) ? &*it : nullptr;
}

StudyDataset parse_dataset(std::istream& in, double lloq) {
  if (!(lloq >= 0.0)) throw std::invalid_argument("lloq must be non-negative");
  std::string line;
  std::size_t row = 0;
  std::array<int, kColumns.size()> position;
  position.fill(-1);
  std::size_t n_fields = 0;

  while (std::getline(in, line)) {
    ++row;
    if (!trim(line).empty()) break;
  }
  if (row == 0 || trim(line).empty()) throw DatasetError("dataset is empty: header row required", 0);
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

  const auto header = split(line);
  n_fields = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string name = upper(header[i]);
    const auto it = std::find(kColumns.begin(), kColumns.end(), name);
    if (it == kColumns.end()) {
      throw DatasetError(fmt::format("row {}: unknown column '{}'", row, header[i]), row);
    }
    auto& slot = position[static_cast<std::size_t>(it - kColumns.begin())];
    if (slot >= 0) throw DatasetError(fmt::format("row {}: duplicate column '{}'", row, name), row);
    slot = static_cast<int>(i);
  }
  for (std::size_t c = 0; c < kColumns.size(); ++c) {
    if (position[c] < 0 && c != AAG) {
      throw DatasetError(fmt::format("missing required column {}", kColumns[c]), row);
    }
  }

  std::map<int, Subject> by_id;
  std::map<int, std::size_t> first_row;
  std::set<std::tuple<int, double, int>> seen;

  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != n_fields) {
      throw DatasetError(
          fmt::format("row {}: expected {} fields, found {}", row, n_fields, fields.size()), row);
    }
    auto field = [&](Col c) -> std::string_view {
      return position[c] < 0 ? std::string_view(".") : fields[static_cast<std::size_t>(position[c])];
    };

    EventRecord r;
    r.subject_id = require_integer(field(ID), "ID", row);
    r.time = require_number(field(TIME), "TIME", row);
    if (r.time < 0) throw DatasetError(fmt::format("row {}: TIME must be >= 0", row), row);
    r.evid = require_flag(field(EVID), "EVID", row);
    r.amt = parse_number(field(AMT), "AMT", row);
    r.dv = parse_number(field(DV), "DV", row);
    const auto mdv = parse_number(field(MDV), "MDV", row);
    r.mdv = mdv ? require_flag(field(MDV), "MDV", row) : 0;
    r.cov.wt = require_number(field(WT), "WT", row);
    if (r.cov.wt <= 0) throw DatasetError(fmt::format("row {}: WT must be positive", row), row);
    r.cov.age = require_number(field(AGE), "AGE", row);
    r.cov.sex = static_cast<Sex>(require_flag(field(SEX), "SEX", row));
    r.cov.volgrp = static_cast<VolumeGroup>(require_flag(field(VOLGRP), "VOLGRP", row));
    r.cov.aag = parse_number(field(AAG), "AAG", row);

    if (r.is_dose()) {
      if (r.dv) throw DatasetError(fmt::format("row {}: dose row has a DV value", row), row);
      if (!r.amt || *r.amt <= 0) {
        throw DatasetError(fmt::format("row {}: dose row needs AMT > 0", row), row);
      }
      r.mdv = 1;
    } else {
      if (r.amt) throw DatasetError(fmt::format("row {}: observation row has an AMT value", row), row);
      if (!r.dv) r.mdv = 1;
    }

    if (!seen.emplace(r.subject_id, r.time, r.evid).second) {
      throw DatasetError(fmt::format("row {}: duplicate record for ID {} at TIME {} (EVID {})", row,
                                     r.subject_id, r.time, r.evid),
                         row);
    }

    auto [it, inserted] = by_id.try_emplace(r.subject_id);
    Subject& s = it->second;
    if (inserted) {
      s.id = r.subject_id;
      s.cov = r.cov;
      first_row[r.subject_id] = row;
    } else if (!(s.cov == r.cov)) {
      throw DatasetError(fmt::format("row {}: covariates of ID {} differ from row {}", row,
                                     r.subject_id, first_row[r.subject_id]),
                         row);
    }
    s.records.push_back(r);
  }

  std::vector<Subject> subjects;
  subjects.reserve(by_id.size());
  for (auto& [id, s] : by_id) {
    if (std::none_of(s.records.begin(), s.records.end(), [](const EventRecord& r) { return r.is_dose(); })) {
      throw DatasetError(fmt::format("ID {} has no dose record", id), first_row[id]);
    }
    subjects.push_back(std::move(s));
  }
  return make_dataset(std::move(subjects), lloq);
}

StudyDataset parse_dataset_text(std::string_view text, double lloq) {
  std::istringstream in{std::string(text)};
  return parse_dataset(in, lloq);
}

StudyDataset read_dataset(const std::string& path, double lloq) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
  return parse_dataset(in, lloq);
}

StudyDataset make_dataset(std::vector<Subject> subjects, double lloq) {
  std::sort(subjects.begin(), subjects.end(), [](const Subject& a, const Subject& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < subjects.size(); ++i) {
    if (subjects[i].id == subjects[i - 1].id) {
      throw DatasetError(fmt::format("duplicate subject id {}", subjects[i].id), 0);
    }
  }
  for (auto& s : subjects) {
    sort_records(s.records);
    flag_below_lloq(s.records, lloq);
  }
  StudyDataset ds;
  ds.subjects = std::move(subjects);
  ds.lloq = lloq;
  return ds;
}

void write_dataset(std::ostream& out, const StudyDataset& ds) {
  out << "ID,TIME,EVID,AMT,DV,MDV,WT,AGE,SEX,VOLGRP,AAG\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("."); };
  for (const auto& s : ds.subjects) {
    for (const auto& r : s.records) {
      out << r.subject_id << ',' << format_number(r.time) << ',' << r.evid << ',' << opt(r.amt) << ','
          << opt(r.dv) << ',' << r.mdv << ',' << format_number(r.cov.wt) << ','
          << format_number(r.cov.age) << ',' << static_cast<int>(r.cov.sex) << ','
          << static_cast<int>(r.cov.volgrp) << ',' << opt(r.cov.aag) << '\n';
    }
  }
}

std::string serialize_dataset(const StudyDataset& ds) {
  std::ostringstream out;
  write_dataset(out, ds);
  return out.str();
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

ContinuousSummary summarize_values(std::string name, std::vector<double> values) {
  ContinuousSummary s;
  s.name = std::move(name);
  s.n = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.median = quantile(values, 0.5);
  s.q1 = quantile(values, 0.25);
  s.q3 = quantile(values, 0.75);
  return s;
}

CovariateSummary summarize_covariates(const StudyDataset& ds) {
  CovariateSummary out;
  for (Covariate c : {Covariate::wt, Covariate::age, Covariate::aag}) {
    std::vector<double> values;
    for (const auto& s : ds.subjects) {
      if (const auto v = s.cov.value(c)) values.push_back(*v);
    }
    out.continuous.push_back(summarize_values(std::string(to_string(c)), std::move(values)));
  }
  const auto n = static_cast<double>(ds.subjects.size());
  auto add_level = [&](std::string covariate, std::string level, std::size_t count) {
    out.categories.push_back({std::move(covariate), std::move(level), count,
                              n > 0 ? 100.0 * static_cast<double>(count) / n : 0.0});
  };
  std::size_t female = 0, high = 0;
  for (const auto& s : ds.subjects) {
    female += s.cov.sex == Sex::female;
    high += s.cov.volgrp == VolumeGroup::high_volume;
  }
  add_level("SEX", "female", female);
  add_level("SEX", "male", ds.subjects.size() - female);
  add_level("VOLGRP", "low_volume", ds.subjects.size() - high);
  add_level("VOLGRP", "high_volume", high);
  return out;
}

}  // namespace popk
