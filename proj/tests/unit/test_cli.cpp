#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSource = POPK_SOURCE_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "popk_test_cli" / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json study_config() {
  std::ifstream in(kSource / "configs" / "study.json");
  json j;
  in >> j;
  j["dataset"] = (kSource / "data" / "levobupivacaine_synthetic.csv").string();
  j["compare_groups"]["labels"] = (kSource / "data" / "tap_outcome.csv").string();
  j.erase("output");
  j.erase("seed");
  return j;
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = scratch(name + ".json");
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Run {
  int status;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int status = popk::cli::run(args, out, err);
  return {status, out.str(), err.str()};
}

void check_same_directory(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
  std::size_t count_b = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++count_b;
  REQUIRE(names.size() == count_b);
  for (const auto& n : names) {
    INFO(n);
    CHECK(slurp(a / n) == slurp(b / n));
  }
}

}  // namespace

TEST_CASE("usage errors leave no artifacts") {
  SUBCASE("missing dataset path") {
    auto j = study_config();
    j["dataset"] = (kSource / "data" / "does_not_exist.csv").string();
    const auto cfg = write_config("missing_dataset", j);
    const auto out = scratch("missing_dataset_out");
    const auto r = invoke({"fit", "--config", cfg.string(), "--output", out.string()});
    CHECK(r.status == popk::cli::kExitUsage);
    CHECK_FALSE(fs::exists(out));
    CHECK(r.err.find("does_not_exist.csv") != std::string::npos);
  }
  SUBCASE("bootstrap with n = 0") {
    auto j = study_config();
    j["bootstrap"]["n"] = 0;
    const auto cfg = write_config("bootstrap_zero", j);
    const auto out = scratch("bootstrap_zero_out");
    CHECK(invoke({"bootstrap", "--config", cfg.string(), "--output", out.string(), "--seed", "1"}).status ==
          popk::cli::kExitUsage);
    CHECK_FALSE(fs::exists(out));
  }
  SUBCASE("randomized commands need a seed") {
    const auto cfg = write_config("no_seed", study_config());
    for (std::string cmd : {"simulate", "bootstrap", "vpc"}) {
      const auto out = scratch("no_seed_" + cmd);
      const auto r = invoke({cmd, "--config", cfg.string(), "--output", out.string()});
      CHECK(r.status == popk::cli::kExitUsage);
      CHECK(r.err.find("seed") != std::string::npos);
      CHECK_FALSE(fs::exists(out));
    }
  }
  SUBCASE("unknown config key") {
    auto j = study_config();
    j["estimation"]["tolerance"] = 1e-3;
    const auto cfg = write_config("unknown_key", j);
    const auto r = invoke({"fit", "--config", cfg.string(), "--output", scratch("unknown_key_out").string()});
    CHECK(r.status == popk::cli::kExitUsage);
    CHECK(r.err.find("tolerance") != std::string::npos);
  }
  SUBCASE("unknown fixed parameter") {
    auto j = study_config();
    j["model"]["fixed"] = json::array({"F_SMALL"});
    const auto cfg = write_config("bad_fixed", j);
    CHECK(invoke({"fit", "--config", cfg.string(), "--output", scratch("bad_fixed_out").string()}).status ==
          popk::cli::kExitUsage);
  }
  SUBCASE("no subcommand or bad flag") {
    CHECK(invoke({}).status == popk::cli::kExitUsage);
    CHECK(invoke({"fit", "--bogus"}).status == popk::cli::kExitUsage);
    CHECK(invoke({"fit", "--help"}).status == popk::cli::kExitSuccess);
  }
  SUBCASE("labels must cover every subject") {
    const auto labels = scratch("partial_labels.csv");
    std::ofstream(labels) << "ID,SUCCESS\n1,1\n2,0\n";
    auto j = study_config();
    j["compare_groups"]["labels"] = labels.string();
    const auto cfg = write_config("partial_labels", j);
    const auto out = scratch("partial_labels_out");
    const auto r = invoke({"compare-groups", "--config", cfg.string(), "--output", out.string()});
    CHECK(r.status == popk::cli::kExitUsage);
    CHECK(r.err.find("subject 3") != std::string::npos);
    CHECK_FALSE(fs::exists(out));
  }
}

TEST_CASE("fit writes the parameter table and reruns byte for byte") {
  const auto cfg = write_config("fit", study_config());
  const std::string dataset = (kSource / "data" / "levobupivacaine_synthetic.csv").string();
  const std::string before = slurp(dataset);
  const auto a = scratch("fit_a");
  const auto b = scratch("fit_b");
  REQUIRE(invoke({"fit", "--config", cfg.string(), "--output", a.string()}).status == popk::cli::kExitSuccess);
  REQUIRE(invoke({"fit", "--config", cfg.string(), "--output", b.string(), "--threads", "3"}).status ==
          popk::cli::kExitSuccess);
  check_same_directory(a, b);
  CHECK(slurp(dataset) == before);

  std::istringstream table(slurp(a / "parameters.csv"));
  std::string header;
  std::getline(table, header);
  CHECK(header == "Parameter,Estimate,RSE (%),[95% CI],Shrinkage (%)");
  std::vector<std::string> names;
  std::string line;
  const std::regex row(R"(^([^,]+),([^,]+),([^,]+),([^,]+),([^,]+)$)");
  while (std::getline(table, line)) {
    std::smatch m;
    REQUIRE(std::regex_match(line, m, row));
    names.push_back(m[1]);
    if (m[1] == "F_SMALL") CHECK(m[2] == "1 FIX");
    if (m[1] == "CL") CHECK(std::regex_match(m[4].str(), std::regex(R"(^\[[0-9.e+-]+ - [0-9.e+-]+\]$)")));
  }
  const std::vector<std::string> expected{"CL",           "V",         "KA",           "F_SMALL",
                                          "F_LARGE",      "CL_WT_POWER", "BSV_CL (CV %)", "BSV_V (CV %)",
                                          "BSV_KA (CV %)", "SIGMA_PROP (CV %)"};
  CHECK(names == expected);

  for (auto f : {"ebes.csv", "gof.csv", "fit_report.json", "params.json", "manifest.json"}) CHECK(fs::exists(a / f));
  const auto report = json::parse(slurp(a / "fit_report.json"));
  CHECK(report["converged"] == true);
  CHECK(report["n_subjects"] == 40);

  const auto manifest = json::parse(slurp(a / "manifest.json"));
  CHECK(manifest["command"] == "fit");
  CHECK(manifest["exit_status"] == 0);
  const nlohmann::ordered_json echoed = nlohmann::ordered_json::parse(slurp(a / "manifest.json"))["config"];
  CHECK(manifest["config_hash"] == popk::cli::hex64(popk::cli::fnv1a(echoed.dump())));
  CHECK(manifest["inputs"]["dataset"]["fnv1a"] == popk::cli::hex64(popk::cli::fnv1a(before)));

  SUBCASE("params.json feeds later commands") {
    auto j = study_config();
    j["parameters"] = (a / "params.json").string();
    const auto cfg2 = write_config("from_params", j);
    const auto out = scratch("gof_from_params");
    REQUIRE(invoke({"gof", "--config", cfg2.string(), "--output", out.string()}).status == popk::cli::kExitSuccess);
    const auto summary = json::parse(slurp(out / "gof_summary.json"));
    CHECK(summary["source"] == "parameters");
    CHECK(summary["ofv"].get<double>() == doctest::Approx(report["ofv"].get<double>()).epsilon(1e-6));
  }
}

TEST_CASE("fit that stops early exits with analysis failure and partial artifacts") {
  auto j = study_config();
  j["estimation"]["max_evaluations"] = 5;
  const auto cfg = write_config("fit_fail", j);
  const auto out = scratch("fit_fail_out");
  const auto r = invoke({"fit", "--config", cfg.string(), "--output", out.string()});
  CHECK(r.status == popk::cli::kExitAnalysisFailure);
  CHECK(r.err.find("warning") != std::string::npos);
  CHECK(fs::exists(out / "params.json"));
  CHECK(json::parse(slurp(out / "manifest.json"))["exit_status"] == 1);
}

TEST_CASE("randomized commands are independent of the thread count") {
  auto j = study_config();
  j["bootstrap"]["n"] = 4;
  j["vpc"]["n"] = 60;
  const auto cfg = write_config("threads", j);
  for (std::string cmd : {"simulate", "bootstrap", "vpc"}) {
    INFO(cmd);
    const auto a = scratch("threads_" + cmd + "_1");
    const auto b = scratch("threads_" + cmd + "_4");
    REQUIRE(invoke({cmd, "--config", cfg.string(), "--output", a.string(), "--seed", "77", "--threads", "1"}).status ==
            popk::cli::kExitSuccess);
    REQUIRE(invoke({cmd, "--config", cfg.string(), "--output", b.string(), "--seed", "77", "--threads", "4"}).status ==
            popk::cli::kExitSuccess);
    check_same_directory(a, b);
  }
  SUBCASE("a different seed changes the simulation") {
    const auto a = scratch("seed_a");
    const auto b = scratch("seed_b");
    invoke({"simulate", "--config", cfg.string(), "--output", a.string(), "--seed", "1"});
    invoke({"simulate", "--config", cfg.string(), "--output", b.string(), "--seed", "2"});
    CHECK(slurp(a / "dataset.csv") != slurp(b / "dataset.csv"));
  }
}

TEST_CASE("vpc on the bundled dataset has one row per nominal time") {
  auto j = study_config();
  j["vpc"]["n"] = 100;
  const auto cfg = write_config("vpc_bins", j);
  const auto out = scratch("vpc_bins_out");
  REQUIRE(invoke({"vpc", "--config", cfg.string(), "--output", out.string(), "--seed", "5"}).status ==
          popk::cli::kExitSuccess);
  std::istringstream in(slurp(out / "vpc.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 8);
}

TEST_CASE("exposure summary follows the median [Q1 - Q3] layout") {
  auto j = study_config();
  j["parameters"] = (kSource / "configs" / "final_parameters.json").string();
  const auto cfg = write_config("exposures", j);
  const auto out = scratch("exposures_out");
  REQUIRE(invoke({"exposures", "--config", cfg.string(), "--output", out.string()}).status == popk::cli::kExitSuccess);
  std::istringstream in(slurp(out / "exposures_summary.csv"));
  std::string line;
  std::getline(in, line);
  CHECK(line == "Variable,N,Mean,Median [Q1 - Q3]");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::regex_match(line, std::regex(R"(^[^,]+,40,[0-9.e+-]+,[0-9.e+-]+ \[[0-9.e+-]+ - [0-9.e+-]+\]$)")));
  }
  CHECK(rows == 4);
}

TEST_CASE("compare-groups reports the sex by outcome Fisher test") {
  auto j = study_config();
  j["parameters"] = (kSource / "configs" / "final_parameters.json").string();
  const auto cfg = write_config("compare", j);
  const auto out = scratch("compare_out");
  REQUIRE(invoke({"compare-groups", "--config", cfg.string(), "--output", out.string()}).status ==
          popk::cli::kExitSuccess);
  const auto text = slurp(out / "compare_groups.csv");
  CHECK(text.rfind("VARIABLE,TEST,STATISTIC,P_VALUE,NOTE\n", 0) == 0);
  CHECK(text.find("SEX,fisher_greater,") != std::string::npos);
  CHECK(text.find("0.03344932808") != std::string::npos);
}

TEST_CASE("config round trip") {
  const auto c = popk::cli::parse_config(study_config(), kSource);
  const auto echoed = popk::cli::to_json(c);
  const auto again = popk::cli::parse_config(json::parse(echoed.dump()), kSource);
  CHECK(popk::cli::to_json(again).dump() == echoed.dump());
  const auto final = popk::final_model_parameters();
  CHECK(c.initial.theta == final.theta);
  for (std::size_t k = 0; k < 3; ++k) CHECK(c.initial.omega[k] == doctest::Approx(final.omega[k]).epsilon(1e-12));
  CHECK(c.initial.sigma == final.sigma);
  CHECK(popk::cli::fnv1a("") == 14695981039346656037ULL);
  CHECK(popk::cli::fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}
