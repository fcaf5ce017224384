#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "regmarket/experiment.hpp"

using namespace regmarket;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

const fs::path source_dir = fs::path(__FILE__).parent_path().parent_path().parent_path();

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "regmarket_test_experiment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json base_config() {
  return nlohmann::json::parse(R"({
    "schema_version": 1,
    "seed": 3,
    "data": {"synthetic": {"support_count": 2, "confounder_strength": 1.0, "feature_noise_std": 0.5,
                           "noise_std": 0.5, "length": 120}},
    "tier": "online",
    "model": {"forgetting": 0.99},
    "lift": {"conditioning": "observational"},
    "windows": {"train": [0, 60], "test": [60, 120]}
  })");
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + REGMARKET_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("parse_config collects every violation with its field path") {
  auto j = base_config();
  j["model"]["forgetting"] = 1.5;
  j["valuation"] = -2.0;
  j["lift"]["backend"] = "quantum";
  const auto [config, violations] = parse_config(j, ".");
  std::string all;
  for (const auto& v : violations) all += v + "\n";
  CHECK_THAT(all, ContainsSubstring("model.forgetting"));
  CHECK_THAT(all, ContainsSubstring("valuation"));
  CHECK_THAT(all, ContainsSubstring("lift.backend"));
  CHECK(violations.size() == 3);
}

TEST_CASE("parse_config fills defaults and resolves relative paths") {
  auto j = base_config();
  j["output"] = {{"dir", "../out/x"}};
  const auto [c, violations] = parse_config(j, "/tmp/configs");
  REQUIRE(violations.empty());
  CHECK(c.seed == 3);
  CHECK(c.policies.size() == 1);
  CHECK(c.policies[0].name == "observational-shapley");
  CHECK(c.valuation == 1.0);
  CHECK(*c.output_dir == fs::path("/tmp/out/x"));
  CHECK(c.synthetic->support_count == 2);
}

TEST_CASE("population tier needs synthetic data and the closed-form lift") {
  auto j = base_config();
  j["tier"] = "population";
  j["lift"]["backend"] = "monte-carlo";
  const auto violations = parse_config(j, ".").second;
  REQUIRE(violations.size() == 1);
  CHECK_THAT(violations[0], ContainsSubstring("tier"));
}

TEST_CASE("missing required sections are reported") {
  const auto violations = parse_config(nlohmann::json::object(), ".").second;
  std::string all;
  for (const auto& v : violations) all += v + "\n";
  CHECK_THAT(all, ContainsSubstring("schema_version"));
  CHECK_THAT(all, ContainsSubstring("seed"));
  CHECK_THAT(all, ContainsSubstring("data"));
}

TEST_CASE("runs are byte-identical for a fixed seed and skip the verdict without an attack") {
  const auto dir = scratch("rerun");
  auto j = base_config();
  j["policies"] = {"observational-shapley", "interventional-shapley"};
  const auto [c, violations] = parse_config(j, dir);
  REQUIRE(violations.empty());
  const auto first = run_experiment(c, dir / "a");
  run_experiment(c, dir / "b");
  for (const auto& f : first.files) {
    INFO(f);
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  CHECK(fs::exists(dir / "a" / "ledger_observational-shapley.csv"));
  CHECK(fs::exists(dir / "a" / "ledger_interventional-shapley.csv"));
  CHECK(fs::exists(dir / "a" / "summary.txt"));
  CHECK_FALSE(fs::exists(dir / "a" / "verdict.csv"));
  CHECK_FALSE(fs::exists(dir / "a" / "curve.csv"));
}

TEST_CASE("curve-only runs need a curve section") {
  const auto [c, violations] = parse_config(base_config(), ".");
  REQUIRE(violations.empty());
  const auto dir = scratch("nocurve");
  CHECK_THROWS_AS(run_experiment(c, dir / "out", true), Error);
  CHECK_FALSE(fs::exists(dir / "out"));
}

TEST_CASE("a four-policy curve covers every method and K") {
  const auto dir = scratch("curve");
  auto j = base_config();
  j["tier"] = "population";
  j["data"]["synthetic"]["length"] = 10;
  j["windows"] = {{"train", {0, 5}}, {"test", {5, 10}}};
  j["policies"] = {"observational-shapley", "interventional-shapley", "robust-shapley", "banzhaf"};
  j["curve"] = {{"attacker", "a1"}, {"k_max", 3}};
  const auto [c, violations] = parse_config(j, dir);
  REQUIRE(violations.empty());
  const auto report = run_experiment(c, dir / "out", true);
  CHECK(report.curve.size() == 4 * 4 * 2);
  const auto csv = slurp(dir / "out" / "curve.csv");
  for (const char* m : {"observational-shapley,3,a1", "interventional-shapley,3,a1", "robust-shapley,3,a1", "banzhaf,3,a1"})
    CHECK_THAT(csv, ContainsSubstring(m));
  CHECK_FALSE(fs::exists(dir / "out" / "summary.txt"));
}

TEST_CASE("csv data with a prescreen and lag runs end to end") {
  const auto dir = scratch("csv");
  {
    std::ofstream out(dir / "series.csv");
    out << "timestamp,p,q,r\n";
    for (int t = 0; t < 80; ++t)
      out << t << ',' << std::sin(0.3 * t) << ',' << std::sin(0.3 * (t + 1)) + 0.01 * (t % 3) << ',' << std::cos(0.7 * t)
          << '\n';
  }
  auto j = base_config();
  j["data"] = {{"csv", {{"path", "series.csv"}, {"target", "p"}, {"lag", 1}, {"prescreen_threshold", 0.99}}}};
  j.erase("windows");
  const auto [c, violations] = parse_config(j, dir);
  REQUIRE(violations.empty());
  const auto report = run_experiment(c, dir / "out");
  CHECK(report.prepared.data.rows() == 79);
  CHECK(fs::exists(dir / "out" / "ledger_observational-shapley.csv"));
}

TEST_CASE("CLI exit codes") {
  const auto dir = scratch("cli");
  auto good = base_config();
  good["output"] = {{"dir", "out"}};
  const auto ok = write_config(dir, good);
  CHECK(cli("validate \"" + ok.string() + "\"", dir / "log") == 0);
  CHECK(cli("run \"" + ok.string() + "\" --seed 4", dir / "log") == 0);
  CHECK_THAT(slurp(dir / "log"), ContainsSubstring("summary.txt"));
  CHECK(fs::exists(dir / "out" / "resolved_config.json"));
  CHECK(nlohmann::json::parse(slurp(dir / "out" / "resolved_config.json"))["seed"] == 4);

  auto bad = base_config();
  bad["model"]["forgetting"] = 2.0;
  const auto broken = write_config(dir, bad);
  CHECK(cli("validate \"" + broken.string() + "\"", dir / "log") == 2);
  CHECK_THAT(slurp(dir / "log"), ContainsSubstring("model.forgetting"));
  CHECK(cli("run \"" + broken.string() + "\"", dir / "log") == 2);
  CHECK(cli("curve \"" + write_config(dir, good).string() + "\"", dir / "log") == 2);
  CHECK(cli("frobnicate", dir / "log") == 2);

  auto runtime = base_config();
  runtime["attack"] = {{"attacker", "nobody"}, {"replicates", {{"x1", 1}}}};
  runtime["output"] = {{"dir", "out2"}};
  CHECK(cli("run \"" + write_config(dir, runtime).string() + "\"", dir / "log") == 3);
}

TEST_CASE("the output directory falls back to the environment") {
  const auto dir = scratch("env");
  const auto [c, violations] = parse_config(base_config(), dir);
  REQUIRE(violations.empty());
  ::setenv(out_dir_env, (dir / "from_env").c_str(), 1);
  CHECK(output_dir(c) == dir / "from_env");
  ::unsetenv(out_dir_env);
  CHECK(output_dir(c) == fs::path("regmarket_out"));
}

TEST_CASE("the two-seller demo pays the replicating seller two thirds") {
  const auto dir = scratch("demo");
  const auto [c, violations] = parse_config(read_json_file(source_dir / "configs" / "two_seller_replication.json"),
                                            source_dir / "configs");
  REQUIRE(violations.empty());
  const auto report = run_experiment(c, dir);
  REQUIRE(report.policies.size() == 1);
  const auto& v = *report.policies[0].verdict;
  CHECK(std::abs(v.honest.at("a1") / v.honest_revenue - 0.5) < 0.02);
  CHECK(std::abs(v.attacked.at("a1") / v.attacked_revenue - 2.0 / 3.0) < 0.02);
  CHECK(v.classification == Robustness::not_robust);
  CHECK_THAT(slurp(dir / "verdict.csv"), ContainsSubstring("not-robust"));
}
