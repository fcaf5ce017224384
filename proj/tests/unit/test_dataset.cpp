#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "regmarket/dataset.hpp"

using namespace regmarket;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "regmarket_test_dataset";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::filesystem::path write_file(const std::string& name, const std::string& content) {
  auto p = scratch(name);
  std::ofstream(p) << content;
  return p;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::config;
}

}  // namespace

TEST_CASE("ingest_csv builds default ownership and normalizes to the unit interval") {
  const auto p = write_file("basic.csv", "timestamp,y,u,v\n0,1,10,5\n1,3,20,6\n2,5,30,9\n");
  const auto data = ingest_csv(p, "y", true);
  REQUIRE(data.rows() == 3);
  REQUIRE(data.central_count == 1);
  REQUIRE(data.columns == std::vector<std::string>{"y", "u", "v"});
  REQUIRE(data.agents.size() == 2);
  CHECK(data.agents[0].id == "u");
  CHECK(data.agents[1].columns == std::vector<std::size_t>{2});
  CHECK(data.timestamps == std::vector<std::string>{"0", "1", "2"});
  CHECK(data.target.minCoeff() == 0.0);
  CHECK(data.target.maxCoeff() == 1.0);
  CHECK_THAT(data.features(1, 2), WithinAbs(0.25, 1e-15));
  CHECK(data.normalization.at("u").min == 10.0);
  CHECK(data.normalization.at("u").max == 30.0);
}

TEST_CASE("ingest_csv honours an ownership manifest and orders central columns first") {
  const auto p = write_file("owned.csv", "p,q,r,y\n1,2,3,4\n2,1,5,3\n3,3,4,1\n");
  const auto m = write_file("owned.json", R"({"agents":[{"id":"s1","columns":["p","q"]},)"
                                          R"({"id":"buyer","central":true,"columns":["r"]}]})");
  const auto data = ingest_csv(p, "y", false, m);
  REQUIRE(data.central_agent == "buyer");
  REQUIRE(data.central_count == 1);
  CHECK(data.columns.front() == "r");
  REQUIRE(data.agents.size() == 1);
  CHECK(data.agents[0].columns == std::vector<std::size_t>{1, 2});
  CHECK(data.features(1, 0) == 5.0);
}

TEST_CASE("ingest_csv picks up a sidecar manifest") {
  const auto p = write_file("side.csv", "a,b,y\n1,2,3\n2,1,5\n");
  write_file("side.csv.manifest.json", R"({"agents":[{"id":"c","central":true,"columns":["a"]},{"id":"s","columns":["b"]}]})");
  const auto data = ingest_csv(p, "y", false);
  CHECK(data.central_agent == "c");
  CHECK(data.agents.at(0).id == "s");
}

TEST_CASE("ingest_csv reports typed errors") {
  const auto ok = write_file("ok.csv", "y,x\n1,2\n2,3\n");
  CHECK(kind_of([&] { ingest_csv(ok, "missing", false); }) == ErrorKind::schema);

  const auto bad = write_file("bad.csv", "y,x\n1,2\n2,abc\n");
  try {
    ingest_csv(bad, "y", false);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parse);
    CHECK_THAT(e.what(), ContainsSubstring("row 2"));
  }

  const auto empty = write_file("empty.csv", "y,x\n");
  CHECK(kind_of([&] { ingest_csv(empty, "y", false); }) == ErrorKind::empty_data);

  const auto flat = write_file("flat.csv", "y,x\n1,7\n2,7\n");
  CHECK(kind_of([&] { ingest_csv(flat, "y", true); }) == ErrorKind::degenerate_range);
  CHECK_NOTHROW(ingest_csv(flat, "y", false));

  const auto two_central = write_file("two.json", R"({"agents":[{"id":"a","central":true,"columns":["y"]},)"
                                                  R"({"id":"b","central":true,"columns":["x"]}]})");
  CHECK(kind_of([&] { ingest_csv(ok, "y", false, two_central); }) == ErrorKind::schema);
}

TEST_CASE("build_lags aligns features one step behind the target") {
  const auto p = write_file("lags.csv", "y,x\n1,10\n2,20\n3,30\n4,40\n");
  const auto data = ingest_csv(p, "y", false);
  const auto lagged = build_lags(data, 1);
  REQUIRE(lagged.rows() == 3);
  CHECK(lagged.target[0] == 2.0);
  CHECK(lagged.features(0, 1) == 10.0);
  CHECK(lagged.features(0, 0) == 1.0);  // the central agent's own past target

  const auto same = build_lags(data, 0);
  CHECK(same.features == data.features);
  CHECK(kind_of([&] { build_lags(data, 4); }) == ErrorKind::insufficient_history);
}

TEST_CASE("generate_confounded is deterministic and registers replicates with their owner") {
  SyntheticSpec spec;
  spec.central_count = 1;
  spec.support_count = 2;
  spec.length = 200;
  spec.replicate_plan[1] = {3, 0.1};
  const auto a = generate_confounded(spec, 9);
  const auto b = generate_confounded(spec, 9);
  CHECK(a.features == b.features);
  CHECK(a.target == b.target);
  REQUIRE(a.feature_count() == 6);
  CHECK(a.agents[0].columns == std::vector<std::size_t>{1, 3, 4, 5});
  CHECK(a.replicas.size() == 3);
  CHECK(a.is_replica(4));
  CHECK_FALSE(a.is_replica(2));
  CHECK(a.columns[3] == "x1#r1");
  const auto c = generate_confounded(spec, 10);
  CHECK(c.features != a.features);
}

TEST_CASE("replicate draws are nested in the replicate count") {
  SyntheticSpec spec;
  spec.length = 50;
  spec.replicate_plan[0] = {2, 0.3};
  const auto two = generate_confounded(spec, 4);
  spec.replicate_plan[0] = {4, 0.3};
  const auto four = generate_confounded(spec, 4);
  CHECK(two.features.col(2) == four.features.col(2));
  CHECK(two.features.col(3) == four.features.col(3));
}

TEST_CASE("population moments match the sample moments of a long synthetic run") {
  SyntheticSpec spec;
  spec.central_count = 1;
  spec.support_count = 2;
  spec.confounder_strength = 1.5;
  spec.feature_noise_std = 0.7;
  spec.true_weights = Eigen::Vector3d(0.5, -1.0, 2.0);
  spec.noise_std = 0.4;
  spec.length = 200000;
  spec.replicate_plan[2] = {1, 0.3};
  const auto data = generate_confounded(spec, 77);
  const auto pm = population_moments(spec, data);

  const Eigen::MatrixXd centered = data.features.rowwise() - data.features.colwise().mean();
  const Eigen::MatrixXd sample_cov = centered.transpose() * centered / double(data.rows());
  const Eigen::VectorXd yc = data.target.array() - data.target.mean();
  const Eigen::VectorXd sample_cross = centered.transpose() * yc / double(data.rows());
  CHECK((sample_cov - pm.covariance).cwiseAbs().maxCoeff() < 0.05);
  CHECK((sample_cross - pm.target_cross).cwiseAbs().maxCoeff() < 0.05);
  CHECK_THAT(yc.squaredNorm() / double(data.rows()), WithinAbs(pm.target_variance, 0.1));
}

TEST_CASE("prescreen_redundant removes support columns that mirror a central column") {
  SyntheticSpec spec;
  spec.central_count = 1;
  spec.support_count = 2;
  spec.length = 300;
  auto data = generate_confounded(spec, 1);
  data.features.col(1) = 2.0 * data.features.col(0).array() + 1.0;  // x1 is an affine copy of c1
  const auto r = prescreen_redundant(data, 1.0);
  REQUIRE(r.removed.size() == 1);
  CHECK(r.removed[0].column == "x1");
  CHECK(r.removed[0].agent == "a1");
  CHECK(r.data.feature_count() == 2);
  CHECK(r.data.agents.size() == 1);
  CHECK(r.data.agents[0].id == "a2");
  CHECK(r.data.agents[0].columns == std::vector<std::size_t>{1});

  const auto none = prescreen_redundant(generate_confounded(spec, 2), 0.95);
  CHECK(none.removed.empty());
  CHECK(kind_of([&] { prescreen_redundant(data, 0.0); }) == ErrorKind::invalid_argument);
}

TEST_CASE("validate rejects broken ownership") {
  SyntheticSpec spec;
  spec.length = 10;
  auto data = generate_confounded(spec, 1);
  auto twice = data;
  twice.agents[1].columns.push_back(0);
  CHECK(kind_of([&] { validate(twice); }) == ErrorKind::schema);
  auto orphan = data;
  orphan.agents.pop_back();
  CHECK(kind_of([&] { validate(orphan); }) == ErrorKind::schema);
}

TEST_CASE("pearson handles constant inputs") {
  Eigen::VectorXd a(3), b(3);
  a << 1, 2, 3;
  b << 4, 4, 4;
  CHECK(pearson(a, b) == 0.0);
  CHECK_THAT(pearson(a, -a), WithinAbs(-1.0, 1e-15));
}
