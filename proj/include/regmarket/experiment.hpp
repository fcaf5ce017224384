#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "regmarket/attack.hpp"
#include "regmarket/dataset.hpp"
#include "regmarket/error.hpp"
#include "regmarket/market.hpp"

namespace regmarket {

inline constexpr int schema_version = 1;
inline constexpr const char* out_dir_env = "REGMARKET_OUT_DIR";

enum class Tier { online, population };

struct CsvSource {
  std::filesystem::path path;
  std::optional<std::filesystem::path> manifest;
  std::string target;
  bool normalize = true;
  std::size_t lag = 0;
  std::optional<double> prescreen_threshold;
};

struct AttackConfig {
  std::string attacker;
  std::map<std::string, std::size_t> replicates;  // column name -> K
  std::optional<double> noise_std;
  double tolerance = 1e-6;
  bool spiteful = false;
};

struct CurveConfig {
  std::string attacker;
  std::size_t k_max = 8;
  std::optional<double> noise_std;
  double tolerance = 1e-6;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::optional<SyntheticSpec> synthetic;
  std::optional<CsvSource> csv;
  Tier tier = Tier::online;
  ModelConfig model;
  LiftSpec lift;
  std::vector<Policy> policies;
  double valuation = 1.0;
  std::optional<Window> train;
  std::optional<Window> test;
  double train_fraction = 0.5;
  std::size_t permutations = 200;
  double gamma = 1.0;
  Similarity similarity = Similarity::pearson;
  bool update_in_test = true;
  std::optional<AttackConfig> attack;
  std::optional<CurveConfig> curve;
  std::optional<std::filesystem::path> output_dir;
  unsigned threads = 1;
};

// ---------------------------------------------------------------------------
// Parsing and validation

namespace detail {

// Parsed files store nonnegative literals as unsigned; programmatic JSON may store them signed.
inline bool nonnegative_integer(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

/// Collects violations as "<field path>: <message>" instead of stopping at the first one.
class ConfigReader {
 public:
  explicit ConfigReader(std::filesystem::path base) : base_(std::move(base)) {}

  std::vector<std::string> violations;

  void fail(const std::string& field, const std::string& message) { violations.push_back(field + ": " + message); }

  const nlohmann::json* find(const nlohmann::json& obj, const std::string& key) const {
    if (!obj.is_object()) return nullptr;
    auto it = obj.find(key);
    return it == obj.end() || it->is_null() ? nullptr : &*it;
  }

  template <class T>
  std::optional<T> get(const nlohmann::json& obj, const std::string& key, const std::string& field) {
    const auto* v = find(obj, key);
    if (!v) return std::nullopt;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_arithmetic_v<T>) {
        if (!v->is_number()) throw std::invalid_argument("expected a number");
        if constexpr (std::is_unsigned_v<T>)
          if (!nonnegative_integer(*v)) throw std::invalid_argument("expected a nonnegative integer");
        if constexpr (std::is_integral_v<T>)
          if (!v->is_number_integer()) throw std::invalid_argument("expected an integer");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw std::invalid_argument("expected a string");
      }
      return v->get<T>();
    } catch (const std::exception& e) {
      fail(field, e.what());
      return std::nullopt;
    }
  }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return (path.is_absolute() ? path : base_ / path).lexically_normal();
  }

  std::optional<Window> window(const nlohmann::json& obj, const std::string& key, const std::string& field) {
    const auto* v = find(obj, key);
    if (!v) return std::nullopt;
    if (!v->is_array() || v->size() != 2 || !nonnegative_integer((*v)[0]) || !nonnegative_integer((*v)[1])) {
      fail(field, "expected [begin, end] with nonnegative integers");
      return std::nullopt;
    }
    Window w{(*v)[0].get<std::size_t>(), (*v)[1].get<std::size_t>()};
    if (w.end < w.begin) fail(field, "end precedes begin");
    return w;
  }

 private:
  std::filesystem::path base_;
};

template <class Parse>
auto parse_enum(ConfigReader& r, const nlohmann::json& obj, const std::string& key, const std::string& field,
                Parse&& parse) -> std::optional<decltype(parse(std::string()))> {
  auto s = r.get<std::string>(obj, key, field);
  if (!s) return std::nullopt;
  try {
    return parse(*s);
  } catch (const Error& e) {
    r.fail(field, e.what());
    return std::nullopt;
  }
}

inline void read_synthetic(ConfigReader& r, const nlohmann::json& j, ExperimentConfig& c) {
  SyntheticSpec s;
  if (auto v = r.get<std::size_t>(j, "central_count", "data.synthetic.central_count")) s.central_count = *v;
  if (auto v = r.get<std::size_t>(j, "support_count", "data.synthetic.support_count")) s.support_count = *v;
  if (auto v = r.get<double>(j, "confounder_strength", "data.synthetic.confounder_strength")) s.confounder_strength = *v;
  if (auto v = r.get<double>(j, "feature_noise_std", "data.synthetic.feature_noise_std")) s.feature_noise_std = *v;
  if (auto v = r.get<double>(j, "noise_std", "data.synthetic.noise_std")) s.noise_std = *v;
  if (auto v = r.get<std::size_t>(j, "length", "data.synthetic.length")) s.length = *v;
  if (auto v = r.get<std::vector<double>>(j, "true_weights", "data.synthetic.true_weights"))
    s.true_weights = Eigen::Map<const Eigen::VectorXd>(v->data(), static_cast<Eigen::Index>(v->size()));
  try {
    validate(s);
  } catch (const Error& e) {
    r.fail("data.synthetic", e.what());
  }
  c.synthetic = s;
}

inline void read_csv(ConfigReader& r, const nlohmann::json& j, ExperimentConfig& c) {
  CsvSource src;
  if (auto v = r.get<std::string>(j, "path", "data.csv.path")) {
    src.path = r.resolve(*v);
    if (!std::filesystem::exists(src.path)) r.fail("data.csv.path", "file not found: " + src.path.string());
  } else {
    r.fail("data.csv.path", "required");
  }
  if (auto v = r.get<std::string>(j, "manifest", "data.csv.manifest")) {
    src.manifest = r.resolve(*v);
    if (!std::filesystem::exists(*src.manifest)) r.fail("data.csv.manifest", "file not found: " + src.manifest->string());
  }
  if (auto v = r.get<std::string>(j, "target", "data.csv.target")) src.target = *v;
  else r.fail("data.csv.target", "required");
  if (auto v = r.get<bool>(j, "normalize", "data.csv.normalize")) src.normalize = *v;
  if (auto v = r.get<std::size_t>(j, "lag", "data.csv.lag")) src.lag = *v;
  if (auto v = r.get<double>(j, "prescreen_threshold", "data.csv.prescreen_threshold")) {
    if (!(*v > 0.0 && *v <= 1.0)) r.fail("data.csv.prescreen_threshold", "must lie in (0, 1]");
    src.prescreen_threshold = *v;
  }
  c.csv = src;
}

inline std::optional<double> read_noise(ConfigReader& r, const nlohmann::json& j, const std::string& field) {
  auto v = r.get<double>(j, "noise_std", field);
  if (v && !(*v >= 0.0)) r.fail(field, "must be >= 0");
  return v;
}

}  // namespace detail

/// Parses a config and returns it with every violation found (empty when valid).
inline std::pair<ExperimentConfig, std::vector<std::string>> parse_config(const nlohmann::json& j,
                                                                          const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  detail::ConfigReader r(base_dir);
  if (!j.is_object()) {
    r.fail("<root>", "expected a JSON object");
    return {c, r.violations};
  }

  if (auto v = r.get<int>(j, "schema_version", "schema_version")) {
    if (*v != schema_version) r.fail("schema_version", "unsupported version " + std::to_string(*v));
  } else {
    r.fail("schema_version", "required");
  }
  if (auto v = r.get<std::uint64_t>(j, "seed", "seed")) c.seed = *v;
  else r.fail("seed", "required");

  if (const auto* data = r.find(j, "data")) {
    const auto* syn = r.find(*data, "synthetic");
    const auto* csv = r.find(*data, "csv");
    if ((syn != nullptr) == (csv != nullptr)) r.fail("data", "exactly one of data.synthetic and data.csv is required");
    if (syn) detail::read_synthetic(r, *syn, c);
    if (csv) detail::read_csv(r, *csv, c);
  } else {
    r.fail("data", "required");
  }

  if (auto v = r.get<std::string>(j, "tier", "tier")) {
    if (*v == "online") c.tier = Tier::online;
    else if (*v == "population") c.tier = Tier::population;
    else r.fail("tier", "expected 'online' or 'population'");
  }

  if (const auto* m = r.find(j, "model")) {
    if (auto v = r.get<double>(*m, "prior_precision", "model.prior_precision")) {
      c.model.prior_precision = *v;
      if (!(*v > 0.0)) r.fail("model.prior_precision", "must be positive");
    }
    if (auto v = r.get<double>(*m, "noise_precision", "model.noise_precision")) {
      c.model.noise_precision = *v;
      if (!(*v > 0.0)) r.fail("model.noise_precision", "must be positive");
    }
    if (auto v = r.get<double>(*m, "forgetting", "model.forgetting")) {
      c.model.forgetting = *v;
      if (!(*v > 0.0 && *v <= 1.0)) r.fail("model.forgetting", "must lie in (0, 1]");
    }
    if (auto v = r.get<bool>(*m, "include_intercept", "model.include_intercept")) c.model.include_intercept = *v;
  }

  if (const auto* l = r.find(j, "lift")) {
    if (auto v = detail::parse_enum(r, *l, "conditioning", "lift.conditioning", parse_conditioning)) c.lift.conditioning = *v;
    if (auto v = detail::parse_enum(r, *l, "backend", "lift.backend", parse_backend)) c.lift.backend = *v;
    if (auto v = detail::parse_enum(r, *l, "scoring_rule", "lift.scoring_rule", parse_scoring_rule)) c.lift.rule = *v;
    if (auto v = detail::parse_enum(r, *l, "evaluation", "lift.evaluation", parse_evaluation)) c.lift.evaluation = *v;
    if (auto v = r.get<std::size_t>(*l, "mc_samples", "lift.mc_samples")) {
      c.lift.mc_samples = *v;
      if (*v == 0) r.fail("lift.mc_samples", "must be positive");
    }
    try {
      c.lift.validate();
    } catch (const Error& e) {
      r.fail("lift", e.what());
    }
  }

  if (const auto* p = r.find(j, "policies")) {
    if (!p->is_array() || p->empty()) r.fail("policies", "expected a nonempty array");
    else
      for (std::size_t i = 0; i < p->size(); ++i) {
        const auto field = "policies[" + std::to_string(i) + "]";
        const auto& item = (*p)[i];
        try {
          if (item.is_string()) {
            c.policies.push_back(parse_policy(item.get<std::string>()));
          } else if (item.is_object() && item.contains("name") && item.contains("conditioning") && item.contains("method")) {
            c.policies.push_back({item["name"].get<std::string>(), parse_conditioning(item["conditioning"].get<std::string>()),
                                  parse_allocation_method(item["method"].get<std::string>())});
          } else {
            r.fail(field, "expected a policy name or {name, conditioning, method}");
          }
        } catch (const std::exception& e) {
          r.fail(field, e.what());
        }
      }
  } else {
    c.policies.push_back({to_string(c.lift.conditioning) + "-shapley", c.lift.conditioning, AllocationMethod::shapley_exact});
  }

  if (auto v = r.get<double>(j, "valuation", "valuation")) {
    c.valuation = *v;
    if (!(*v >= 0.0)) r.fail("valuation", "must be >= 0");
  }

  if (const auto* w = r.find(j, "windows")) {
    c.train = r.window(*w, "train", "windows.train");
    c.test = r.window(*w, "test", "windows.test");
    if (auto v = r.get<double>(*w, "train_fraction", "windows.train_fraction")) {
      c.train_fraction = *v;
      if (!(*v > 0.0 && *v < 1.0)) r.fail("windows.train_fraction", "must lie in (0, 1)");
    }
    if (c.train.has_value() != c.test.has_value()) r.fail("windows", "give both train and test or neither");
    if (c.train && c.test && c.test->begin < c.train->end) r.fail("windows", "test window must follow the train window");
  }

  if (const auto* a = r.find(j, "allocation")) {
    if (auto v = r.get<std::size_t>(*a, "permutations", "allocation.permutations")) {
      c.permutations = *v;
      if (*v == 0) r.fail("allocation.permutations", "must be positive");
    }
    if (auto v = r.get<double>(*a, "gamma", "allocation.gamma")) {
      c.gamma = *v;
      if (!(std::isfinite(*v) && *v >= 0.0)) r.fail("allocation.gamma", "must be finite and >= 0");
    }
    if (auto v = detail::parse_enum(r, *a, "similarity", "allocation.similarity", parse_similarity)) c.similarity = *v;
  }
  if (auto v = r.get<bool>(j, "update_in_test", "update_in_test")) c.update_in_test = *v;

  if (const auto* a = r.find(j, "attack")) {
    AttackConfig ac;
    if (auto v = r.get<std::string>(*a, "attacker", "attack.attacker")) ac.attacker = *v;
    else r.fail("attack.attacker", "required");
    if (const auto* rep = r.find(*a, "replicates"); rep && rep->is_object() && !rep->empty()) {
      for (const auto& [col, k] : rep->items()) {
        if (!detail::nonnegative_integer(k) || k.get<std::size_t>() < 1) r.fail("attack.replicates." + col, "K must be an integer >= 1");
        else ac.replicates[col] = k.get<std::size_t>();
      }
    } else {
      r.fail("attack.replicates", "expected an object mapping column names to K");
    }
    ac.noise_std = detail::read_noise(r, *a, "attack.noise_std");
    if (auto v = r.get<double>(*a, "tolerance", "attack.tolerance")) {
      ac.tolerance = *v;
      if (!(*v >= 0.0)) r.fail("attack.tolerance", "must be >= 0");
    }
    if (auto v = r.get<bool>(*a, "spiteful", "attack.spiteful")) ac.spiteful = *v;
    c.attack = ac;
  }

  if (const auto* cv = r.find(j, "curve")) {
    CurveConfig cc;
    if (auto v = r.get<std::string>(*cv, "attacker", "curve.attacker")) cc.attacker = *v;
    else r.fail("curve.attacker", "required");
    if (auto v = r.get<std::size_t>(*cv, "k_max", "curve.k_max")) {
      cc.k_max = *v;
      if (*v < 1) r.fail("curve.k_max", "must be at least 1");
    }
    cc.noise_std = detail::read_noise(r, *cv, "curve.noise_std");
    if (auto v = r.get<double>(*cv, "tolerance", "curve.tolerance")) cc.tolerance = *v;
    c.curve = cc;
  }

  if (const auto* o = r.find(j, "output"))
    if (auto v = r.get<std::string>(*o, "dir", "output.dir")) c.output_dir = r.resolve(*v);

  if (c.tier == Tier::population) {
    if (!c.synthetic) r.fail("tier", "the population tier needs synthetic data");
    if (c.lift.backend != Backend::closed_form || c.lift.rule != ScoringRule::squared_error ||
        c.lift.evaluation != Evaluation::marginalize)
      r.fail("tier", "the population tier needs the closed-form squared-error marginalizing lift");
  }
  for (std::size_t i = 0; i < c.policies.size(); ++i)
    if (c.policies[i].method != AllocationMethod::shapley_sampled && c.lift.evaluation == Evaluation::retrain &&
        c.synthetic && c.synthetic->support_count > CoalitionModels::max_players)
      r.fail("policies[" + std::to_string(i) + "]", "per-coalition retraining supports at most 16 players");
  return {c, r.violations};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
}

/// Loads and validates a config file; throws a config error listing every violation.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
  auto [config, violations] = parse_config(read_json_file(path), path.parent_path());
  if (!violations.empty()) {
    std::string msg = "invalid config " + path.string();
    for (const auto& v : violations) msg += "\n  " + v;
    throw Error(ErrorKind::config, msg);
  }
  return config;
}

/// The config with every default filled in, recorded next to the artifacts.
inline nlohmann::json resolved_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = schema_version;
  j["seed"] = c.seed;
  if (c.synthetic) {
    const auto& s = *c.synthetic;
    const Eigen::VectorXd w = s.weights();
    j["data"]["synthetic"] = {{"central_count", s.central_count},
                              {"support_count", s.support_count},
                              {"confounder_strength", s.confounder_strength},
                              {"feature_noise_std", s.feature_noise_std},
                              {"noise_std", s.noise_std},
                              {"length", s.length},
                              {"true_weights", std::vector<double>(w.data(), w.data() + w.size())}};
  }
  if (c.csv) {
    auto& d = j["data"]["csv"];
    d["path"] = c.csv->path.string();
    d["manifest"] = c.csv->manifest ? nlohmann::json(c.csv->manifest->string()) : nlohmann::json();
    d["target"] = c.csv->target;
    d["normalize"] = c.csv->normalize;
    d["lag"] = c.csv->lag;
    d["prescreen_threshold"] = c.csv->prescreen_threshold ? nlohmann::json(*c.csv->prescreen_threshold) : nlohmann::json();
  }
  j["tier"] = c.tier == Tier::online ? "online" : "population";
  j["model"] = {{"prior_precision", c.model.prior_precision},
                {"noise_precision", c.model.noise_precision},
                {"forgetting", c.model.forgetting},
                {"include_intercept", c.model.include_intercept}};
  j["lift"] = {{"conditioning", to_string(c.lift.conditioning)},
               {"backend", to_string(c.lift.backend)},
               {"scoring_rule", to_string(c.lift.rule)},
               {"evaluation", to_string(c.lift.evaluation)},
               {"mc_samples", c.lift.mc_samples}};
  for (const auto& p : c.policies)
    j["policies"].push_back({{"name", p.name}, {"conditioning", to_string(p.conditioning)}, {"method", to_string(p.method)}});
  j["valuation"] = c.valuation;
  if (c.train) j["windows"] = {{"train", {c.train->begin, c.train->end}}, {"test", {c.test->begin, c.test->end}}};
  else j["windows"] = {{"train_fraction", c.train_fraction}};
  j["allocation"] = {{"permutations", c.permutations},
                     {"gamma", c.gamma},
                     {"similarity", c.similarity == Similarity::pearson ? "pearson" : "cosine"}};
  j["update_in_test"] = c.update_in_test;
  if (c.attack)
    j["attack"] = {{"attacker", c.attack->attacker},
                   {"replicates", c.attack->replicates},
                   {"noise_std", c.attack->noise_std ? nlohmann::json(*c.attack->noise_std) : nlohmann::json("5% of source std")},
                   {"tolerance", c.attack->tolerance},
                   {"spiteful", c.attack->spiteful}};
  if (c.curve)
    j["curve"] = {{"attacker", c.curve->attacker},
                  {"k_max", c.curve->k_max},
                  {"noise_std", c.curve->noise_std ? nlohmann::json(*c.curve->noise_std) : nlohmann::json("5% of source std")},
                  {"tolerance", c.curve->tolerance}};
  return j;
}

// ---------------------------------------------------------------------------
// Execution

struct PreparedData {
  MarketData data;
  std::vector<Removal> removed;
};

inline PreparedData prepare_data(const ExperimentConfig& c) {
  PreparedData out;
  if (c.synthetic) {
    out.data = generate_confounded(*c.synthetic, c.seed);
    return out;
  }
  MarketData raw = ingest_csv(c.csv->path, c.csv->target, c.csv->normalize, c.csv->manifest);
  out.data = build_lags(raw, c.csv->lag);
  if (c.csv->prescreen_threshold) {
    auto screened = prescreen_redundant(out.data, *c.csv->prescreen_threshold);
    out.data = std::move(screened.data);
    out.removed = std::move(screened.removed);
  }
  return out;
}

inline MarketTask build_task(const ExperimentConfig& c, const MarketData& data, const Policy& policy) {
  MarketTask t;
  t.valuation = c.valuation;
  t.model = c.model;
  t.lift = c.lift;
  t.seed = c.seed;
  t.permutations = c.permutations;
  t.gamma = c.gamma;
  t.similarity = c.similarity;
  t.update_in_test = c.update_in_test;
  t.threads = c.threads;
  if (c.train) {
    t.train = *c.train;
    t.test = *c.test;
  } else {
    const auto split = static_cast<std::size_t>(c.train_fraction * double(data.rows()));
    t.train = {0, split};
    t.test = {split, data.rows()};
  }
  if (c.tier == Tier::population) {
    const SyntheticSpec spec = *c.synthetic;
    const ModelConfig model = c.model;
    t.fixed_models = [spec, model](const MarketData& d) { return population_models(spec, d, model); };
  }
  return with_policy(t, policy);
}

inline AttackScenario build_scenario(const AttackConfig& a, const MarketData& data) {
  AttackScenario s{a.attacker, {}, a.noise_std, a.spiteful};
  for (const auto& [name, k] : a.replicates) s.replicate_plan[data.column_index(name)] = k;
  return s;
}

/// Writes through a temporary file and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::invalid_argument, "cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw Error(ErrorKind::invalid_argument, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::filesystem::path output_dir(const ExperimentConfig& c) {
  if (c.output_dir) return *c.output_dir;
  if (const char* env = std::getenv(out_dir_env); env && *env) return env;
  return "regmarket_out";
}

struct PolicyReport {
  Policy policy;
  MarketRun honest;
  std::optional<MarketRun> attacked;
  std::optional<RobustnessVerdict> verdict;
};

struct ExperimentReport {
  PreparedData prepared;
  std::optional<MarketData> attacked_data;
  std::vector<PolicyReport> policies;
  std::vector<CurvePoint> curve;
  std::vector<std::string> files;  // written artifacts, relative to the output dir
};

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string summary_text(const ExperimentConfig& c, const ExperimentReport& r) {
  std::ostringstream s;
  const auto& data = r.prepared.data;
  s << "seed " << c.seed << "\n";
  s << "rows " << data.rows() << ", central features " << data.central_count << ", support features "
    << data.support_count() << "\n";
  for (const auto& rm : r.prepared.removed)
    s << "prescreen removed " << rm.column << " (" << rm.agent << "), |r| = " << fmt("%.4f", rm.correlation)
      << " with " << rm.correlated_with << "\n";
  for (const auto& p : r.policies) {
    s << "\n[" << p.policy.name << "]\n";
    s << "improvement in-sample " << fmt("%.2f", 100.0 * p.honest.in_sample.improvement) << "%, out-of-sample "
      << fmt("%.2f", 100.0 * p.honest.out_of_sample.improvement) << "%\n";
    const double revenue = p.honest.total_revenue();
    s << "revenue " << fmt("%.6g", revenue) << "\n";
    for (const auto& [id, reward] : rewards_by_owner(p.honest, data))
      s << "  " << id << " reward " << fmt("%.6g", reward) << " share " << fmt("%.4f", revenue > 0 ? reward / revenue : 0.0)
        << "\n";
    if (p.verdict) {
      s << "attack by " << c.attack->attacker << ": " << to_string(p.verdict->classification) << "\n";
      for (const auto& [id, d] : p.verdict->deltas)
        s << "  " << id << " delta " << fmt("%.6g", d) << " attacked share "
          << fmt("%.4f", p.verdict->attacked_revenue > 0 ? p.verdict->attacked.at(id) / p.verdict->attacked_revenue : 0.0)
          << "\n";
    }
  }
  return s.str();
}

inline std::string file_stem(const std::string& name) {
  std::string out;
  for (char ch : name) out += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-') ? ch : '_';
  return out;
}

}  // namespace detail

/// Runs the honest market for every policy, the attack (if configured) and the
/// replication curve (if configured), writing artifacts into `out_dir`.
inline ExperimentReport run_experiment(const ExperimentConfig& c, const std::filesystem::path& out_dir,
                                       bool curve_only = false) {
  if (curve_only && !c.curve) throw Error(ErrorKind::config, "curve: the config has no curve section");
  ExperimentReport report;
  report.prepared = prepare_data(c);
  const auto& data = report.prepared.data;
  std::filesystem::create_directories(out_dir);

  auto emit = [&](const std::string& name, const std::string& content) {
    write_atomic(out_dir / name, content);
    report.files.push_back(name);
  };
  emit("resolved_config.json", resolved_json(c).dump(2) + "\n");

  if (!curve_only) {
    if (c.attack) report.attacked_data = apply_attack(data, build_scenario(*c.attack, data), c.seed);
    std::string verdicts;
    for (const auto& policy : c.policies) {
      PolicyReport pr{policy, {}, {}, {}};
      const MarketTask task = build_task(c, data, policy);
      pr.honest = run_market(task, data);
      check_ledger(pr.honest, task.method);
      emit("ledger_" + detail::file_stem(policy.name) + ".csv", ledger_csv(pr.honest));
      if (report.attacked_data) {
        pr.attacked = run_market(task, *report.attacked_data);
        check_ledger(*pr.attacked, task.method);
        emit("ledger_" + detail::file_stem(policy.name) + "_attacked.csv", ledger_csv(*pr.attacked));
        pr.verdict = compare_runs(pr.honest, data, *pr.attacked, *report.attacked_data, c.attack->attacker,
                                  c.attack->tolerance);
        const auto rows = verdict_csv(*pr.verdict, policy.name);
        verdicts += verdicts.empty() ? rows : rows.substr(rows.find('\n') + 1);
      }
      report.policies.push_back(std::move(pr));
    }
    if (!verdicts.empty()) emit("verdict.csv", verdicts);
  }

  if (c.curve) {
    const MarketTask task = build_task(c, data, c.policies.front());
    report.curve = replication_curve(task, data, c.curve->attacker, c.curve->k_max, c.policies, c.curve->noise_std,
                                     c.curve->tolerance);
    emit("curve.csv", curve_csv(report.curve));
  }

  if (!curve_only) emit("summary.txt", detail::summary_text(c, report));
  return report;
}

}  // namespace regmarket
