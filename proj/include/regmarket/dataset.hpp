#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "regmarket/error.hpp"
#include "regmarket/random.hpp"

namespace regmarket {

/// Half-open row range [begin, end).
struct Window {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return size() == 0; }
};

struct SupportAgent {
  std::string id;
  std::vector<std::size_t> columns;  // absolute feature-column indices
};

/// A replicate column and the column it was derived from.
struct ReplicaInfo {
  std::size_t column = 0;
  std::size_t source = 0;
  double noise_std = 0.0;
};

struct AffineRange {
  double min = 0.0;
  double max = 1.0;
};

/// Time-aligned target and feature matrix. Columns [0, central_count) belong to the
/// central agent; the remaining columns are the support indices, each owned by
/// exactly one support agent.
struct MarketData {
  std::vector<std::string> timestamps;
  std::string target_name = "y";
  Eigen::VectorXd target;
  Eigen::MatrixXd features;  // rows = time steps
  std::vector<std::string> columns;
  std::size_t central_count = 0;
  std::string central_agent = "central";
  std::vector<SupportAgent> agents;
  std::map<std::string, std::string> aliases;  // pseudo-identity -> real agent
  std::vector<ReplicaInfo> replicas;
  std::map<std::string, AffineRange> normalization;

  std::size_t rows() const { return static_cast<std::size_t>(target.size()); }
  std::size_t feature_count() const { return static_cast<std::size_t>(features.cols()); }
  std::size_t support_count() const { return feature_count() - central_count; }

  std::size_t column_index(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw Error(ErrorKind::schema, "unknown column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }

  const SupportAgent* find_agent(const std::string& id) const {
    for (const auto& a : agents)
      if (a.id == id) return &a;
    return nullptr;
  }

  /// Agent id owning a support column; empty string for central columns.
  std::string owner_of(std::size_t column) const {
    for (const auto& a : agents)
      if (std::find(a.columns.begin(), a.columns.end(), column) != a.columns.end()) return a.id;
    return {};
  }

  /// Resolves pseudo-identities to the agent that receives their rewards.
  std::string beneficial_owner(const std::string& agent) const {
    auto it = aliases.find(agent);
    return it == aliases.end() ? agent : it->second;
  }

  /// Real (non-pseudo) support agents in ownership order.
  std::vector<std::string> real_agents() const {
    std::vector<std::string> out;
    for (const auto& a : agents) {
      auto owner = beneficial_owner(a.id);
      if (std::find(out.begin(), out.end(), owner) == out.end()) out.push_back(owner);
    }
    return out;
  }

  bool is_replica(std::size_t column) const {
    return std::any_of(replicas.begin(), replicas.end(),
                       [&](const ReplicaInfo& r) { return r.column == column; });
  }
};

/// Checks the shape and ownership-partition invariants.
inline void validate(const MarketData& data) {
  const auto t = data.rows();
  if (static_cast<std::size_t>(data.features.rows()) != t)
    throw Error(ErrorKind::dimension, "feature rows do not match target length");
  if (data.columns.size() != data.feature_count())
    throw Error(ErrorKind::dimension, "column names do not match feature count");
  if (!data.timestamps.empty() && data.timestamps.size() != t)
    throw Error(ErrorKind::dimension, "timestamps do not match target length");
  if (data.central_count > data.feature_count())
    throw Error(ErrorKind::dimension, "central_count exceeds feature count");
  std::vector<int> seen(data.feature_count(), 0);
  std::set<std::string> ids;
  for (const auto& a : data.agents) {
    if (!ids.insert(a.id).second) throw Error(ErrorKind::schema, "duplicate agent id '" + a.id + "'");
    if (a.id == data.central_agent) throw Error(ErrorKind::schema, "support agent reuses central id");
    for (auto c : a.columns) {
      if (c < data.central_count || c >= data.feature_count())
        throw Error(ErrorKind::schema, "agent '" + a.id + "' owns a non-support column");
      if (seen[c]++) throw Error(ErrorKind::schema, "support column owned twice: " + data.columns[c]);
    }
  }
  for (std::size_t c = data.central_count; c < data.feature_count(); ++c)
    if (!seen[c]) throw Error(ErrorKind::schema, "support column without owner: " + data.columns[c]);
  if (!data.target.allFinite() || !data.features.allFinite())
    throw Error(ErrorKind::parse, "non-finite values in market data");
}

inline double pearson(const Eigen::Ref<const Eigen::VectorXd>& a,
                      const Eigen::Ref<const Eigen::VectorXd>& b) {
  const Eigen::VectorXd da = a.array() - a.mean();
  const Eigen::VectorXd db = b.array() - b.mean();
  const double na = da.norm();
  const double nb = db.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(da.dot(db) / (na * nb), -1.0, 1.0);
}

/// Keeps the listed feature columns (in ascending order) and remaps ownership.
inline MarketData select_columns(const MarketData& data, std::vector<std::size_t> keep) {
  std::sort(keep.begin(), keep.end());
  keep.erase(std::unique(keep.begin(), keep.end()), keep.end());
  std::vector<std::size_t> remap(data.feature_count(), SIZE_MAX);
  for (std::size_t i = 0; i < keep.size(); ++i) remap[keep[i]] = i;

  MarketData out;
  out.timestamps = data.timestamps;
  out.target_name = data.target_name;
  out.target = data.target;
  out.central_agent = data.central_agent;
  out.normalization = data.normalization;
  out.features.resize(data.features.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.features.col(static_cast<Eigen::Index>(i)) = data.features.col(static_cast<Eigen::Index>(keep[i]));
    out.columns.push_back(data.columns[keep[i]]);
    if (keep[i] < data.central_count) ++out.central_count;
  }
  for (const auto& a : data.agents) {
    SupportAgent na{a.id, {}};
    for (auto c : a.columns)
      if (remap[c] != SIZE_MAX) na.columns.push_back(remap[c]);
    if (!na.columns.empty()) out.agents.push_back(std::move(na));
  }
  for (const auto& [pseudo, owner] : data.aliases)
    if (out.find_agent(pseudo)) out.aliases[pseudo] = owner;
  for (const auto& r : data.replicas)
    if (remap[r.column] != SIZE_MAX && remap[r.source] != SIZE_MAX)
      out.replicas.push_back({remap[r.column], remap[r.source], r.noise_std});
  return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
      cell.push_back(ch);
    } else if (ch == ',' && !quoted) {
      out.push_back(trim(cell));
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  out.push_back(trim(cell));
  return out;
}

inline std::optional<double> parse_real(const std::string& s) {
  double value = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || !std::isfinite(value)) return std::nullopt;
  return value;
}

struct ManifestAgent {
  std::string id;
  bool central = false;
  std::vector<std::string> columns;
};

inline std::vector<ManifestAgent> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::schema, "cannot open ownership manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, "manifest " + path.string() + ": " + e.what());
  }
  if (!j.contains("agents") || !j["agents"].is_array())
    throw Error(ErrorKind::schema, "manifest needs an 'agents' array");
  std::vector<ManifestAgent> out;
  int centrals = 0;
  for (const auto& a : j["agents"]) {
    ManifestAgent m;
    m.id = a.at("id").get<std::string>();
    m.central = a.value("central", false);
    m.columns = a.at("columns").get<std::vector<std::string>>();
    centrals += m.central ? 1 : 0;
    out.push_back(std::move(m));
  }
  if (centrals != 1) throw Error(ErrorKind::schema, "manifest must flag exactly one central agent");
  return out;
}

}  // namespace detail

/// Reads a header-first CSV with an optional `timestamp` column. Ownership comes from
/// `manifest` (or `<path>.manifest.json` when present); without one, the central agent
/// owns the target column as its feature and every other column is its own agent.
inline MarketData ingest_csv(const std::filesystem::path& path, const std::string& target_column,
                             bool normalize,
                             std::optional<std::filesystem::path> manifest = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::schema, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty())
    throw Error(ErrorKind::empty_data, path.string() + " is empty");
  const auto header = detail::split_csv_line(line);

  std::optional<std::size_t> ts_col;
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "timestamp") ts_col = i;
    else by_name[header[i]] = i;
  }
  if (!by_name.count(target_column))
    throw Error(ErrorKind::schema, "target column '" + target_column + "' not found");

  std::vector<std::string> timestamps;
  std::vector<std::vector<double>> values(header.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw Error(ErrorKind::parse, "row " + std::to_string(row) + " has " +
                                        std::to_string(cells.size()) + " cells, expected " +
                                        std::to_string(header.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (ts_col && i == *ts_col) {
        timestamps.push_back(cells[i]);
        continue;
      }
      auto v = detail::parse_real(cells[i]);
      if (!v)
        throw Error(ErrorKind::parse, "row " + std::to_string(row) + ", column '" + header[i] +
                                          "': not a finite real ('" + cells[i] + "')");
      values[i].push_back(*v);
    }
  }
  if (row == 0) throw Error(ErrorKind::empty_data, path.string() + " has no data rows");
  if (!ts_col)
    for (std::size_t r = 0; r < row; ++r) timestamps.push_back(std::to_string(r));

  if (!manifest) {
    auto sidecar = path;
    sidecar += ".manifest.json";
    if (std::filesystem::exists(sidecar)) manifest = sidecar;
  }
  std::vector<detail::ManifestAgent> owners;
  if (manifest) {
    owners = detail::read_manifest(*manifest);
  } else {
    owners.push_back({"central", true, {target_column}});
    for (std::size_t i = 0; i < header.size(); ++i)
      if ((!ts_col || i != *ts_col) && header[i] != target_column)
        owners.push_back({header[i], false, {header[i]}});
  }
  std::stable_partition(owners.begin(), owners.end(),
                        [](const detail::ManifestAgent& a) { return a.central; });

  MarketData data;
  data.timestamps = std::move(timestamps);
  data.target_name = target_column;
  std::vector<std::size_t> source;
  std::set<std::string> used;
  for (const auto& a : owners) {
    if (a.central) data.central_agent = a.id;
    else data.agents.push_back({a.id, {}});
    for (const auto& c : a.columns) {
      if (!by_name.count(c)) throw Error(ErrorKind::schema, "manifest column '" + c + "' not found");
      if (!used.insert(c).second) throw Error(ErrorKind::schema, "column '" + c + "' owned twice");
      if (!a.central) data.agents.back().columns.push_back(source.size());
      else ++data.central_count;
      source.push_back(by_name[c]);
      data.columns.push_back(c);
    }
  }
  data.agents.erase(std::remove_if(data.agents.begin(), data.agents.end(),
                                   [](const SupportAgent& a) { return a.columns.empty(); }),
                    data.agents.end());

  const auto n = static_cast<Eigen::Index>(row);
  auto column_vector = [&](std::size_t i) {
    return Eigen::Map<const Eigen::VectorXd>(values[i].data(), n);
  };
  data.target = column_vector(by_name[target_column]);
  data.features.resize(n, static_cast<Eigen::Index>(source.size()));
  for (std::size_t j = 0; j < source.size(); ++j)
    data.features.col(static_cast<Eigen::Index>(j)) = column_vector(source[j]);

  if (normalize) {
    auto fit = [&](const std::string& name, Eigen::Ref<Eigen::VectorXd> col) {
      const double lo = col.minCoeff();
      const double hi = col.maxCoeff();
      if (!(hi > lo)) throw Error(ErrorKind::degenerate_range, "column '" + name + "' is constant");
      col = (col.array() - lo) / (hi - lo);
      data.normalization[name] = {lo, hi};
    };
    fit(target_column, data.target);
    for (std::size_t j = 0; j < source.size(); ++j) fit(data.columns[j], data.features.col(static_cast<Eigen::Index>(j)));
  }
  validate(data);
  return data;
}

/// Replaces every feature by its value `lag` steps earlier; the first `lag` rows are dropped.
inline MarketData build_lags(const MarketData& data, std::size_t lag) {
  const auto t = data.rows();
  if (lag >= t)
    throw Error(ErrorKind::insufficient_history,
                "lag " + std::to_string(lag) + " needs more than " + std::to_string(t) + " rows");
  if (lag == 0) return data;
  MarketData out = data;
  const auto n = static_cast<Eigen::Index>(t - lag);
  out.features = data.features.topRows(n);
  out.target = data.target.tail(n);
  if (!data.timestamps.empty())
    out.timestamps.assign(data.timestamps.begin() + static_cast<std::ptrdiff_t>(lag), data.timestamps.end());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic confounded data

struct ReplicatePlan {
  std::size_t count = 0;
  double noise_std = 0.05;
};

/// Generating process: Z ~ N(0,1) per step, central features i.i.d. N(0,1), support
/// features `confounder_strength * Z + feature_noise_std * e`, target `w . x + noise`.
struct SyntheticSpec {
  std::size_t central_count = 0;
  std::size_t support_count = 2;
  double confounder_strength = 1.0;
  double feature_noise_std = 1.0;
  Eigen::VectorXd true_weights;  // central then support; empty means all ones
  double noise_std = 1.0;
  std::map<std::size_t, ReplicatePlan> replicate_plan;  // keyed by feature column
  std::size_t length = 1000;

  Eigen::VectorXd weights() const {
    if (true_weights.size() == 0) return Eigen::VectorXd::Ones(static_cast<Eigen::Index>(central_count + support_count));
    return true_weights;
  }
};

inline void validate(const SyntheticSpec& spec) {
  const auto dim = spec.central_count + spec.support_count;
  if (!(spec.noise_std > 0.0)) throw Error(ErrorKind::invalid_argument, "noise_std must be positive");
  if (spec.feature_noise_std < 0.0) throw Error(ErrorKind::invalid_argument, "feature_noise_std must be >= 0");
  if (spec.length == 0) throw Error(ErrorKind::invalid_argument, "length must be positive");
  if (spec.true_weights.size() != 0 && static_cast<std::size_t>(spec.true_weights.size()) != dim)
    throw Error(ErrorKind::dimension, "true_weights must have central_count + support_count entries");
  for (const auto& [col, plan] : spec.replicate_plan) {
    if (col < spec.central_count || col >= dim)
      throw Error(ErrorKind::invalid_argument, "replicate plan must target a support column");
    if (!(plan.noise_std > 0.0)) throw Error(ErrorKind::invalid_argument, "replicate noise_std must be positive");
  }
}

/// Appends `count` replicates of `source` (column + centered Gaussian noise). Replicate k
/// of a column always draws from the same stream, so plans are nested in `count`.
inline std::vector<std::size_t> append_replicates(MarketData& data, std::size_t source,
                                                  std::size_t count, double noise_std,
                                                  std::uint64_t seed, std::size_t first_index = 0) {
  std::vector<std::size_t> added;
  const auto t = static_cast<Eigen::Index>(data.rows());
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng(mix_seed(seed, 0x5e9ca7e, source * 4096 + first_index + k));
    Eigen::VectorXd col = data.features.col(static_cast<Eigen::Index>(source));
    for (Eigen::Index i = 0; i < t; ++i) col[i] += noise_std * standard_normal(rng);
    const auto idx = data.feature_count();
    data.features.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(idx + 1));
    data.features.col(static_cast<Eigen::Index>(idx)) = col;
    data.columns.push_back(data.columns[source] + "#r" + std::to_string(first_index + k + 1));
    data.replicas.push_back({idx, source, noise_std});
    added.push_back(idx);
  }
  return added;
}

inline MarketData generate_confounded(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  const auto m = spec.central_count;
  const auto d = spec.support_count;
  const auto t = static_cast<Eigen::Index>(spec.length);
  const Eigen::VectorXd w = spec.weights();

  MarketData data;
  data.central_count = m;
  data.features.resize(t, static_cast<Eigen::Index>(m + d));
  data.target.resize(t);
  Rng rng(mix_seed(seed, 0xda7a));
  for (Eigen::Index i = 0; i < t; ++i) {
    const double z = standard_normal(rng);
    for (std::size_t j = 0; j < m; ++j) data.features(i, static_cast<Eigen::Index>(j)) = standard_normal(rng);
    for (std::size_t j = m; j < m + d; ++j)
      data.features(i, static_cast<Eigen::Index>(j)) =
          spec.confounder_strength * z + spec.feature_noise_std * standard_normal(rng);
    data.target[i] = data.features.row(i).dot(w) + spec.noise_std * standard_normal(rng);
    data.timestamps.push_back(std::to_string(i));
  }
  for (std::size_t j = 0; j < m; ++j) data.columns.push_back("c" + std::to_string(j + 1));
  for (std::size_t j = 0; j < d; ++j) {
    data.columns.push_back("x" + std::to_string(j + 1));
    data.agents.push_back({"a" + std::to_string(j + 1), {m + j}});
  }
  for (const auto& [col, plan] : spec.replicate_plan) {
    auto added = append_replicates(data, col, plan.count, plan.noise_std, seed);
    auto& owner = data.agents[col - m];
    owner.columns.insert(owner.columns.end(), added.begin(), added.end());
  }
  validate(data);
  return data;
}

/// Exact second moments of the generating process, covering every column of `data`
/// (which must come from `generate_confounded(spec, ...)`, possibly with replicates).
struct PopulationMoments {
  Eigen::VectorXd mean;          // feature means
  Eigen::MatrixXd covariance;    // feature covariance
  Eigen::VectorXd target_cross;  // Cov(x, y)
  double target_mean = 0.0;
  double target_variance = 0.0;
};

inline PopulationMoments population_moments(const SyntheticSpec& spec, const MarketData& data) {
  validate(spec);
  const auto m = spec.central_count;
  const auto base = m + spec.support_count;
  const auto n = data.feature_count();
  if (n < base) throw Error(ErrorKind::dimension, "data has fewer columns than the generating process");

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const double c2 = spec.confounder_strength * spec.confounder_strength;
  const double s2 = spec.feature_noise_std * spec.feature_noise_std;
  for (std::size_t i = 0; i < base; ++i) {
    for (std::size_t j = 0; j < base; ++j) {
      double v = 0.0;
      if (i < m || j < m) v = (i == j) ? 1.0 : 0.0;
      else v = c2 + (i == j ? s2 : 0.0);
      cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  // A replicate covaries like its source, plus its own noise on the diagonal.
  std::vector<std::size_t> root(n);
  std::vector<double> extra(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) root[i] = i;
  for (const auto& r : data.replicas) {
    root[r.column] = r.source;
    extra[r.column] = r.noise_std * r.noise_std;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (root[i] >= base) throw Error(ErrorKind::dimension, "column " + data.columns[i] + " has no population law");
  }
  Eigen::MatrixXd full(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      full(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          cov(static_cast<Eigen::Index>(root[i]), static_cast<Eigen::Index>(root[j])) + (i == j ? extra[i] : 0.0);

  const Eigen::VectorXd w = spec.weights();
  const Eigen::MatrixXd base_cov = cov.topLeftCorner(static_cast<Eigen::Index>(base), static_cast<Eigen::Index>(base));
  const Eigen::VectorXd base_cross = base_cov * w;
  PopulationMoments out;
  out.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  out.covariance = full;
  out.target_cross.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) out.target_cross[static_cast<Eigen::Index>(i)] = base_cross[static_cast<Eigen::Index>(root[i])];
  out.target_variance = w.dot(base_cov * w) + spec.noise_std * spec.noise_std;
  return out;
}

// ---------------------------------------------------------------------------
// Pre-screening

struct Removal {
  std::string column;
  std::string agent;
  std::string correlated_with;
  double correlation = 0.0;
};

struct PrescreenResult {
  MarketData data;
  std::vector<Removal> removed;
};

/// Drops support columns whose |Pearson correlation| with a central column exceeds
/// `threshold`, visiting columns in ascending index. Exact duplicates (|r| == 1 up to
/// rounding) are always removed.
inline PrescreenResult prescreen_redundant(const MarketData& data, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw Error(ErrorKind::invalid_argument, "prescreen threshold must lie in (0, 1]");
  constexpr double duplicate_tol = 1e-12;
  PrescreenResult result;
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < data.central_count; ++c) keep.push_back(c);
  for (std::size_t c = data.central_count; c < data.feature_count(); ++c) {
    bool drop = false;
    for (std::size_t k = 0; k < data.central_count && !drop; ++k) {
      const double r = std::abs(pearson(data.features.col(static_cast<Eigen::Index>(c)),
                                        data.features.col(static_cast<Eigen::Index>(k))));
      if (r > threshold || r >= 1.0 - duplicate_tol) {
        result.removed.push_back({data.columns[c], data.owner_of(c), data.columns[k], r});
        drop = true;
      }
    }
    if (!drop) keep.push_back(c);
  }
  result.data = select_columns(data, keep);
  validate(result.data);
  return result;
}

}  // namespace regmarket
