#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "regmarket/dataset.hpp"
#include "regmarket/error.hpp"
#include "regmarket/lift.hpp"
#include "regmarket/random.hpp"

namespace regmarket {

/// Cooperative game over support players. Values are losses (negatively oriented),
/// so a player's contribution to coalition S is value_of(S) - value_of(S + i).
struct GameOracle {
  std::size_t players = 0;
  std::function<double(Coalition)> value_of;
};

enum class AllocationMethod { shapley_exact, shapley_sampled, banzhaf, robust_shapley };

inline std::string to_string(AllocationMethod m) {
  switch (m) {
    case AllocationMethod::shapley_exact: return "shapley-exact";
    case AllocationMethod::shapley_sampled: return "shapley-sampled";
    case AllocationMethod::banzhaf: return "banzhaf";
    case AllocationMethod::robust_shapley: return "robust-shapley";
  }
  return "unknown";
}

inline AllocationMethod parse_allocation_method(const std::string& s) {
  if (s == "shapley-exact" || s == "shapley") return AllocationMethod::shapley_exact;
  if (s == "shapley-sampled") return AllocationMethod::shapley_sampled;
  if (s == "banzhaf") return AllocationMethod::banzhaf;
  if (s == "robust-shapley") return AllocationMethod::robust_shapley;
  throw Error(ErrorKind::invalid_argument, "unknown allocation method '" + s + "'");
}

struct AllocationResult {
  Eigen::VectorXd values;      // phi_i per player
  AllocationMethod method = AllocationMethod::shapley_exact;
  std::optional<std::size_t> permutations_used;
  Eigen::VectorXd std_errors;  // sampled estimators only
  Eigen::VectorXd normalized;  // reward shares
  double gain = 0.0;           // value(empty) - value(grand)
};

inline constexpr std::size_t enumeration_guard = 20;

inline void check_enumerable(const GameOracle& game) {
  if (game.players > enumeration_guard)
    throw Error(ErrorKind::size_guard, std::to_string(game.players) +
                                           " players exceed the exact-enumeration guard of 20; use shapley_sampled");
}

/// Values of all 2^D coalitions, indexed by bitmask.
inline std::vector<double> tabulate(const GameOracle& game) {
  check_enumerable(game);
  std::vector<double> table(std::size_t{1} << game.players);
  for (std::size_t mask = 0; mask < table.size(); ++mask) table[mask] = game.value_of(Coalition(mask));
  return table;
}

// ---------------------------------------------------------------------------
// Normalization to reward shares

/// Floors negative values at zero and rescales onto the simplex; all-zero when nothing
/// is positive.
inline Eigen::VectorXd simplex_normalize(const Eigen::VectorXd& values) {
  Eigen::VectorXd floored = values.cwiseMax(0.0);
  const double total = floored.sum();
  if (!(total > 0.0)) return Eigen::VectorXd::Zero(values.size());
  return floored / total;
}

/// Shares relative to the grand-coalition gain. Semivalues without efficiency keep
/// their shortfall; an excess over the gain is scaled back to the simplex.
inline Eigen::VectorXd gain_normalize(const Eigen::VectorXd& values, double gain) {
  Eigen::VectorXd floored = values.cwiseMax(0.0);
  const double denom = std::max(gain, floored.sum());
  if (!(denom > 0.0)) return Eigen::VectorXd::Zero(values.size());
  return floored / denom;
}

/// Reward shares from unpenalized semivalues; `penalties` only applies to robust-shapley.
inline Eigen::VectorXd normalize_shares(AllocationMethod method, const Eigen::VectorXd& values, double gain,
                                        const Eigen::VectorXd& penalties = {}) {
  switch (method) {
    case AllocationMethod::banzhaf: return gain_normalize(values, gain);
    case AllocationMethod::robust_shapley:
      if (penalties.size() != values.size()) throw Error(ErrorKind::dimension, "robust-shapley needs one penalty per player");
      return simplex_normalize(values).cwiseProduct(penalties);
    default: return simplex_normalize(values);
  }
}

// ---------------------------------------------------------------------------
// Exact semivalues

/// Shapley values from a full coalition table:
/// phi_i = sum_{S not containing i} |S|!(D-|S|-1)!/D! * (v(S) - v(S + i)).
inline Eigen::VectorXd shapley_from_table(const std::vector<double>& table, std::size_t players) {
  std::vector<double> weight(players);
  for (std::size_t s = 0; s < players; ++s)
    weight[s] = std::exp(std::lgamma(double(s) + 1) + std::lgamma(double(players - s)) - std::lgamma(double(players) + 1));
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players));
  for (std::size_t mask = 0; mask < table.size(); ++mask) {
    const auto size = static_cast<std::size_t>(std::popcount(mask));
    for (std::size_t i = 0; i < players; ++i) {
      const auto bit = std::size_t{1} << i;
      if (mask & bit) continue;
      phi[static_cast<Eigen::Index>(i)] += weight[size] * (table[mask] - table[mask | bit]);
    }
  }
  return phi;
}

inline Eigen::VectorXd banzhaf_from_table(const std::vector<double>& table, std::size_t players) {
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players));
  if (players == 0) return phi;
  const double scale = std::ldexp(1.0, -static_cast<int>(players - 1));
  for (std::size_t mask = 0; mask < table.size(); ++mask)
    for (std::size_t i = 0; i < players; ++i) {
      const auto bit = std::size_t{1} << i;
      if (!(mask & bit)) phi[static_cast<Eigen::Index>(i)] += scale * (table[mask] - table[mask | bit]);
    }
  return phi;
}

inline AllocationResult shapley_exact(const GameOracle& game) {
  const auto table = tabulate(game);
  AllocationResult r;
  r.method = AllocationMethod::shapley_exact;
  r.values = shapley_from_table(table, game.players);
  r.gain = table.front() - table.back();
  r.normalized = simplex_normalize(r.values);
  return r;
}

inline AllocationResult banzhaf(const GameOracle& game) {
  const auto table = tabulate(game);
  AllocationResult r;
  r.method = AllocationMethod::banzhaf;
  r.values = banzhaf_from_table(table, game.players);
  r.gain = table.front() - table.back();
  r.normalized = gain_normalize(r.values, r.gain);
  return r;
}

// ---------------------------------------------------------------------------
// Permutation estimators

namespace detail {

/// Marginal contributions of every player along one ordering.
inline Eigen::VectorXd permutation_contributions(const GameOracle& game, const std::vector<std::size_t>& order) {
  Eigen::VectorXd delta(static_cast<Eigen::Index>(game.players));
  Coalition prefix;
  double previous = game.value_of(prefix);
  for (auto i : order) {
    prefix = prefix.with(i);
    const double current = game.value_of(prefix);
    delta[static_cast<Eigen::Index>(i)] = previous - current;
    previous = current;
  }
  return delta;
}

inline AllocationResult average_units(const std::vector<Eigen::VectorXd>& units, std::size_t players) {
  AllocationResult r;
  const auto n = static_cast<double>(units.size());
  r.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players));
  for (const auto& u : units) r.values += u;
  r.values /= n;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players));
  for (const auto& u : units) var += (u - r.values).cwiseAbs2();
  r.std_errors = units.size() > 1 ? Eigen::VectorXd((var / (n - 1.0) / n).cwiseSqrt())
                                  : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players));
  return r;
}

}  // namespace detail

/// Average marginal contribution over the given orderings.
inline AllocationResult shapley_permutations(const GameOracle& game, const std::vector<std::vector<std::size_t>>& orders) {
  if (orders.empty()) throw Error(ErrorKind::invalid_argument, "at least one permutation is required");
  std::vector<Eigen::VectorXd> units;
  units.reserve(orders.size());
  for (const auto& o : orders) {
    if (o.size() != game.players) throw Error(ErrorKind::dimension, "permutation length does not match player count");
    units.push_back(detail::permutation_contributions(game, o));
  }
  auto r = detail::average_units(units, game.players);
  r.method = AllocationMethod::shapley_sampled;
  r.permutations_used = orders.size();
  r.gain = game.value_of(Coalition()) - game.value_of(Coalition::grand(game.players));
  r.normalized = simplex_normalize(r.values);
  return r;
}

struct SamplingOptions {
  bool antithetic = true;  // pair each ordering with its reverse
  unsigned threads = 1;
};

/// Uniform permutation sampling. Unit u draws its ordering from stream mix_seed(seed, u),
/// so results do not depend on the thread count. Antithetic sampling rounds the
/// permutation count up to an even number; standard errors use pair means.
inline AllocationResult shapley_sampled(const GameOracle& game, std::size_t permutations, std::uint64_t seed,
                                        SamplingOptions options = {}) {
  if (permutations == 0) throw Error(ErrorKind::invalid_argument, "permutations must be at least 1");
  const std::size_t per_unit = options.antithetic ? 2 : 1;
  const std::size_t unit_count = (permutations + per_unit - 1) / per_unit;
  std::vector<Eigen::VectorXd> units(unit_count);

  auto run = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> order(game.players);
    for (std::size_t u = begin; u < end; ++u) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(mix_seed(seed, u));
      std::shuffle(order.begin(), order.end(), rng);
      Eigen::VectorXd delta = detail::permutation_contributions(game, order);
      if (options.antithetic) {
        std::reverse(order.begin(), order.end());
        delta = 0.5 * (delta + detail::permutation_contributions(game, order));
      }
      units[u] = std::move(delta);
    }
  };
  const unsigned threads = std::max(1U, std::min<unsigned>(options.threads, static_cast<unsigned>(unit_count)));
  if (threads == 1) {
    run(0, unit_count);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (unit_count + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t begin = std::min(unit_count, t * chunk);
      const std::size_t end = std::min(unit_count, begin + chunk);
      pool.emplace_back(run, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  auto r = detail::average_units(units, game.players);
  r.method = AllocationMethod::shapley_sampled;
  r.permutations_used = unit_count * per_unit;
  r.gain = game.value_of(Coalition()) - game.value_of(Coalition::grand(game.players));
  r.normalized = simplex_normalize(r.values);
  return r;
}

// ---------------------------------------------------------------------------
// Robust-Shapley

enum class Similarity { cosine, pearson };

inline Similarity parse_similarity(const std::string& s) {
  if (s == "cosine") return Similarity::cosine;
  if (s == "pearson") return Similarity::pearson;
  throw Error(ErrorKind::invalid_argument, "unknown similarity '" + s + "'");
}

/// exp(-gamma * sum_{j != i} |sim(x_i, x_j)|) for every support column over `window`.
inline Eigen::VectorXd similarity_penalties(const MarketData& data, Window window, double gamma, Similarity similarity) {
  if (!std::isfinite(gamma) || gamma < 0.0) throw Error(ErrorKind::invalid_argument, "gamma must be finite and >= 0");
  if (window.end > data.rows() || window.empty()) throw Error(ErrorKind::invalid_argument, "invalid similarity window");
  const auto m = data.central_count;
  const auto d = data.support_count();
  const auto rows = data.features.middleRows(static_cast<Eigen::Index>(window.begin), static_cast<Eigen::Index>(window.size()));
  Eigen::VectorXd total = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      const auto a = rows.col(static_cast<Eigen::Index>(m + i));
      const auto b = rows.col(static_cast<Eigen::Index>(m + j));
      double s = 0.0;
      if (similarity == Similarity::pearson) {
        s = pearson(a, b);
      } else {
        const double na = a.norm(), nb = b.norm();
        s = (na > 0.0 && nb > 0.0) ? a.dot(b) / (na * nb) : 0.0;
      }
      total[static_cast<Eigen::Index>(i)] += std::abs(s);
      total[static_cast<Eigen::Index>(j)] += std::abs(s);
    }
  return (-gamma * total).array().exp();
}

/// Shapley values scaled by the similarity penalty. Shares are the Shapley simplex
/// shares times the penalty, so they sum to at most one.
inline AllocationResult robust_shapley(const GameOracle& game, const MarketData& data, Window window, double gamma,
                                       Similarity similarity = Similarity::pearson) {
  if (data.support_count() != game.players) throw Error(ErrorKind::dimension, "game and data disagree on player count");
  auto r = shapley_exact(game);
  const Eigen::VectorXd penalty = similarity_penalties(data, window, gamma, similarity);
  r.method = AllocationMethod::robust_shapley;
  r.normalized = r.normalized.cwiseProduct(penalty);
  r.values = r.values.cwiseProduct(penalty);
  return r;
}

// ---------------------------------------------------------------------------
// Direct / indirect effects of observational contributions

struct EffectDecomposition {
  double total = 0.0;
  double direct = 0.0;
  double indirect = 0.0;
};

/// Splits the observational contribution of `feature` at its position in `order`.
/// With prefix P and suffix U:
///   total    = xi(P) - xi(P + i)
///   direct   = xi(P) - E[l(x_P, x_i, X_U)] with X_U ~ p(x_U | x_P)
///   indirect = E[l(x_P, x_i, X_U)] with X_U ~ p(x_U | x_P)  -  xi(P + i)
inline EffectDecomposition decompose_effects(const LiftEvaluator& lift, const PosteriorState& posterior,
                                             const ModelConfig& config, const std::vector<std::size_t>& order,
                                             std::size_t feature, const Eigen::Ref<const Eigen::VectorXd>& x, double y) {
  if (lift.spec().backend != Backend::closed_form || lift.spec().conditioning != Conditioning::observational ||
      lift.spec().rule != ScoringRule::squared_error)
    throw Error(ErrorKind::unsupported, "effect decomposition needs the closed-form observational squared-error lift");
  if (order.size() != lift.players()) throw Error(ErrorKind::dimension, "permutation length does not match player count");
  auto pos = std::find(order.begin(), order.end(), feature);
  if (pos == order.end()) throw Error(ErrorKind::invalid_argument, "feature not in permutation");

  Coalition prefix;
  for (auto it = order.begin(); it != pos; ++it) prefix = prefix.with(*it);
  const double before = lift(posterior, prefix, x, y);
  const double after = lift(posterior, prefix.with(feature), x, y);

  // Hold the out-of-coalition law at p(x_U | x_P) while x_i is revealed.
  const auto& block = lift.block(prefix);
  const auto column = lift.central_count() + feature;
  const Eigen::VectorXd mu = block.conditional_mean(x);
  std::vector<std::size_t> keep, unknown;
  for (std::size_t k = 0; k < block.unknown.size(); ++k)
    if (block.unknown[k] != column) {
      keep.push_back(k);
      unknown.push_back(block.unknown[k]);
    }
  const double held = quadratic_score(posterior, config, x, y, unknown, detail::sub(mu, keep),
                                      detail::sub(block.covariance, keep, keep));
  return {before - after, before - held, held - after};
}

/// Shapley-weighted average of decompose_effects over every position of `feature`.
inline EffectDecomposition decompose_shapley(const LiftEvaluator& lift, const PosteriorState& posterior,
                                             const ModelConfig& config, std::size_t feature,
                                             const Eigen::Ref<const Eigen::VectorXd>& x, double y) {
  const auto d = lift.players();
  if (d > enumeration_guard) throw Error(ErrorKind::size_guard, "too many players for exact decomposition");
  EffectDecomposition acc;
  std::vector<std::size_t> others;
  for (std::size_t j = 0; j < d; ++j)
    if (j != feature) others.push_back(j);
  for (std::size_t mask = 0; mask < (std::size_t{1} << others.size()); ++mask) {
    std::vector<std::size_t> order, rest;
    for (std::size_t k = 0; k < others.size(); ++k) ((mask >> k) & 1U ? order : rest).push_back(others[k]);
    const double s = static_cast<double>(order.size());
    const double w = std::exp(std::lgamma(s + 1) + std::lgamma(double(d) - s) - std::lgamma(double(d) + 1));
    order.push_back(feature);
    order.insert(order.end(), rest.begin(), rest.end());
    const auto e = decompose_effects(lift, posterior, config, order, feature, x, y);
    acc.total += w * e.total;
    acc.direct += w * e.direct;
    acc.indirect += w * e.indirect;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Shapley-value diagnostics

struct ShapleyDiagnostics {
  Eigen::VectorXd kappa;          // variance inflation factor per feature column
  Eigen::VectorXd phi_variance;   // 2 var(w)(2 E[w]^2 + var(w)) var(X)^2
  Eigen::VectorXd noncentrality;  // E[w]^2 / var(w)
  Eigen::VectorXd expected_phi;   // E[w]^2 var(X)
};

/// Variance inflation factors diag(R^-1) of the standardized design; +inf for every
/// column when R is singular or a column is constant.
inline Eigen::VectorXd variance_inflation(const Eigen::Ref<const Eigen::MatrixXd>& design) {
  const auto n = design.cols();
  const double inf = std::numeric_limits<double>::infinity();
  if (design.rows() == 0) throw Error(ErrorKind::empty_data, "diagnostics need a nonempty design window");
  Eigen::MatrixXd z = design.rowwise() - design.colwise().mean();
  for (Eigen::Index j = 0; j < n; ++j) {
    const double sd = std::sqrt(z.col(j).squaredNorm() / static_cast<double>(design.rows()));
    if (!(sd > 0.0)) return Eigen::VectorXd::Constant(n, inf);
    z.col(j) /= sd;
  }
  const Eigen::MatrixXd corr = z.transpose() * z / static_cast<double>(design.rows());
  Eigen::FullPivLU<Eigen::MatrixXd> lu(corr);
  lu.setThreshold(1e-10);
  if (lu.rank() < n) return Eigen::VectorXd::Constant(n, inf);
  Eigen::LLT<Eigen::MatrixXd> llt(corr);
  if (llt.info() != Eigen::Success) return Eigen::VectorXd::Constant(n, inf);
  return llt.solve(Eigen::MatrixXd::Identity(n, n)).diagonal();
}

inline ShapleyDiagnostics diagnostics(const PosteriorState& posterior, const FeatureModel& fm, const ModelConfig& config,
                                      const Eigen::Ref<const Eigen::MatrixXd>& design) {
  const auto n = static_cast<Eigen::Index>(fm.dimension());
  if (design.cols() != n) throw Error(ErrorKind::dimension, "design window does not match the feature model");
  if (posterior.dimension() != design_dimension(config, fm.dimension()))
    throw Error(ErrorKind::dimension, "posterior does not cover every feature");
  const Eigen::Index shift = config.include_intercept ? 1 : 0;
  const Eigen::MatrixXd cov_w = posterior.covariance();

  ShapleyDiagnostics out;
  out.kappa = variance_inflation(design);
  out.phi_variance.resize(n);
  out.noncentrality.resize(n);
  out.expected_phi.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mw = posterior.mean[i + shift];
    const double vw = cov_w(i + shift, i + shift);
    const double vx = fm.covariance(i, i);
    out.noncentrality[i] = mw * mw / vw;
    out.phi_variance[i] = 2.0 * vw * (2.0 * mw * mw + vw) * vx * vx;
    out.expected_phi[i] = mw * mw * vx;
  }
  return out;
}

/// Density of phi = var(X) * w^2 with w ~ N(mean_w, var_w): a scaled noncentral
/// chi-squared law with one degree of freedom, summed as a Poisson mixture.
inline double shapley_density(double phi, double mean_w, double var_w, double var_x) {
  if (!(var_w > 0.0 && var_x > 0.0)) throw Error(ErrorKind::invalid_argument, "variances must be positive");
  if (phi <= 0.0) return 0.0;
  const double scale = var_w * var_x;
  const double q = phi / scale;
  const double half_eta = 0.5 * mean_w * mean_w / var_w;
  const auto n_max = static_cast<std::size_t>(half_eta + 12.0 * std::sqrt(half_eta + 1.0) + 60.0);
  double density = 0.0;
  for (std::size_t n = 0; n <= n_max; ++n) {
    const double k = 1.0 + 2.0 * double(n);
    const double log_poisson = -half_eta + (n ? double(n) * std::log(half_eta) : 0.0) - std::lgamma(double(n) + 1.0);
    const double log_chi2 = (0.5 * k - 1.0) * std::log(q) - 0.5 * q - 0.5 * k * std::log(2.0) - std::lgamma(0.5 * k);
    if (half_eta == 0.0 && n > 0) break;
    density += std::exp(log_poisson + log_chi2);
  }
  return density / scale;
}

}  // namespace regmarket
