#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "regmarket/bayes.hpp"
#include "regmarket/dataset.hpp"
#include "regmarket/error.hpp"
#include "regmarket/random.hpp"

namespace regmarket {

/// Subset of support players 0..D-1 (player i is feature column central_count + i).
class Coalition {
 public:
  static constexpr std::size_t max_players = 64;

  constexpr Coalition() = default;
  constexpr explicit Coalition(std::uint64_t bits) : bits_(bits) {}

  static Coalition grand(std::size_t players) {
    if (players > max_players) throw Error(ErrorKind::size_guard, "at most 64 players are supported");
    return Coalition(players == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << players) - 1);
  }
  static Coalition of(std::initializer_list<std::size_t> members) {
    Coalition c;
    for (auto m : members) c = c.with(m);
    return c;
  }

  constexpr std::uint64_t bits() const { return bits_; }
  constexpr bool contains(std::size_t i) const { return (bits_ >> i) & 1U; }
  constexpr Coalition with(std::size_t i) const { return Coalition(bits_ | (std::uint64_t{1} << i)); }
  constexpr Coalition without(std::size_t i) const { return Coalition(bits_ & ~(std::uint64_t{1} << i)); }
  std::size_t size() const { return static_cast<std::size_t>(std::popcount(bits_)); }
  constexpr bool empty() const { return bits_ == 0; }

  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::uint64_t b = bits_; b != 0; b &= b - 1) out.push_back(static_cast<std::size_t>(std::countr_zero(b)));
    return out;
  }

  friend constexpr bool operator==(Coalition, Coalition) = default;

 private:
  std::uint64_t bits_ = 0;
};

enum class Conditioning { observational, interventional };
enum class Backend { closed_form, monte_carlo };
/// How coalition scores are produced: integrate out-of-coalition inputs of the full
/// model, or score a model trained on the coalition's columns only.
enum class Evaluation { marginalize, retrain };

inline std::string to_string(Conditioning c) { return c == Conditioning::observational ? "observational" : "interventional"; }
inline std::string to_string(Backend b) { return b == Backend::closed_form ? "closed-form" : "monte-carlo"; }
inline std::string to_string(Evaluation e) { return e == Evaluation::marginalize ? "marginalize" : "retrain"; }

inline Conditioning parse_conditioning(const std::string& s) {
  if (s == "observational" || s == "obs") return Conditioning::observational;
  if (s == "interventional" || s == "int") return Conditioning::interventional;
  throw Error(ErrorKind::invalid_argument, "unknown conditioning '" + s + "'");
}
inline Backend parse_backend(const std::string& s) {
  if (s == "closed-form" || s == "closed-form-gaussian") return Backend::closed_form;
  if (s == "monte-carlo") return Backend::monte_carlo;
  throw Error(ErrorKind::invalid_argument, "unknown backend '" + s + "'");
}
inline Evaluation parse_evaluation(const std::string& s) {
  if (s == "marginalize") return Evaluation::marginalize;
  if (s == "retrain") return Evaluation::retrain;
  throw Error(ErrorKind::invalid_argument, "unknown evaluation mode '" + s + "'");
}

struct LiftSpec {
  Conditioning conditioning = Conditioning::interventional;
  Backend backend = Backend::closed_form;
  std::size_t mc_samples = 1000;
  ScoringRule rule = ScoringRule::squared_error;
  Evaluation evaluation = Evaluation::marginalize;

  void validate() const {
    if (backend == Backend::monte_carlo && mc_samples == 0)
      throw Error(ErrorKind::invalid_argument, "mc_samples must be positive");
    if (evaluation == Evaluation::marginalize && backend == Backend::closed_form && rule != ScoringRule::squared_error)
      throw Error(ErrorKind::unsupported, "the closed-form backend integrates the squared-error rule only");
  }
};

/// Joint Gaussian law of the features plus the rows it was fitted on.
struct FeatureModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd background;

  std::size_t dimension() const { return static_cast<std::size_t>(mean.size()); }

  /// Diagonal regularizer applied before conditioning on singular blocks.
  double jitter() const {
    if (covariance.rows() == 0) return 0.0;
    return 1e-8 * covariance.trace() / static_cast<double>(covariance.rows());
  }
};

/// Mean and (1/n) covariance over the window; the window rows become the background,
/// subsampled without replacement when `max_background` is smaller.
inline FeatureModel fit_feature_model(const MarketData& data, Window window,
                                      std::optional<std::size_t> max_background = std::nullopt,
                                      std::uint64_t seed = 0) {
  if (window.end > data.rows()) throw Error(ErrorKind::invalid_argument, "window exceeds data length");
  if (window.size() < 2) throw Error(ErrorKind::insufficient_history, "feature window needs at least 2 rows");
  const auto rows = data.features.middleRows(static_cast<Eigen::Index>(window.begin),
                                             static_cast<Eigen::Index>(window.size()));
  FeatureModel fm;
  fm.mean = rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = rows.rowwise() - fm.mean.transpose();
  fm.covariance = centered.transpose() * centered / static_cast<double>(window.size());
  if (max_background && *max_background < window.size()) {
    std::vector<Eigen::Index> idx(window.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
    Rng rng(mix_seed(seed, 0xbac6));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(*max_background);
    std::sort(idx.begin(), idx.end());
    fm.background.resize(static_cast<Eigen::Index>(idx.size()), rows.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) fm.background.row(static_cast<Eigen::Index>(i)) = rows.row(idx[i]);
  } else {
    fm.background = rows;
  }
  return fm;
}

/// Law of the `unknown` coordinates given the `known` ones:
/// E[x_U | x_K] = offset + gain * x_K, Cov[x_U | x_K] = covariance.
struct GaussianBlock {
  std::vector<std::size_t> known;
  std::vector<std::size_t> unknown;
  Eigen::MatrixXd gain;
  Eigen::VectorXd offset;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd sampler;  // sampler * sampler' == covariance, filled on demand

  Eigen::VectorXd conditional_mean(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    Eigen::VectorXd mu = offset;
    for (std::size_t k = 0; k < known.size(); ++k)
      mu += gain.col(static_cast<Eigen::Index>(k)) * x[static_cast<Eigen::Index>(known[k])];
    return mu;
  }
};

namespace detail {

inline Eigen::MatrixXd sub(const Eigen::MatrixXd& m, const std::vector<std::size_t>& r, const std::vector<std::size_t>& c) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(c.size()));
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          m(static_cast<Eigen::Index>(r[i]), static_cast<Eigen::Index>(c[j]));
  return out;
}

inline Eigen::VectorXd sub(const Eigen::VectorXd& v, const std::vector<std::size_t>& r) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(r.size()));
  for (std::size_t i = 0; i < r.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(r[i])];
  return out;
}

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& cov) {
  if (cov.rows() == 0) return cov;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

}  // namespace detail

/// Schur-complement conditioning. Jitter is added to the diagonal of the known block
/// only, so uncorrelated blocks condition exactly.
inline GaussianBlock condition_gaussian(const FeatureModel& fm, std::vector<std::size_t> known,
                                        std::vector<std::size_t> unknown) {
  GaussianBlock b;
  b.known = std::move(known);
  b.unknown = std::move(unknown);
  const Eigen::VectorXd mu_u = detail::sub(fm.mean, b.unknown);
  const Eigen::MatrixXd s_uu = detail::sub(fm.covariance, b.unknown, b.unknown);
  if (b.known.empty() || b.unknown.empty()) {
    b.gain = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(b.unknown.size()), static_cast<Eigen::Index>(b.known.size()));
    b.offset = mu_u;
    b.covariance = s_uu;
    return b;
  }
  Eigen::MatrixXd s_kk = detail::sub(fm.covariance, b.known, b.known);
  s_kk.diagonal().array() += fm.jitter();
  const Eigen::MatrixXd s_ku = detail::sub(fm.covariance, b.known, b.unknown);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(s_kk);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorKind::numerical, "conditioning block could not be factorized");
  b.gain = ldlt.solve(s_ku).transpose();
  b.offset = mu_u - b.gain * detail::sub(fm.mean, b.known);
  Eigen::MatrixXd cov = s_uu - b.gain * s_ku;
  b.covariance = 0.5 * (cov + cov.transpose());
  return b;
}

/// Marginal law of `unknown`, ignoring the known coordinates entirely.
inline GaussianBlock marginal_gaussian(const FeatureModel& fm, std::vector<std::size_t> known,
                                       std::vector<std::size_t> unknown) {
  GaussianBlock b;
  b.known = std::move(known);
  b.unknown = std::move(unknown);
  b.gain = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(b.unknown.size()), static_cast<Eigen::Index>(b.known.size()));
  b.offset = detail::sub(fm.mean, b.unknown);
  b.covariance = detail::sub(fm.covariance, b.unknown, b.unknown);
  return b;
}

/// Exact E[(m . d(x~) - y)^2] when the `unknown` coordinates of x~ follow
/// N(mean_u, cov_u) and the remaining coordinates are fixed at x. `m` is the
/// posterior mean (plug-in predictor).
inline double quadratic_score(const PosteriorState& posterior, const ModelConfig& config,
                              const Eigen::Ref<const Eigen::VectorXd>& x, double y,
                              const std::vector<std::size_t>& unknown, const Eigen::VectorXd& mean_u,
                              const Eigen::MatrixXd& cov_u) {
  Eigen::VectorXd xt = x;
  for (std::size_t k = 0; k < unknown.size(); ++k) xt[static_cast<Eigen::Index>(unknown[k])] = mean_u[static_cast<Eigen::Index>(k)];
  const Eigen::VectorXd d = design_row(config, xt);
  const double resid = posterior.mean.dot(d) - y;
  const Eigen::Index shift = config.include_intercept ? 1 : 0;
  Eigen::VectorXd m_u(static_cast<Eigen::Index>(unknown.size()));
  for (std::size_t k = 0; k < unknown.size(); ++k)
    m_u[static_cast<Eigen::Index>(k)] = posterior.mean[static_cast<Eigen::Index>(unknown[k]) + shift];
  return resid * resid + m_u.dot(cov_u * m_u);
}

/// E[(c + a'x - y)^2] under the population moments of (x, y).
inline double expected_affine_score(const PopulationMoments& moments, const Eigen::VectorXd& a, double c) {
  if (a.size() != moments.mean.size()) throw Error(ErrorKind::dimension, "coefficients do not match the population law");
  const double bias = c + a.dot(moments.mean) - moments.target_mean;
  const double spread = a.dot(moments.covariance * a) - 2.0 * a.dot(moments.target_cross) + moments.target_variance;
  return bias * bias + std::max(spread, 0.0);
}

struct LiftEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Coalition value function xi(l, x, omega) for a posterior trained on every feature.
/// Conditioning blocks depend only on the coalition and are cached; evaluation is
/// thread-safe.
class LiftEvaluator {
 public:
  LiftEvaluator(FeatureModel fm, std::size_t central_count, LiftSpec spec, ModelConfig config)
      : fm_(std::move(fm)), central_count_(central_count), spec_(spec), config_(config) {
    spec_.validate();
    if (central_count_ > fm_.dimension()) throw Error(ErrorKind::dimension, "central_count exceeds feature dimension");
    if (spec_.backend == Backend::monte_carlo && spec_.conditioning == Conditioning::interventional &&
        fm_.background.rows() == 0)
      throw Error(ErrorKind::invalid_argument, "Monte-Carlo interventional lift needs background rows");
  }

  const FeatureModel& feature_model() const { return fm_; }
  const LiftSpec& spec() const { return spec_; }
  std::size_t players() const { return fm_.dimension() - central_count_; }
  std::size_t central_count() const { return central_count_; }

  /// Known (central + coalition) and unknown (remaining support) feature columns.
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> partition(Coalition c) const {
    std::vector<std::size_t> known, unknown;
    for (std::size_t j = 0; j < central_count_; ++j) known.push_back(j);
    for (std::size_t i = 0; i < players(); ++i) (c.contains(i) ? known : unknown).push_back(central_count_ + i);
    return {known, unknown};
  }

  const GaussianBlock& block(Coalition c) const {
    std::lock_guard lock(mutex_);
    auto& slot = cache_[c.bits()];
    if (!slot) {
      auto [known, unknown] = partition(c);
      slot = std::make_unique<GaussianBlock>(spec_.conditioning == Conditioning::observational
                                                 ? condition_gaussian(fm_, std::move(known), std::move(unknown))
                                                 : marginal_gaussian(fm_, std::move(known), std::move(unknown)));
      if (spec_.backend == Backend::monte_carlo) slot->sampler = detail::psd_sqrt(slot->covariance);
    }
    return *slot;
  }

  LiftEstimate estimate(const PosteriorState& posterior, Coalition c, const Eigen::Ref<const Eigen::VectorXd>& x,
                        double y, std::uint64_t seed = 0) const {
    check(posterior, x);
    if (c.bits() & ~Coalition::grand(players()).bits()) throw Error(ErrorKind::invalid_argument, "coalition has unknown players");
    if (c == Coalition::grand(players()))
      return {score(predict(posterior, design_row(config_, x), config_), y, spec_.rule), 0.0};
    const auto& b = block(c);
    if (spec_.backend == Backend::closed_form)
      return {quadratic_score(posterior, config_, x, y, b.unknown, b.conditional_mean(x), b.covariance), 0.0};
    return spec_.conditioning == Conditioning::observational ? sample_conditional(posterior, b, x, y, seed)
                                                             : sample_background(posterior, b, x, y, seed);
  }

  double operator()(const PosteriorState& posterior, Coalition c, const Eigen::Ref<const Eigen::VectorXd>& x, double y,
                    std::uint64_t seed = 0) const {
    return estimate(posterior, c, x, y, seed).value;
  }

  /// Population expectation of the squared-error coalition value. The plug-in
  /// prediction is affine in x once the unknown block is replaced by its conditional mean.
  double expected(const PosteriorState& posterior, Coalition c, const PopulationMoments& moments) const {
    if (spec_.backend != Backend::closed_form || spec_.rule != ScoringRule::squared_error)
      throw Error(ErrorKind::unsupported, "population expectations need the closed-form squared-error lift");
    if (posterior.dimension() != design_dimension(config_, fm_.dimension()))
      throw Error(ErrorKind::dimension, "posterior does not cover every feature");
    const Eigen::Index shift = config_.include_intercept ? 1 : 0;
    const Eigen::VectorXd m = posterior.mean.tail(static_cast<Eigen::Index>(fm_.dimension()));
    const double m0 = shift ? posterior.mean[0] : 0.0;
    if (c == Coalition::grand(players())) return expected_affine_score(moments, m, m0);
    const auto& b = block(c);
    const Eigen::VectorXd m_u = detail::sub(m, b.unknown);
    Eigen::VectorXd a = Eigen::VectorXd::Zero(m.size());
    for (std::size_t k = 0; k < b.known.size(); ++k) {
      const auto j = static_cast<Eigen::Index>(b.known[k]);
      a[j] = m[j] + b.gain.col(static_cast<Eigen::Index>(k)).dot(m_u);
    }
    return expected_affine_score(moments, a, m0 + m_u.dot(b.offset)) + m_u.dot(b.covariance * m_u);
  }

 private:
  void check(const PosteriorState& posterior, const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (static_cast<std::size_t>(x.size()) != fm_.dimension())
      throw Error(ErrorKind::dimension, "observation does not match the feature model");
    if (posterior.dimension() != design_dimension(config_, fm_.dimension()))
      throw Error(ErrorKind::dimension, "posterior does not cover every feature");
  }

  double sample_score(const PosteriorState& posterior, const Eigen::VectorXd& xt, double y) const {
    const Eigen::VectorXd d = design_row(config_, xt);
    if (spec_.rule == ScoringRule::squared_error) {
      const double r = posterior.mean.dot(d) - y;
      return r * r;
    }
    return score(predict(posterior, d, config_), y, spec_.rule);
  }

  template <class Draw>
  LiftEstimate average(std::size_t n, Draw&& draw) const {
    double mean = 0.0, m2 = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double v = draw();
      const double delta = v - mean;
      mean += delta / static_cast<double>(s + 1);
      m2 += delta * (v - mean);
    }
    const double var = n > 1 ? m2 / static_cast<double>(n - 1) : 0.0;
    return {mean, std::sqrt(var / static_cast<double>(n))};
  }

  LiftEstimate sample_conditional(const PosteriorState& posterior, const GaussianBlock& b,
                                  const Eigen::Ref<const Eigen::VectorXd>& x, double y, std::uint64_t seed) const {
    Rng rng(mix_seed(seed, 0x0b5));
    const Eigen::VectorXd mu = b.conditional_mean(x);
    Eigen::VectorXd xt = x;
    Eigen::VectorXd z(b.sampler.cols());
    return average(spec_.mc_samples, [&] {
      for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = standard_normal(rng);
      const Eigen::VectorXd draw = mu + b.sampler * z;
      for (std::size_t k = 0; k < b.unknown.size(); ++k) xt[static_cast<Eigen::Index>(b.unknown[k])] = draw[static_cast<Eigen::Index>(k)];
      return sample_score(posterior, xt, y);
    });
  }

  LiftEstimate sample_background(const PosteriorState& posterior, const GaussianBlock& b,
                                 const Eigen::Ref<const Eigen::VectorXd>& x, double y, std::uint64_t seed) const {
    Rng rng(mix_seed(seed, 0x1e7));
    std::uniform_int_distribution<Eigen::Index> pick(0, fm_.background.rows() - 1);
    Eigen::VectorXd xt(x.size());
    return average(spec_.mc_samples, [&] {
      xt = fm_.background.row(pick(rng)).transpose();
      for (auto k : b.known) xt[static_cast<Eigen::Index>(k)] = x[static_cast<Eigen::Index>(k)];
      return sample_score(posterior, xt, y);
    });
  }

  FeatureModel fm_;
  std::size_t central_count_;
  LiftSpec spec_;
  ModelConfig config_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::uint64_t, std::unique_ptr<GaussianBlock>> cache_;
};

/// One-shot coalition value; see LiftEvaluator for repeated evaluation.
inline double eval_lift(const LiftSpec& spec, const PosteriorState& posterior, const FeatureModel& fm,
                        std::size_t central_count, const ModelConfig& config, Coalition coalition,
                        const Eigen::Ref<const Eigen::VectorXd>& x, double y, std::uint64_t seed = 0) {
  if (spec.evaluation != Evaluation::marginalize)
    throw Error(ErrorKind::unsupported, "eval_lift integrates a full-feature posterior; use CoalitionModels to retrain");
  return LiftEvaluator(fm, central_count, spec, config)(posterior, coalition, x, y, seed);
}

/// Exact squared-error lift under observational or interventional conditioning.
inline double closed_form_quadratic_score(const PosteriorState& posterior, const FeatureModel& fm,
                                          std::size_t central_count, const ModelConfig& config, Coalition coalition,
                                          const Eigen::Ref<const Eigen::VectorXd>& x, double y,
                                          Conditioning conditioning) {
  LiftSpec spec{conditioning, Backend::closed_form, 1, ScoringRule::squared_error, Evaluation::marginalize};
  return LiftEvaluator(fm, central_count, spec, config)(posterior, coalition, x, y);
}

/// Per-coalition retraining: one online posterior per subset of support players, each
/// over the central columns plus that subset.
class CoalitionModels {
 public:
  static constexpr std::size_t max_players = 16;

  CoalitionModels(std::size_t central_count, std::size_t players, ModelConfig config)
      : central_count_(central_count), players_(players), config_(config) {
    if (players > max_players) throw Error(ErrorKind::size_guard, "per-coalition retraining supports at most 16 players");
    const std::size_t count = std::size_t{1} << players;
    posteriors_.reserve(count);
    for (std::size_t mask = 0; mask < count; ++mask) {
      const auto dim = design_dimension(config_, central_count_ + Coalition(mask).size());
      if (dim == 0) throw Error(ErrorKind::dimension, "coalition model has no regressors; enable the intercept");
      posteriors_.push_back(init_posterior(config_, dim));
    }
  }

  std::size_t players() const { return players_; }
  const PosteriorState& posterior(Coalition c) const { return posteriors_.at(c.bits()); }

  Eigen::VectorXd design(Coalition c, const Eigen::Ref<const Eigen::VectorXd>& x) const {
    Eigen::VectorXd sub(static_cast<Eigen::Index>(central_count_ + c.size()));
    Eigen::Index k = 0;
    for (std::size_t j = 0; j < central_count_; ++j) sub[k++] = x[static_cast<Eigen::Index>(j)];
    for (auto i : c.members()) sub[k++] = x[static_cast<Eigen::Index>(central_count_ + i)];
    return design_row(config_, sub);
  }

  void update(const Eigen::Ref<const Eigen::VectorXd>& x, double y) {
    for (std::size_t mask = 0; mask < posteriors_.size(); ++mask)
      posteriors_[mask] = regmarket::update(posteriors_[mask], design(Coalition(mask), x), y, config_);
  }

  double value(Coalition c, const Eigen::Ref<const Eigen::VectorXd>& x, double y, ScoringRule rule) const {
    return score(predict(posterior(c), design(c, x), config_), y, rule);
  }

 private:
  std::size_t central_count_;
  std::size_t players_;
  ModelConfig config_;
  std::vector<PosteriorState> posteriors_;
};

}  // namespace regmarket
