#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "regmarket/error.hpp"

namespace regmarket {

enum class ScoringRule { squared_error, nlpd };

inline std::string to_string(ScoringRule rule) {
  return rule == ScoringRule::squared_error ? "squared-error" : "nlpd";
}

inline ScoringRule parse_scoring_rule(const std::string& id) {
  if (id == "squared-error") return ScoringRule::squared_error;
  if (id == "nlpd" || id == "negative-log-predictive-density") return ScoringRule::nlpd;
  throw Error(ErrorKind::invalid_argument, "unknown scoring rule '" + id + "'");
}

struct ModelConfig {
  double prior_precision = 1.0;  // alpha, isotropic prior N(0, alpha^-1 I)
  double noise_precision = 1.0;  // beta
  double forgetting = 0.999;     // tau in (0, 1]
  bool include_intercept = true;

  void validate() const {
    if (!(prior_precision > 0.0)) throw Error(ErrorKind::invalid_argument, "prior_precision must be positive");
    if (!(noise_precision > 0.0)) throw Error(ErrorKind::invalid_argument, "noise_precision must be positive");
    if (!(forgetting > 0.0 && forgetting <= 1.0))
      throw Error(ErrorKind::invalid_argument, "forgetting must lie in (0, 1]");
  }
};

/// Gaussian belief N(mean, precision^-1) over the regression coefficients.
struct PosteriorState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd precision;

  std::size_t dimension() const { return static_cast<std::size_t>(mean.size()); }

  Eigen::MatrixXd covariance() const {
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) throw Error(ErrorKind::numerical, "posterior precision is not positive definite");
    return llt.solve(Eigen::MatrixXd::Identity(precision.rows(), precision.cols()));
  }
};

struct PredictiveDistribution {
  double mean = 0.0;
  double variance = 1.0;
};

/// Prepends the constant regressor when the model has an intercept.
inline Eigen::VectorXd design_row(const ModelConfig& config, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (!config.include_intercept) return x;
  Eigen::VectorXd d(x.size() + 1);
  d[0] = 1.0;
  d.tail(x.size()) = x;
  return d;
}

inline std::size_t design_dimension(const ModelConfig& config, std::size_t features) {
  return features + (config.include_intercept ? 1 : 0);
}

inline PosteriorState init_posterior(const ModelConfig& config, std::size_t dimension) {
  config.validate();
  if (dimension == 0) throw Error(ErrorKind::dimension, "posterior dimension must be at least 1");
  const auto n = static_cast<Eigen::Index>(dimension);
  return {Eigen::VectorXd::Zero(n), config.prior_precision * Eigen::MatrixXd::Identity(n, n)};
}

/// Conjugate update with likelihood precision beta on design row `d`, then exponential
/// forgetting towards the prior in natural-parameter space:
///   precision' = tau * precision_post + (1 - tau) * alpha * I
///   (precision * mean)' = tau * (precision * mean)_post
inline PosteriorState update(const PosteriorState& state, const Eigen::Ref<const Eigen::VectorXd>& d, double y,
                             const ModelConfig& config) {
  if (static_cast<std::size_t>(d.size()) != state.dimension())
    throw Error(ErrorKind::dimension, "design row has " + std::to_string(d.size()) + " entries, posterior has " +
                                          std::to_string(state.dimension()));
  if (!d.allFinite() || !std::isfinite(y)) throw Error(ErrorKind::invalid_argument, "non-finite observation");

  const double beta = config.noise_precision;
  const double tau = config.forgetting;
  Eigen::MatrixXd precision = state.precision;
  precision.noalias() += beta * d * d.transpose();
  Eigen::VectorXd natural = state.precision * state.mean + beta * y * d;

  if (tau < 1.0) {
    precision *= tau;
    precision.diagonal().array() += (1.0 - tau) * config.prior_precision;
    natural *= tau;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(precision);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::numerical, "posterior precision lost positive definiteness");
  return {llt.solve(natural), std::move(precision)};
}

/// Predictive N(mean . d, 1/beta + d' precision^-1 d).
inline PredictiveDistribution predict(const PosteriorState& state, const Eigen::Ref<const Eigen::VectorXd>& d,
                                      const ModelConfig& config) {
  if (static_cast<std::size_t>(d.size()) != state.dimension())
    throw Error(ErrorKind::dimension, "design row has " + std::to_string(d.size()) + " entries, posterior has " +
                                          std::to_string(state.dimension()));
  Eigen::LLT<Eigen::MatrixXd> llt(state.precision);
  if (llt.info() != Eigen::Success) throw Error(ErrorKind::numerical, "posterior precision is not positive definite");
  const double spread = d.dot(llt.solve(d));
  return {state.mean.dot(d), 1.0 / config.noise_precision + std::max(spread, 0.0)};
}

/// Negatively oriented score of a Gaussian predictive distribution.
inline double score(const PredictiveDistribution& pred, double y, ScoringRule rule) {
  const double r = y - pred.mean;
  switch (rule) {
    case ScoringRule::squared_error: return r * r;
    case ScoringRule::nlpd:
      return 0.5 * std::log(2.0 * std::numbers::pi * pred.variance) + r * r / (2.0 * pred.variance);
  }
  throw Error(ErrorKind::invalid_argument, "unknown scoring rule");
}

/// Exponentially weighted estimate of an expected loss. Without an explicit initial
/// value the first observation seeds the recursion.
struct LossTracker {
  double forgetting = 0.999;
  std::optional<double> value;
};

inline LossTracker track_loss(LossTracker tracker, double step_loss) {
  if (!std::isfinite(step_loss)) throw Error(ErrorKind::invalid_argument, "non-finite step loss");
  if (!tracker.value) tracker.value = step_loss;
  else tracker.value = (1.0 - tracker.forgetting) * step_loss + tracker.forgetting * *tracker.value;
  return tracker;
}

/// Large-sample posterior given the design second moments E[d d'] and E[d y]: the
/// mean is the least-squares limit (minimum-norm when E[d d'] is singular) and the
/// precision is that of `effective_samples` observations.
inline PosteriorState asymptotic_posterior(const ModelConfig& config, const Eigen::MatrixXd& second_moment,
                                           const Eigen::VectorXd& cross_moment, double effective_samples = 1e6) {
  config.validate();
  if (second_moment.rows() == 0) throw Error(ErrorKind::dimension, "posterior dimension must be at least 1");
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(second_moment);
  Eigen::MatrixXd precision = config.noise_precision * effective_samples * second_moment;
  precision.diagonal().array() += config.prior_precision;
  return {cod.solve(cross_moment), std::move(precision)};
}

}  // namespace regmarket
