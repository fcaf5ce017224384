#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "regmarket/allocation.hpp"
#include "regmarket/bayes.hpp"
#include "regmarket/dataset.hpp"
#include "regmarket/error.hpp"
#include "regmarket/lift.hpp"
#include "regmarket/random.hpp"

namespace regmarket {

enum class Stage { in_sample, out_of_sample };

inline std::string to_string(Stage s) { return s == Stage::in_sample ? "in-sample" : "out-of-sample"; }

/// Models held fixed for a whole run instead of being learned online. When population
/// moments are present, every step uses expected losses under that law.
struct FixedModels {
  PosteriorState full;
  PosteriorState central;
  FeatureModel features;
  std::optional<PopulationMoments> moments;
};

using FixedModelProvider = std::function<FixedModels(const MarketData&)>;

struct MarketTask {
  double valuation = 1.0;  // lambda, currency per unit loss improvement per step
  ModelConfig model;
  LiftSpec lift;
  AllocationMethod method = AllocationMethod::shapley_exact;
  Window train;
  Window test;
  std::size_t permutations = 200;  // shapley-sampled only
  std::uint64_t seed = 0;
  double gamma = 1.0;              // robust-shapley only
  Similarity similarity = Similarity::pearson;
  bool update_in_test = true;
  std::optional<std::size_t> max_background;
  unsigned threads = 1;
  FixedModelProvider fixed_models;

  void validate(const MarketData& data) const {
    if (!std::isfinite(valuation) || valuation < 0.0) throw Error(ErrorKind::invalid_argument, "valuation must be >= 0");
    model.validate();
    lift.validate();
    if (train.empty() && test.empty()) throw Error(ErrorKind::empty_data, "both market windows are empty");
    if (train.end > data.rows() || test.end > data.rows())
      throw Error(ErrorKind::invalid_argument, "market window exceeds data length");
    if (!train.empty() && !test.empty() && test.begin < train.end)
      throw Error(ErrorKind::invalid_argument, "test window must follow the train window");
    if (method == AllocationMethod::shapley_sampled && permutations == 0)
      throw Error(ErrorKind::invalid_argument, "permutations must be at least 1");
    if (lift.evaluation == Evaluation::retrain && fixed_models)
      throw Error(ErrorKind::unsupported, "per-coalition retraining cannot use fixed models");
  }
};

struct LedgerEntry {
  std::size_t t = 0;
  Stage stage = Stage::in_sample;
  double revenue = 0.0;
  double loss_base = 0.0;  // tracked expected loss of the central-only model
  double loss_full = 0.0;  // tracked expected loss with every support feature
  std::vector<double> rewards;  // aligned with MarketRun::agents
};

struct StageSummary {
  std::size_t steps = 0;
  double mean_loss_base = 0.0;
  double mean_loss_full = 0.0;
  double improvement = 0.0;  // 1 - mean_loss_full / mean_loss_base
  double revenue = 0.0;
  std::vector<double> rewards;
};

struct MarketRun {
  std::vector<std::string> agents;  // support agents of the data, pseudo-identities included
  std::vector<LedgerEntry> ledger;
  StageSummary in_sample;
  StageSummary out_of_sample;
  Eigen::VectorXd expected_contribution;  // final tracked E[phi_i] per support feature
  Eigen::VectorXd shares;                 // final per-feature reward shares

  double total_revenue() const { return in_sample.revenue + out_of_sample.revenue; }
  std::vector<double> total_rewards() const {
    std::vector<double> out(agents.size(), 0.0);
    for (std::size_t a = 0; a < agents.size(); ++a) {
      if (a < in_sample.rewards.size()) out[a] += in_sample.rewards[a];
      if (a < out_of_sample.rewards.size()) out[a] += out_of_sample.rewards[a];
    }
    return out;
  }
};

/// Methods whose rewards must sum to the revenue.
inline bool budget_balanced(AllocationMethod method) {
  return method == AllocationMethod::shapley_exact || method == AllocationMethod::shapley_sampled;
}

/// Checks budget balance (or the budget-loss bound) and individual rationality for every
/// ledger row; throws a numerical error naming the first offending step.
inline void check_ledger(const MarketRun& run, AllocationMethod method, double tol = 1e-9) {
  for (const auto& e : run.ledger) {
    double total = 0.0;
    for (double r : e.rewards) {
      if (r < 0.0) throw Error(ErrorKind::numerical, "negative reward at t=" + std::to_string(e.t));
      total += r;
    }
    const double slack = tol * std::max(1.0, std::abs(e.revenue));
    const bool ok = budget_balanced(method) ? std::abs(total - e.revenue) <= slack || (e.revenue == 0.0 && total == 0.0)
                                            : total <= e.revenue + slack;
    if (!ok) throw Error(ErrorKind::numerical, "budget check failed at t=" + std::to_string(e.t));
  }
}

/// Posterior and feature law of the data-generating process, for synthetic data whose
/// columns (replicates included) have known population moments.
inline FixedModels population_models(const SyntheticSpec& spec, const MarketData& data, const ModelConfig& config,
                                     double effective_samples = 1e6) {
  const PopulationMoments pm = population_moments(spec, data);
  auto design_moments = [&](const std::vector<std::size_t>& cols) {
    const auto n = static_cast<Eigen::Index>(cols.size());
    const Eigen::Index shift = config.include_intercept ? 1 : 0;
    Eigen::MatrixXd second(n + shift, n + shift);
    Eigen::VectorXd cross(n + shift);
    if (shift) {
      second(0, 0) = 1.0;
      cross[0] = pm.target_mean;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto ci = static_cast<Eigen::Index>(cols[static_cast<std::size_t>(i)]);
      if (shift) second(0, i + 1) = second(i + 1, 0) = pm.mean[ci];
      cross[i + shift] = pm.target_cross[ci] + pm.mean[ci] * pm.target_mean;
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto cj = static_cast<Eigen::Index>(cols[static_cast<std::size_t>(j)]);
        second(i + shift, j + shift) = pm.covariance(ci, cj) + pm.mean[ci] * pm.mean[cj];
      }
    }
    return asymptotic_posterior(config, second, cross, effective_samples);
  };
  std::vector<std::size_t> all(data.feature_count()), central(data.central_count);
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  for (std::size_t j = 0; j < central.size(); ++j) central[j] = j;
  if (design_dimension(config, central.size()) == 0)
    throw Error(ErrorKind::dimension, "central-only model has no regressors; enable the intercept");

  FixedModels out;
  out.full = design_moments(all);
  out.central = design_moments(central);
  out.features.mean = pm.mean;
  out.features.covariance = pm.covariance;
  out.moments = pm;
  return out;
}

namespace detail {

inline Eigen::VectorXd central_design(const ModelConfig& config, const MarketData& data,
                                      const Eigen::Ref<const Eigen::VectorXd>& x) {
  return design_row(config, x.head(static_cast<Eigen::Index>(data.central_count)));
}

/// Running mean of per-step values inside a stage.
struct StageAccumulator {
  StageSummary summary;
  double sum_base = 0.0;
  double sum_full = 0.0;

  void add(double step_base, double step_full, const LedgerEntry& e) {
    ++summary.steps;
    sum_base += step_base;
    sum_full += step_full;
    summary.revenue += e.revenue;
    if (summary.rewards.empty()) summary.rewards.assign(e.rewards.size(), 0.0);
    for (std::size_t a = 0; a < e.rewards.size(); ++a) summary.rewards[a] += e.rewards[a];
  }

  StageSummary finish(std::size_t agents) {
    if (summary.rewards.empty()) summary.rewards.assign(agents, 0.0);
    if (summary.steps) {
      summary.mean_loss_base = sum_base / double(summary.steps);
      summary.mean_loss_full = sum_full / double(summary.steps);
      summary.improvement = summary.mean_loss_base > 0.0 ? 1.0 - summary.mean_loss_full / summary.mean_loss_base : 0.0;
    }
    return summary;
  }
};

}  // namespace detail

/// Two-stage online market. Train steps update the posteriors and then clear on the
/// same observation (in-sample); test steps clear the forecast issued before the
/// observation and then update (out-of-sample).
class MarketEngine {
 public:
  MarketEngine(MarketTask task, const MarketData& data) : task_(std::move(task)), data_(data) {
    validate(data_);
    task_.validate(data_);
    players_ = data_.support_count();
    if (players_ == 0) throw Error(ErrorKind::invalid_argument, "market has no support features");
    if (task_.method != AllocationMethod::shapley_sampled && players_ > enumeration_guard)
      throw Error(ErrorKind::size_guard, std::to_string(players_) + " support features exceed the exact-enumeration guard");

    for (const auto& a : data_.agents) agents_.push_back(a.id);
    owner_of_player_.resize(players_);
    for (std::size_t a = 0; a < data_.agents.size(); ++a)
      for (auto c : data_.agents[a].columns) owner_of_player_[c - data_.central_count] = a;

    if (task_.fixed_models) {
      fixed_ = task_.fixed_models(data_);
      full_ = fixed_->full;
      central_ = fixed_->central;
      if (task_.lift.evaluation == Evaluation::marginalize)
        lift_ = std::make_unique<LiftEvaluator>(fixed_->features, data_.central_count, task_.lift, task_.model);
    } else {
      full_ = init_posterior(task_.model, design_dimension(task_.model, data_.feature_count()));
      const auto central_dim = design_dimension(task_.model, data_.central_count);
      if (central_dim == 0) throw Error(ErrorKind::dimension, "central-only model has no regressors; enable the intercept");
      central_ = init_posterior(task_.model, central_dim);
      if (task_.lift.evaluation == Evaluation::retrain) {
        coalitions_ = std::make_unique<CoalitionModels>(data_.central_count, players_, task_.model);
      } else {
        const Window fit = !task_.train.empty() ? task_.train : task_.test;
        lift_ = std::make_unique<LiftEvaluator>(fit_feature_model(data_, fit, task_.max_background, task_.seed),
                                                data_.central_count, task_.lift, task_.model);
      }
    }
    if (task_.method == AllocationMethod::robust_shapley) {
      const Window fit = !task_.train.empty() ? task_.train : task_.test;
      penalties_ = similarity_penalties(data_, fit, task_.gamma, task_.similarity);
    }
    base_.forgetting = task_.model.forgetting;
    full_loss_.forgetting = task_.model.forgetting;
    contribution_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players_));
    shares_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(players_));
  }

  const std::vector<std::string>& agents() const { return agents_; }

  MarketRun run() {
    MarketRun out;
    out.agents = agents_;
    detail::StageAccumulator in, oos;
    for (std::size_t t = task_.train.begin; t < task_.train.end; ++t) step(t, Stage::in_sample, out, in);
    for (std::size_t t = task_.test.begin; t < task_.test.end; ++t) step(t, Stage::out_of_sample, out, oos);
    out.in_sample = in.finish(agents_.size());
    out.out_of_sample = oos.finish(agents_.size());
    out.expected_contribution = contribution_;
    out.shares = shares_;
    return out;
  }

 private:
  void learn(const Eigen::VectorXd& x, double y) {
    if (fixed_) return;
    full_ = update(full_, design_row(task_.model, x), y, task_.model);
    central_ = update(central_, detail::central_design(task_.model, data_, x), y, task_.model);
    if (coalitions_) coalitions_->update(x, y);
  }

  double model_loss(const PosteriorState& posterior, const Eigen::VectorXd& d, double y, bool central_only) const {
    if (fixed_ && fixed_->moments) {
      const Eigen::Index shift = task_.model.include_intercept ? 1 : 0;
      const double m0 = shift ? posterior.mean[0] : 0.0;
      Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data_.feature_count()));
      const auto n = central_only ? static_cast<Eigen::Index>(data_.central_count) : a.size();
      a.head(n) = posterior.mean.tail(n);
      return expected_affine_score(*fixed_->moments, a, m0);
    }
    return score(predict(posterior, d, task_.model), y, task_.lift.rule);
  }

  /// Coalition value for the observation at step t.
  double coalition_value(Coalition c, const Eigen::VectorXd& x, double y, std::size_t t) const {
    if (coalitions_) return coalitions_->value(c, x, y, task_.lift.rule);
    if (fixed_ && fixed_->moments) return lift_->expected(full_, c, *fixed_->moments);
    return (*lift_)(full_, c, x, y, mix_seed(task_.seed, t));
  }

  /// Per-step semivalues and grand-coalition gain.
  std::pair<Eigen::VectorXd, double> allocate(const Eigen::VectorXd& x, double y, std::size_t t) {
    GameOracle game{players_, [&](Coalition c) { return coalition_value(c, x, y, t); }};
    if (task_.method == AllocationMethod::shapley_sampled) {
      SamplingOptions opts;
      opts.threads = task_.threads;
      auto r = shapley_sampled(game, task_.permutations, mix_seed(task_.seed, 0xa110c, t), opts);
      return {r.values, r.gain};
    }
    // Expected-value games do not change between steps.
    if (fixed_ && fixed_->moments && !table_.empty()) return semivalues(table_);
    auto table = tabulate(game);
    if (fixed_ && fixed_->moments) table_ = table;
    return semivalues(table);
  }

  std::pair<Eigen::VectorXd, double> semivalues(const std::vector<double>& table) const {
    const double gain = table.front() - table.back();
    if (task_.method == AllocationMethod::banzhaf) return {banzhaf_from_table(table, players_), gain};
    return {shapley_from_table(table, players_), gain};
  }

  void step(std::size_t t, Stage stage, MarketRun& out, detail::StageAccumulator& acc) {
    const Eigen::VectorXd x = data_.features.row(static_cast<Eigen::Index>(t)).transpose();
    const double y = data_.target[static_cast<Eigen::Index>(t)];
    if (stage == Stage::in_sample) learn(x, y);

    const double step_base = model_loss(central_, detail::central_design(task_.model, data_, x), y, true);
    const double step_full = model_loss(full_, design_row(task_.model, x), y, false);
    if (!std::isfinite(step_base) || !std::isfinite(step_full))
      throw Error(ErrorKind::numerical, "non-finite loss at t=" + std::to_string(t));
    base_ = track_loss(base_, step_base);
    full_loss_ = track_loss(full_loss_, step_full);

    auto [phi, gain] = allocate(x, y, t);
    if (!phi.allFinite()) throw Error(ErrorKind::numerical, "non-finite allocation at t=" + std::to_string(t));
    // E[phi] follows the same exponential recursion as the losses it is built from.
    const double tau = task_.model.forgetting;
    if (!tracked_) {
      contribution_ = phi;
      gain_ = gain;
      tracked_ = true;
    } else {
      contribution_ = (1.0 - tau) * phi + tau * contribution_;
      gain_ = (1.0 - tau) * gain + tau * gain_;
    }
    shares_ = normalize_shares(task_.method, contribution_, gain_, penalties_);

    LedgerEntry e;
    e.t = t;
    e.stage = stage;
    e.loss_base = *base_.value;
    e.loss_full = *full_loss_.value;
    const double improvement = std::max(0.0, e.loss_base - e.loss_full);
    e.revenue = shares_.sum() > 0.0 ? task_.valuation * improvement : 0.0;
    e.rewards.assign(agents_.size(), 0.0);
    for (std::size_t i = 0; i < players_; ++i) e.rewards[owner_of_player_[i]] += e.revenue * shares_[static_cast<Eigen::Index>(i)];
    acc.add(step_base, step_full, e);
    out.ledger.push_back(std::move(e));

    if (stage == Stage::out_of_sample && task_.update_in_test) learn(x, y);
  }

  MarketTask task_;
  const MarketData& data_;
  std::size_t players_ = 0;
  std::vector<std::string> agents_;
  std::vector<std::size_t> owner_of_player_;
  std::optional<FixedModels> fixed_;
  PosteriorState full_;
  PosteriorState central_;
  std::unique_ptr<LiftEvaluator> lift_;
  std::unique_ptr<CoalitionModels> coalitions_;
  Eigen::VectorXd penalties_;
  std::vector<double> table_;
  LossTracker base_{};
  LossTracker full_loss_{};
  Eigen::VectorXd contribution_;
  Eigen::VectorXd shares_;
  double gain_ = 0.0;
  bool tracked_ = false;
};

inline MarketRun run_market(const MarketTask& task, const MarketData& data) {
  return MarketEngine(task, data).run();
}

/// Cumulative rewards folded onto real agents (pseudo-identities map to their owner).
inline std::map<std::string, double> rewards_by_owner(const MarketRun& run, const MarketData& data) {
  std::map<std::string, double> out;
  for (const auto& id : data.real_agents()) out[id] = 0.0;
  const auto totals = run.total_rewards();
  for (std::size_t a = 0; a < run.agents.size(); ++a) out[data.beneficial_owner(run.agents[a])] += totals[a];
  return out;
}

/// Ledger CSV: t,stage,revenue,loss_base,loss_full,reward_<agent>... in step order.
inline std::string ledger_csv(const MarketRun& run) {
  std::string out = "t,stage,revenue,loss_base,loss_full";
  for (const auto& a : run.agents) out += ",reward_" + a;
  out += '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return std::string(buf);
  };
  for (const auto& e : run.ledger) {
    out += std::to_string(e.t) + ',' + to_string(e.stage) + ',' + num(e.revenue) + ',' + num(e.loss_base) + ',' +
           num(e.loss_full);
    for (double r : e.rewards) out += ',' + num(r);
    out += '\n';
  }
  return out;
}

}  // namespace regmarket
