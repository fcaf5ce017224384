#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "regmarket/allocation.hpp"
#include "regmarket/dataset.hpp"
#include "regmarket/error.hpp"
#include "regmarket/market.hpp"

namespace regmarket {

struct AttackScenario {
  std::string attacker;
  std::map<std::size_t, std::size_t> replicate_plan;  // feature column -> number of replicates K
  std::optional<double> noise_std;  // default: 5% of the source column's sample std
  bool spiteful = false;            // recorded only; verdicts rest on reward deltas
};

/// Replicates `scenario.attacker`'s features under fresh pseudo-identities
/// `<attacker>~<n>`, each aliased back to the attacker.
inline MarketData apply_attack(const MarketData& data, const AttackScenario& scenario, std::uint64_t seed) {
  const SupportAgent* attacker = data.find_agent(scenario.attacker);
  if (!attacker) throw Error(ErrorKind::invalid_argument, "unknown attacker '" + scenario.attacker + "'");
  if (scenario.noise_std && (!std::isfinite(*scenario.noise_std) || *scenario.noise_std < 0.0))
    throw Error(ErrorKind::invalid_argument, "replicate noise_std must be finite and >= 0");
  for (const auto& [col, k] : scenario.replicate_plan) {
    if (col >= data.feature_count()) throw Error(ErrorKind::invalid_argument, "replicate column out of range");
    if (col < data.central_count) throw Error(ErrorKind::invalid_argument, "central features cannot be replicated");
    if (data.owner_of(col) != scenario.attacker)
      throw Error(ErrorKind::invalid_argument, "attacker does not own column " + data.columns[col]);
  }

  MarketData out = data;
  std::size_t serial = 0;
  for (const auto& a : out.agents)
    if (out.beneficial_owner(a.id) == scenario.attacker && a.id != scenario.attacker) ++serial;
  for (const auto& [col, k] : scenario.replicate_plan) {
    if (k == 0) continue;
    const auto source = out.features.col(static_cast<Eigen::Index>(col));
    const double sd = std::sqrt((source.array() - source.mean()).square().mean());
    const double noise = scenario.noise_std.value_or(0.05 * sd);
    const auto added = append_replicates(out, col, k, noise, seed);
    for (auto idx : added) {
      const std::string id = scenario.attacker + "~" + std::to_string(++serial);
      out.agents.push_back({id, {idx}});
      out.aliases[id] = scenario.attacker;
    }
  }
  validate(out);
  return out;
}

enum class Robustness { strict, weak, not_robust };

inline std::string to_string(Robustness r) {
  switch (r) {
    case Robustness::strict: return "strict";
    case Robustness::weak: return "weak";
    case Robustness::not_robust: return "not-robust";
  }
  return "unknown";
}

struct RobustnessVerdict {
  std::map<std::string, double> honest;    // cumulative rewards per real agent
  std::map<std::string, double> attacked;
  std::map<std::string, double> deltas;    // attacked - honest
  double honest_revenue = 0.0;
  double attacked_revenue = 0.0;
  Robustness classification = Robustness::strict;
};

/// strict: every |delta| <= tol; not-robust: the attacker gains more than tol; weak otherwise.
inline Robustness classify(const std::map<std::string, double>& deltas, const std::string& attacker, double tol) {
  auto it = deltas.find(attacker);
  if (it != deltas.end() && it->second > tol) return Robustness::not_robust;
  for (const auto& [id, d] : deltas)
    if (std::abs(d) > tol) return Robustness::weak;
  return Robustness::strict;
}

inline RobustnessVerdict compare_runs(const MarketRun& honest, const MarketData& honest_data, const MarketRun& attacked,
                                      const MarketData& attacked_data, const std::string& attacker, double tolerance) {
  RobustnessVerdict v;
  v.honest = rewards_by_owner(honest, honest_data);
  v.attacked = rewards_by_owner(attacked, attacked_data);
  for (const auto& [id, r] : v.honest) v.deltas[id] = v.attacked[id] - r;
  v.honest_revenue = honest.total_revenue();
  v.attacked_revenue = attacked.total_revenue();
  v.classification = classify(v.deltas, attacker, tolerance);
  return v;
}

/// Runs the market honestly and under attack with identical task settings.
inline RobustnessVerdict evaluate_robustness(const MarketTask& task, const MarketData& data,
                                             const AttackScenario& scenario, double tolerance) {
  const MarketData attacked = apply_attack(data, scenario, task.seed);
  const MarketRun honest_run = run_market(task, data);
  const MarketRun attacked_run = run_market(task, attacked);
  return compare_runs(honest_run, data, attacked_run, attacked, scenario.attacker, tolerance);
}

/// Allocation policy compared in replication sweeps.
struct Policy {
  std::string name;
  Conditioning conditioning = Conditioning::observational;
  AllocationMethod method = AllocationMethod::shapley_exact;
};

inline std::vector<Policy> default_policies() {
  return {{"observational-shapley", Conditioning::observational, AllocationMethod::shapley_exact},
          {"interventional-shapley", Conditioning::interventional, AllocationMethod::shapley_exact},
          {"robust-shapley", Conditioning::observational, AllocationMethod::robust_shapley},
          {"banzhaf", Conditioning::observational, AllocationMethod::banzhaf}};
}

inline Policy parse_policy(const std::string& name) {
  for (const auto& p : default_policies())
    if (p.name == name) return p;
  throw Error(ErrorKind::invalid_argument, "unknown policy '" + name + "'");
}

struct CurvePoint {
  std::string method;
  std::size_t k = 0;
  std::string agent;
  double reward_share = 0.0;  // cumulative reward / cumulative revenue
  Robustness classification = Robustness::strict;  // against the K = 0 run of the same method
};

inline MarketTask with_policy(MarketTask task, const Policy& p) {
  task.lift.conditioning = p.conditioning;
  task.method = p.method;
  return task;
}

/// Sweeps K = 0..k_max replicates of the attacker's first feature for every policy.
inline std::vector<CurvePoint> replication_curve(const MarketTask& task, const MarketData& data,
                                                 const std::string& attacker, std::size_t k_max,
                                                 const std::vector<Policy>& policies = default_policies(),
                                                 std::optional<double> noise_std = std::nullopt,
                                                 double tolerance = 1e-6) {
  if (k_max < 1) throw Error(ErrorKind::invalid_argument, "k_max must be at least 1");
  const SupportAgent* owner = data.find_agent(attacker);
  if (!owner || owner->columns.empty()) throw Error(ErrorKind::invalid_argument, "attacker owns no features");

  std::vector<MarketData> variants;
  for (std::size_t k = 0; k <= k_max; ++k) {
    AttackScenario s{attacker, {{owner->columns.front(), k}}, noise_std, false};
    variants.push_back(apply_attack(data, s, task.seed));
  }
  std::vector<CurvePoint> out;
  for (const auto& p : policies) {
    const MarketTask t = with_policy(task, p);
    std::map<std::string, double> honest;
    for (std::size_t k = 0; k <= k_max; ++k) {
      const MarketRun run = run_market(t, variants[k]);
      const auto rewards = rewards_by_owner(run, variants[k]);
      if (k == 0) honest = rewards;
      std::map<std::string, double> deltas;
      for (const auto& [id, r] : honest) deltas[id] = rewards.at(id) - r;
      const auto verdict = classify(deltas, attacker, tolerance);
      const double revenue = run.total_revenue();
      for (const auto& [id, r] : rewards)
        out.push_back({p.name, k, id, revenue > 0.0 ? r / revenue : 0.0, verdict});
    }
  }
  return out;
}

inline std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::string out = "method,K,agent,reward_share,classification\n";
  char buf[64];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.12g", p.reward_share);
    out += p.method + ',' + std::to_string(p.k) + ',' + p.agent + ',' + buf + ',' + to_string(p.classification) + '\n';
  }
  return out;
}

inline std::string verdict_csv(const RobustnessVerdict& v, const std::string& method) {
  std::string out = "method,agent,honest_reward,attacked_reward,delta,classification\n";
  char buf[160];
  for (const auto& [id, d] : v.deltas) {
    std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g", v.honest.at(id), v.attacked.at(id), d);
    out += method + ',' + id + ',' + buf + ',' + to_string(v.classification) + '\n';
  }
  return out;
}

}  // namespace regmarket
