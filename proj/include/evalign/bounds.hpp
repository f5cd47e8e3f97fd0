#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace evalign {

// Inputs of the reweighted worst-group risk certificate: per-group sample
// sizes and empirical risks, a fixed mixture weight vector over groups, the
// posterior-prior KL of the learner, and the confidence level.
struct GroupRiskProfile {
  std::vector<long> group_sizes;
  std::vector<double> empirical_risks;
  std::vector<double> weights;
  double kl_qp = 0.0;
  double delta = 0.05;
};

inline void validate(const GroupRiskProfile& p) {
  const std::size_t g = p.group_sizes.size();
  if (g == 0) throw std::invalid_argument("GroupRiskProfile: no groups");
  if (p.empirical_risks.size() != g || p.weights.size() != g) {
    throw std::invalid_argument("GroupRiskProfile: field lengths disagree");
  }
  for (long n : p.group_sizes) {
    if (n < 1) throw std::invalid_argument("GroupRiskProfile: every group needs n >= 1");
  }
  for (double r : p.empirical_risks) {
    if (!(r >= 0.0) || !(r <= 1.0)) {
      throw std::invalid_argument("GroupRiskProfile: risks must lie in [0, 1]");
    }
  }
  double wsum = 0.0;
  for (double w : p.weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("GroupRiskProfile: negative weight");
    wsum += w;
  }
  if (std::abs(wsum - 1.0) > 1e-9) {
    throw std::invalid_argument("GroupRiskProfile: weights must sum to 1, got " +
                                std::to_string(wsum));
  }
  if (!(p.kl_qp >= 0.0)) throw std::invalid_argument("GroupRiskProfile: kl_qp must be >= 0");
  if (!(p.delta > 0.0) || !(p.delta < 1.0)) {
    throw std::invalid_argument("GroupRiskProfile: delta must lie in (0, 1)");
  }
}

inline double min_weight(const GroupRiskProfile& p) {
  validate(p);
  return *std::min_element(p.weights.begin(), p.weights.end());
}

// Weighted average of the empirical group risks.
inline double reweighted_risk(const GroupRiskProfile& p) {
  validate(p);
  double acc = 0.0;
  for (std::size_t g = 0; g < p.weights.size(); ++g) {
    acc += p.weights[g] * p.empirical_risks[g];
  }
  return acc;
}

// High-probability upper bound on the worst-group risk:
//   (1/alpha) * sum_g w_g * R_hat_g + sqrt((KL(Q||P) + ln(|G|/delta)) / (2 n_min))
// with alpha the smallest group weight and n_min the smallest group size.
// Requires alpha > 0, otherwise the first term cannot dominate the maximum.
inline double pac_bayes_bound(const GroupRiskProfile& p) {
  validate(p);
  const double alpha = min_weight(p);
  if (!(alpha > 0.0)) {
    throw std::invalid_argument("pac_bayes_bound: all group weights must be positive");
  }
  const long n_min = *std::min_element(p.group_sizes.begin(), p.group_sizes.end());
  const double groups = static_cast<double>(p.group_sizes.size());
  const double slack = std::sqrt((p.kl_qp + std::log(groups / p.delta)) /
                                 (2.0 * static_cast<double>(n_min)));
  return reweighted_risk(p) / alpha + slack;
}

inline GroupRiskProfile profile_from_json(const nlohmann::json& j) {
  GroupRiskProfile p;
  p.group_sizes = j.at("group_sizes").get<std::vector<long>>();
  p.empirical_risks = j.at("empirical_risks").get<std::vector<double>>();
  p.weights = j.at("weights").get<std::vector<double>>();
  p.kl_qp = j.at("kl_qp").get<double>();
  p.delta = j.at("delta").get<double>();
  validate(p);
  return p;
}

inline nlohmann::json bound_report_json(const GroupRiskProfile& p) {
  validate(p);
  nlohmann::json j;
  j["alpha"] = min_weight(p);
  j["bound"] = pac_bayes_bound(p);
  j["delta"] = p.delta;
  j["group_count"] = p.group_sizes.size();
  j["kl_qp"] = p.kl_qp;
  j["n_min"] = *std::min_element(p.group_sizes.begin(), p.group_sizes.end());
  j["reweighted_risk"] = reweighted_risk(p);
  return j;
}

// One independent experiment for the coverage check: empirical group risks
// measured on a fresh training sample, true risks estimated on a large
// held-out sample from the same distribution.
struct BoundTrial {
  std::vector<long> group_sizes;
  std::vector<double> empirical_risks;
  std::vector<double> true_risks;
};

struct BoundCheckConfig {
  int trials = 50;
  std::vector<double> weights;
  double kl_qp = 0.0;
  double delta = 0.05;
};

struct BoundCheckSummary {
  int trials = 0;
  int violations = 0;          // trials where some true group risk beat the bound
  double violation_rate = 0.0;
  double threshold = 0.0;      // delta + 3 sigma sampling allowance
  bool pass = false;
};

// Empirical coverage of the bound: re-run the experiment `trials` times and
// require the observed violation rate to stay within sampling error of delta.
inline BoundCheckSummary empirical_bound_check(
    std::uint64_t task_seed, const std::function<BoundTrial(std::uint64_t)>& run_trial,
    const BoundCheckConfig& cfg) {
  if (cfg.trials < 20) {
    throw std::invalid_argument("empirical_bound_check: need at least 20 trials");
  }
  BoundCheckSummary s;
  s.trials = cfg.trials;
  for (int t = 0; t < cfg.trials; ++t) {
    const BoundTrial trial = run_trial(task_seed + static_cast<std::uint64_t>(t));
    GroupRiskProfile p;
    p.group_sizes = trial.group_sizes;
    p.empirical_risks = trial.empirical_risks;
    p.weights = cfg.weights;
    p.kl_qp = cfg.kl_qp;
    p.delta = cfg.delta;
    const double bound = pac_bayes_bound(p);
    if (trial.true_risks.size() != trial.group_sizes.size()) {
      throw std::invalid_argument("empirical_bound_check: trial field lengths disagree");
    }
    const double worst = *std::max_element(trial.true_risks.begin(), trial.true_risks.end());
    if (worst > bound) ++s.violations;
  }
  s.violation_rate = static_cast<double>(s.violations) / static_cast<double>(s.trials);
  s.threshold = cfg.delta + 3.0 * std::sqrt(cfg.delta * (1.0 - cfg.delta) /
                                            static_cast<double>(cfg.trials));
  s.pass = s.violation_rate <= s.threshold;
  return s;
}

}  // namespace evalign
