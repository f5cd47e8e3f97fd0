#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evalign/mathcore.hpp"
#include "evalign/model.hpp"
#include "evalign/rng.hpp"

namespace evalign {

// Annealing of the KL coefficient: lambda_t = min(t / eta, 1) with epochs
// counted from 1. eta = 0 switches the regularizer off entirely.
struct AnnealSchedule {
  int eta = 10;
};

inline void validate(const AnnealSchedule& s) {
  if (s.eta < 0) throw std::invalid_argument("AnnealSchedule: eta must be >= 0");
}

inline double lambda_at(const AnnealSchedule& s, int epoch) {
  validate(s);
  if (epoch < 1) throw std::invalid_argument("lambda_at: epochs are counted from 1");
  if (s.eta == 0) return 0.0;
  return std::min(static_cast<double>(epoch) / static_cast<double>(s.eta), 1.0);
}

// Stage-1 objective for one sample. log_expected is the Bayes-risk form
// -log(alpha_y / S); expected_nll is the evidence-averaged cross entropy
// psi(S) - psi(alpha_y). Both get lambda_t * KL(Dir(alpha) || Dir(1)).
inline double loss_stage1(const DirichletOutput& out, int y, double lambda_t,
                          LossVariant variant = LossVariant::log_expected) {
  const int k = static_cast<int>(out.params.alpha.size());
  if (y < 0 || y >= k) throw std::invalid_argument("loss_stage1: label out of range");
  if (!(lambda_t >= 0.0)) throw std::invalid_argument("loss_stage1: lambda_t must be >= 0");
  validate(out.params);
  const double s = out.params.strength();
  double data_term;
  if (variant == LossVariant::log_expected) {
    data_term = -std::log(out.params.alpha[y] / s);
  } else {
    data_term = digamma(s) - digamma(out.params.alpha[y]);
  }
  if (lambda_t == 0.0) return data_term;
  return data_term + lambda_t * kl_to_uniform(out.params);
}

// Evidential calibration weight: correct predictions keep weight 1, mistakes
// are weighted by the epistemic uncertainty of the stage-1 model.
inline double calib_weight(int predicted, int y, double u) {
  if (!(u > 0.0) || u > 1.0) {
    throw std::invalid_argument("calib_weight: uncertainty must lie in (0, 1], got " +
                                std::to_string(u));
  }
  return predicted == y ? 1.0 : u;
}

// One calibration sample as seen by the stage-2 objective.
struct WeightedExample {
  std::span<const double> x;
  int y = 0;
  double weight = 1.0;
};

// Stage-2 objective over a batch: mean weighted CE on expected probabilities
// plus the proximal penalty beta * ||theta2 - theta1||^2.
inline double loss_stage2(const EvidentialHead& theta2, const EvidentialHead& theta1,
                          std::span<const WeightedExample> batch, double beta) {
  if (batch.empty()) throw std::invalid_argument("loss_stage2: empty batch");
  if (!(beta >= 0.0)) throw std::invalid_argument("loss_stage2: beta must be >= 0");
  double acc = 0.0;
  for (const WeightedExample& ex : batch) {
    if (!(ex.weight >= 0.0)) throw std::invalid_argument("loss_stage2: negative weight");
    const DirichletOutput out = forward(theta2, ex.x);
    if (ex.y < 0 || ex.y >= theta2.num_classes) {
      throw std::invalid_argument("loss_stage2: label out of range");
    }
    acc += ex.weight * -std::log(out.expected[ex.y]);
  }
  return acc / static_cast<double>(batch.size()) + beta * param_distance_sq(theta2, theta1);
}

struct ElboGap {
  double gap = 0.0;      // loss minus the true negative log marginal
  double mc_se = 0.0;    // standard error of the Monte Carlo reference
  std::uint64_t draws = 0;
};

// Checks the variational property of the expected_nll objective at lambda = 1:
// the loss upper-bounds -log p(y) under the uniform Dirichlet prior, whose
// Monte Carlo estimate (with its SE) serves as the reference.
inline ElboGap elbo_gap_check(const DirichletOutput& out, int y,
                              std::uint64_t draws = 200000, std::uint64_t seed = 12345) {
  const int k = static_cast<int>(out.params.alpha.size());
  if (y < 0 || y >= k) throw std::invalid_argument("elbo_gap_check: label out of range");
  if (draws < 1000) throw std::invalid_argument("elbo_gap_check: too few draws");
  const double loss = loss_stage1(out, y, 1.0, LossVariant::expected_nll);
  // pi ~ Dir(1) sampled as normalized exponentials.
  Rng rng(seed);
  double sum = 0.0, sumsq = 0.0;
  for (std::uint64_t i = 0; i < draws; ++i) {
    double total = 0.0;
    double want = 0.0;
    for (int c = 0; c < k; ++c) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      const double e = -std::log(u);
      total += e;
      if (c == y) want = e;
    }
    const double p = want / total;
    sum += p;
    sumsq += p * p;
  }
  const double n = static_cast<double>(draws);
  const double mean = sum / n;
  const double var = (sumsq - n * mean * mean) / (n - 1.0);
  const double se_mean = std::sqrt(var / n);
  ElboGap g;
  g.draws = draws;
  g.gap = loss - (-std::log(mean));
  g.mc_se = se_mean / mean;  // delta method for -log(mean)
  return g;
}

}  // namespace evalign
