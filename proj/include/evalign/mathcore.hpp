#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace evalign {

inline constexpr double kPi = 3.141592653589793238462643383279;

// Concentration parameters of a Dirichlet posterior. Training code only ever
// produces alpha_k = evidence_k + 1 >= 1, and every routine here assumes that.
struct DirichletParams {
  std::vector<double> alpha;

  std::size_t num_classes() const { return alpha.size(); }

  double strength() const {
    double s = 0.0;
    for (double a : alpha) s += a;
    return s;
  }
};

inline void validate(const DirichletParams& p) {
  if (p.alpha.size() < 2) {
    throw std::invalid_argument("DirichletParams: need at least 2 classes, got " +
                                std::to_string(p.alpha.size()));
  }
  for (std::size_t k = 0; k < p.alpha.size(); ++k) {
    const double a = p.alpha[k];
    if (!std::isfinite(a) || a < 1.0) {
      throw std::invalid_argument("DirichletParams: alpha[" + std::to_string(k) +
                                  "] = " + std::to_string(a) + ", must be finite and >= 1");
    }
  }
}

// Log gamma via the Lanczos approximation (g = 7, 9 coefficients), with the
// reflection formula below 0.5. Positive arguments only.
inline double lgamma(double z) {
  if (!std::isfinite(z) || z <= 0.0) {
    throw std::domain_error("lgamma: argument must be positive and finite, got " +
                            std::to_string(z));
  }
  static constexpr double kG = 7.0;
  static constexpr double kCoef[9] = {
      0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
      771.32342877765313,      -176.61502916214059,   12.507343278686905,
      -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};
  if (z < 0.5) {
    return std::log(kPi / std::sin(kPi * z)) - lgamma(1.0 - z);
  }
  const double zm1 = z - 1.0;
  double x = kCoef[0];
  for (int i = 1; i < 9; ++i) x += kCoef[i] / (zm1 + i);
  const double t = zm1 + kG + 0.5;
  return 0.5 * std::log(2.0 * kPi) + (zm1 + 0.5) * std::log(t) - t + std::log(x);
}

// Digamma: shift the argument above 6 with psi(z) = psi(z+1) - 1/z, then use
// the asymptotic expansion through the 1/z^12 term.
inline double digamma(double z) {
  if (!std::isfinite(z) || z <= 0.0) {
    throw std::domain_error("digamma: argument must be positive and finite, got " +
                            std::to_string(z));
  }
  double shift = 0.0;
  while (z < 8.0) {
    shift -= 1.0 / z;
    z += 1.0;
  }
  const double inv = 1.0 / z;
  const double inv2 = inv * inv;
  const double tail =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 -
                                      inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
  return shift + std::log(z) - 0.5 * inv - tail;
}

// Trigamma, same scheme: recurrence psi1(z) = psi1(z+1) + 1/z^2, then the
// asymptotic expansion. Needed for the regularizer gradient.
inline double trigamma(double z) {
  if (!std::isfinite(z) || z <= 0.0) {
    throw std::domain_error("trigamma: argument must be positive and finite, got " +
                            std::to_string(z));
  }
  double shift = 0.0;
  while (z < 8.0) {
    shift += 1.0 / (z * z);
    z += 1.0;
  }
  const double inv = 1.0 / z;
  const double inv2 = inv * inv;
  const double tail =
      inv * (1.0 +
             inv * (0.5 +
                    inv * (1.0 / 6.0 -
                           inv2 * (1.0 / 30.0 -
                                   inv2 * (1.0 / 42.0 -
                                           inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))))));
  return shift + tail;
}

// log B(alpha) = sum_k lgamma(alpha_k) - lgamma(sum_k alpha_k).
inline double log_beta(const DirichletParams& p) {
  validate(p);
  double s = 0.0;
  double acc = 0.0;
  for (double a : p.alpha) {
    acc += lgamma(a);
    s += a;
  }
  return acc - lgamma(s);
}

// KL(Dir(alpha) || Dir(1)). Nonnegative for alpha >= 1; rounding can leave a
// tiny negative residual near alpha = 1, which is clamped to zero.
inline double kl_to_uniform(const DirichletParams& p) {
  validate(p);
  const std::size_t k = p.alpha.size();
  // KL is zero exactly at the uniform parameters; skip the float noise.
  bool uniform = true;
  for (double a : p.alpha) uniform = uniform && a == 1.0;
  if (uniform) return 0.0;
  const double s = p.strength();
  const double psi_s = digamma(s);
  double kl = -lgamma(static_cast<double>(k)) - log_beta(p);
  for (double a : p.alpha) {
    kl += (a - 1.0) * (digamma(a) - psi_s);
  }
  if (kl < 0.0 && kl >= -1e-12) kl = 0.0;
  return kl;
}

// Posterior mean probabilities alpha_k / S.
inline std::vector<double> expected_probs(const DirichletParams& p) {
  validate(p);
  const double s = p.strength();
  std::vector<double> out(p.alpha.size());
  for (std::size_t k = 0; k < p.alpha.size(); ++k) out[k] = p.alpha[k] / s;
  return out;
}

// Epistemic uncertainty u = K / S, in (0, 1].
inline double uncertainty(const DirichletParams& p) {
  validate(p);
  return static_cast<double>(p.alpha.size()) / p.strength();
}

}  // namespace evalign
