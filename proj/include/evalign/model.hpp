#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evalign/mathcore.hpp"
#include "evalign/rng.hpp"

namespace evalign {

// Evidence activation applied to the head logits.
enum class Activation { softplus, exp_clamped };

inline std::string to_string(Activation a) {
  return a == Activation::softplus ? "softplus" : "exp_clamped";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "softplus") return Activation::softplus;
  if (s == "exp_clamped") return Activation::exp_clamped;
  throw std::invalid_argument("unknown activation '" + s + "' (softplus, exp_clamped)");
}

// Which first-stage objective the gradients follow.
enum class LossVariant { log_expected, expected_nll };

inline std::string to_string(LossVariant v) {
  return v == LossVariant::log_expected ? "log_expected" : "expected_nll";
}

inline LossVariant loss_variant_from_string(const std::string& s) {
  if (s == "log_expected") return LossVariant::log_expected;
  if (s == "expected_nll") return LossVariant::expected_nll;
  throw std::invalid_argument("unknown loss variant '" + s +
                              "' (log_expected, expected_nll)");
}

// Evidential classifier: an optional frozen random tanh layer followed by a
// trained linear head whose activated outputs are the per-class evidence.
// Only weights and bias are updated by training.
struct EvidentialHead {
  int feature_dim = 0;
  int num_classes = 0;
  Activation activation = Activation::softplus;
  int hidden_width = 0;              // 0 = head acts on raw features
  std::vector<double> hidden_w;      // hidden_width x feature_dim, row-major, frozen
  std::vector<double> hidden_b;      // hidden_width, frozen
  std::vector<double> weights;       // num_classes x head_input_dim, row-major
  std::vector<double> bias;          // num_classes

  int head_input_dim() const { return hidden_width > 0 ? hidden_width : feature_dim; }
  std::size_t num_trained_params() const { return weights.size() + bias.size(); }
};

inline void validate(const EvidentialHead& h) {
  if (h.feature_dim < 1 || h.num_classes < 2) {
    throw std::invalid_argument("EvidentialHead: need feature_dim >= 1 and num_classes >= 2");
  }
  if (h.hidden_width < 0) throw std::invalid_argument("EvidentialHead: hidden_width < 0");
  const std::size_t din = static_cast<std::size_t>(h.head_input_dim());
  if (h.weights.size() != static_cast<std::size_t>(h.num_classes) * din ||
      h.bias.size() != static_cast<std::size_t>(h.num_classes)) {
    throw std::invalid_argument("EvidentialHead: weight/bias shapes do not match dims");
  }
  if (h.hidden_width > 0 &&
      (h.hidden_w.size() != static_cast<std::size_t>(h.hidden_width) * h.feature_dim ||
       h.hidden_b.size() != static_cast<std::size_t>(h.hidden_width))) {
    throw std::invalid_argument("EvidentialHead: hidden layer shapes do not match dims");
  }
}

// Uniform fan-in init for the trained head, zero bias. The hidden layer, when
// present, is drawn once here and never updated again.
inline EvidentialHead make_head(int feature_dim, int num_classes, Activation activation,
                                int hidden_width, std::uint64_t seed) {
  if (feature_dim < 1 || num_classes < 2 || hidden_width < 0) {
    throw std::invalid_argument("make_head: bad dimensions");
  }
  EvidentialHead h;
  h.feature_dim = feature_dim;
  h.num_classes = num_classes;
  h.activation = activation;
  h.hidden_width = hidden_width;
  Rng rng(seed);
  if (hidden_width > 0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    h.hidden_w.resize(static_cast<std::size_t>(hidden_width) * feature_dim);
    for (double& w : h.hidden_w) w = rng.uniform(-bound, bound);
    h.hidden_b.assign(hidden_width, 0.0);
  }
  const int din = h.head_input_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(din));
  h.weights.resize(static_cast<std::size_t>(num_classes) * din);
  for (double& w : h.weights) w = rng.uniform(-bound, bound);
  h.bias.assign(num_classes, 0.0);
  return h;
}

namespace detail {

inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  return z > 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline constexpr double kExpClampLogit = 10.0;

inline double evidence_of(double z, Activation a) {
  if (a == Activation::softplus) return softplus(z);
  return std::exp(std::min(z, kExpClampLogit));
}

inline double evidence_slope(double z, Activation a) {
  if (a == Activation::softplus) return sigmoid(z);
  return z < kExpClampLogit ? std::exp(z) : 0.0;
}

inline void check_input(const EvidentialHead& h, std::span<const double> x) {
  validate(h);
  if (x.size() != static_cast<std::size_t>(h.feature_dim)) {
    throw std::invalid_argument("forward: expected " + std::to_string(h.feature_dim) +
                                " features, got " + std::to_string(x.size()));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("forward: non-finite feature");
  }
}

}  // namespace detail

// Frozen hidden transform; identity when no hidden layer is configured.
inline std::vector<double> head_features(const EvidentialHead& h, std::span<const double> x) {
  detail::check_input(h, x);
  if (h.hidden_width == 0) return std::vector<double>(x.begin(), x.end());
  std::vector<double> f(h.hidden_width);
  for (int j = 0; j < h.hidden_width; ++j) {
    double z = h.hidden_b[j];
    const double* row = h.hidden_w.data() + static_cast<std::size_t>(j) * h.feature_dim;
    for (int i = 0; i < h.feature_dim; ++i) z += row[i] * x[i];
    f[j] = std::tanh(z);
  }
  return f;
}

struct DirichletOutput {
  std::vector<double> evidence;
  DirichletParams params;
  std::vector<double> expected;   // params.alpha / strength
  double uncertainty = 0.0;       // K / strength
  int predicted_class = 0;        // argmax expected, earliest index on ties
};

namespace detail {

// Head logits -> full evidential output. `feats` is the head input, i.e.
// already past the hidden layer when one exists.
inline DirichletOutput forward_from_features(const EvidentialHead& h,
                                             std::span<const double> feats) {
  const int k = h.num_classes;
  const int din = h.head_input_dim();
  DirichletOutput out;
  out.evidence.resize(k);
  out.params.alpha.resize(k);
  double s = 0.0;
  for (int c = 0; c < k; ++c) {
    double z = h.bias[c];
    const double* row = h.weights.data() + static_cast<std::size_t>(c) * din;
    for (int i = 0; i < din; ++i) z += row[i] * feats[i];
    out.evidence[c] = evidence_of(z, h.activation);
    out.params.alpha[c] = out.evidence[c] + 1.0;
    s += out.params.alpha[c];
  }
  out.expected.resize(k);
  int best = 0;
  for (int c = 0; c < k; ++c) {
    out.expected[c] = out.params.alpha[c] / s;
    if (out.expected[c] > out.expected[best]) best = c;
  }
  out.predicted_class = best;
  out.uncertainty = static_cast<double>(k) / s;
  return out;
}

}  // namespace detail

inline DirichletOutput forward(const EvidentialHead& h, std::span<const double> x) {
  if (h.hidden_width == 0) {
    detail::check_input(h, x);
    return detail::forward_from_features(h, x);
  }
  const std::vector<double> f = head_features(h, x);
  return detail::forward_from_features(h, f);
}

// Gradient of the trained parameters only; shapes mirror weights/bias.
struct HeadGrad {
  std::vector<double> weights;
  std::vector<double> bias;
};

namespace detail {

// Shared single-sample backward pass. d_alpha holds dL/d alpha_k; the chain
// through the activation and the linear head is identical for both stages.
inline void accumulate_head_grad(const EvidentialHead& h, std::span<const double> feats,
                                 const std::vector<double>& z, const std::vector<double>& d_alpha,
                                 double scale, HeadGrad& g) {
  const int k = h.num_classes;
  const int din = h.head_input_dim();
  for (int c = 0; c < k; ++c) {
    const double gz = scale * d_alpha[c] * evidence_slope(z[c], h.activation);
    if (gz == 0.0) continue;
    double* row = g.weights.data() + static_cast<std::size_t>(c) * din;
    for (int i = 0; i < din; ++i) row[i] += gz * feats[i];
    g.bias[c] += gz;
  }
}

inline std::vector<double> head_logits(const EvidentialHead& h, std::span<const double> feats) {
  const int k = h.num_classes;
  const int din = h.head_input_dim();
  std::vector<double> z(k);
  for (int c = 0; c < k; ++c) {
    double acc = h.bias[c];
    const double* row = h.weights.data() + static_cast<std::size_t>(c) * din;
    for (int i = 0; i < din; ++i) acc += row[i] * feats[i];
    z[c] = acc;
  }
  return z;
}

// dL1/d alpha for one sample: classification term plus lambda * KL term.
inline std::vector<double> stage1_dalpha(const std::vector<double>& alpha, int y,
                                         double lambda_t, LossVariant variant) {
  const int k = static_cast<int>(alpha.size());
  double s = 0.0;
  for (double a : alpha) s += a;
  std::vector<double> d(k);
  if (variant == LossVariant::log_expected) {
    for (int c = 0; c < k; ++c) d[c] = 1.0 / s;
    d[y] -= 1.0 / alpha[y];
  } else {
    const double ts = trigamma(s);
    for (int c = 0; c < k; ++c) d[c] = ts;
    d[y] -= trigamma(alpha[y]);
  }
  if (lambda_t != 0.0) {
    const double ts = trigamma(s);
    const double tail = (s - static_cast<double>(k)) * ts;
    for (int c = 0; c < k; ++c) {
      d[c] += lambda_t * ((alpha[c] - 1.0) * trigamma(alpha[c]) - tail);
    }
  }
  return d;
}

// d/d alpha of -log(alpha_y / S), the weighted stage-2 data term.
inline std::vector<double> stage2_dalpha(const std::vector<double>& alpha, int y) {
  const int k = static_cast<int>(alpha.size());
  double s = 0.0;
  for (double a : alpha) s += a;
  std::vector<double> d(k);
  for (int c = 0; c < k; ++c) d[c] = 1.0 / s;
  d[y] -= 1.0 / alpha[y];
  return d;
}

inline void check_label(const EvidentialHead& h, int y) {
  if (y < 0 || y >= h.num_classes) {
    throw std::invalid_argument("label " + std::to_string(y) + " out of range [0, " +
                                std::to_string(h.num_classes) + ")");
  }
}

}  // namespace detail

// Analytic gradient of the stage-1 objective for one sample.
inline HeadGrad grad_stage1(const EvidentialHead& h, std::span<const double> x, int y,
                            double lambda_t,
                            LossVariant variant = LossVariant::log_expected) {
  detail::check_input(h, x);
  detail::check_label(h, y);
  if (!(lambda_t >= 0.0)) throw std::invalid_argument("grad_stage1: lambda_t must be >= 0");
  const std::vector<double> feats_store =
      h.hidden_width > 0 ? head_features(h, x) : std::vector<double>();
  const std::span<const double> feats =
      h.hidden_width > 0 ? std::span<const double>(feats_store) : x;
  const std::vector<double> z = detail::head_logits(h, feats);
  std::vector<double> alpha(h.num_classes);
  for (int c = 0; c < h.num_classes; ++c) alpha[c] = detail::evidence_of(z[c], h.activation) + 1.0;
  const std::vector<double> d_alpha = detail::stage1_dalpha(alpha, y, lambda_t, variant);
  HeadGrad g;
  g.weights.assign(h.weights.size(), 0.0);
  g.bias.assign(h.bias.size(), 0.0);
  detail::accumulate_head_grad(h, feats, z, d_alpha, 1.0, g);
  return g;
}

// Analytic gradient of the stage-2 objective for one weighted sample:
// weight * CE on expected probs, plus the proximal pull toward theta1.
inline HeadGrad grad_stage2(const EvidentialHead& h, std::span<const double> x, int y,
                            double weight, const EvidentialHead& theta1, double beta) {
  detail::check_input(h, x);
  detail::check_label(h, y);
  if (!(weight >= 0.0)) throw std::invalid_argument("grad_stage2: weight must be >= 0");
  if (!(beta >= 0.0)) throw std::invalid_argument("grad_stage2: beta must be >= 0");
  if (theta1.weights.size() != h.weights.size() || theta1.bias.size() != h.bias.size()) {
    throw std::invalid_argument("grad_stage2: theta1 shape mismatch");
  }
  const std::vector<double> feats_store =
      h.hidden_width > 0 ? head_features(h, x) : std::vector<double>();
  const std::span<const double> feats =
      h.hidden_width > 0 ? std::span<const double>(feats_store) : x;
  const std::vector<double> z = detail::head_logits(h, feats);
  std::vector<double> alpha(h.num_classes);
  for (int c = 0; c < h.num_classes; ++c) alpha[c] = detail::evidence_of(z[c], h.activation) + 1.0;
  const std::vector<double> d_alpha = detail::stage2_dalpha(alpha, y);
  HeadGrad g;
  g.weights.assign(h.weights.size(), 0.0);
  g.bias.assign(h.bias.size(), 0.0);
  detail::accumulate_head_grad(h, feats, z, d_alpha, weight, g);
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    g.weights[i] += 2.0 * beta * (h.weights[i] - theta1.weights[i]);
  }
  for (std::size_t i = 0; i < g.bias.size(); ++i) {
    g.bias[i] += 2.0 * beta * (h.bias[i] - theta1.bias[i]);
  }
  return g;
}

// Squared L2 distance between the trained parameters of two heads.
inline double param_distance_sq(const EvidentialHead& a, const EvidentialHead& b) {
  if (a.weights.size() != b.weights.size() || a.bias.size() != b.bias.size()) {
    throw std::invalid_argument("param_distance_sq: shape mismatch");
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    const double t = a.weights[i] - b.weights[i];
    d += t * t;
  }
  for (std::size_t i = 0; i < a.bias.size(); ++i) {
    const double t = a.bias[i] - b.bias[i];
    d += t * t;
  }
  return d;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_block(std::ostream& os, const std::string& name,
                        const std::vector<double>& vals, std::size_t per_line) {
  os << name << ' ' << vals.size() << '\n';
  for (std::size_t i = 0; i < vals.size(); ++i) {
    os << format_double(vals[i]);
    os << (((i + 1) % per_line == 0 || i + 1 == vals.size()) ? '\n' : ' ');
  }
}

inline std::vector<double> read_block(std::istream& is, const std::string& name,
                                      const std::string& path) {
  std::string label;
  std::size_t n = 0;
  if (!(is >> label >> n) || label != name) {
    throw std::runtime_error(path + ": expected block '" + name + "'");
  }
  std::vector<double> vals(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(is >> vals[i])) {
      throw std::runtime_error(path + ": truncated block '" + name + "'");
    }
  }
  return vals;
}

}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

// Text checkpoint. %.17g round-trips doubles exactly, so save followed by
// load reproduces the head bit for bit.
inline void save_checkpoint(const EvidentialHead& h, const std::string& path) {
  validate(h);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os << "evalign-head " << kCheckpointVersion << '\n';
  os << "activation " << to_string(h.activation) << '\n';
  os << "dims " << h.feature_dim << ' ' << h.num_classes << ' ' << h.hidden_width << '\n';
  if (h.hidden_width > 0) {
    detail::write_block(os, "hidden_w", h.hidden_w, static_cast<std::size_t>(h.feature_dim));
    detail::write_block(os, "hidden_b", h.hidden_b, h.hidden_b.size());
  }
  detail::write_block(os, "weights", h.weights,
                      static_cast<std::size_t>(h.head_input_dim()));
  detail::write_block(os, "bias", h.bias, h.bias.size());
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline EvidentialHead load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "evalign-head") {
    throw std::runtime_error(path + ": not an evalign checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  }
  EvidentialHead h;
  std::string label, act;
  if (!(is >> label >> act) || label != "activation") {
    throw std::runtime_error(path + ": missing activation");
  }
  h.activation = activation_from_string(act);
  if (!(is >> label >> h.feature_dim >> h.num_classes >> h.hidden_width) || label != "dims") {
    throw std::runtime_error(path + ": missing dims");
  }
  if (h.hidden_width > 0) {
    h.hidden_w = detail::read_block(is, "hidden_w", path);
    h.hidden_b = detail::read_block(is, "hidden_b", path);
  }
  h.weights = detail::read_block(is, "weights", path);
  h.bias = detail::read_block(is, "bias", path);
  validate(h);
  return h;
}

}  // namespace evalign
