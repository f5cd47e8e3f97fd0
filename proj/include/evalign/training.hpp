#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evalign/data.hpp"
#include "evalign/eval.hpp"
#include "evalign/losses.hpp"
#include "evalign/model.hpp"
#include "evalign/rng.hpp"

namespace evalign {

// Which validation metric picks the final stage-2 epoch.
enum class SelectionStrategy { average_acc, worst_class_acc, worst_group_acc };

inline std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::average_acc: return "average_acc";
    case SelectionStrategy::worst_class_acc: return "worst_class_acc";
    default: return "worst_group_acc";
  }
}

inline SelectionStrategy selection_from_string(const std::string& s) {
  if (s == "average_acc") return SelectionStrategy::average_acc;
  if (s == "worst_class_acc") return SelectionStrategy::worst_class_acc;
  if (s == "worst_group_acc") return SelectionStrategy::worst_group_acc;
  throw std::invalid_argument("unknown selection strategy '" + s +
                              "' (average_acc, worst_class_acc, worst_group_acc)");
}

struct TrainConfig {
  int t1_epochs = 10;
  int t2_epochs = 20;
  double lr1 = 0.05;
  double lr2 = 0.05;
  AnnealSchedule anneal{10};       // eta; 0 disables the KL term
  double beta = 10.0;              // stage-2 proximal strength
  int batch_size = 128;
  std::uint64_t seed = 0;
  SelectionStrategy selection = SelectionStrategy::worst_class_acc;
  LossVariant loss_variant = LossVariant::log_expected;
  double calib_fraction = 0.5;     // share of the held-out split used for stage 2
  int hidden_width = 0;            // frozen random features; 0 = linear model
  Activation activation = Activation::softplus;
  double momentum = 0.0;
  bool class_balance = true;       // stage-2 class-balanced resampling
  bool include_calib_in_stage1 = false;
};

inline void validate(const TrainConfig& c) {
  if (c.t1_epochs < 1) throw std::invalid_argument("TrainConfig: t1_epochs must be >= 1");
  if (c.t2_epochs < 1) throw std::invalid_argument("TrainConfig: t2_epochs must be >= 1");
  if (!(c.lr1 > 0.0) || !(c.lr2 > 0.0)) {
    throw std::invalid_argument("TrainConfig: learning rates must be > 0");
  }
  validate(c.anneal);
  if (!(c.beta >= 0.0)) throw std::invalid_argument("TrainConfig: beta must be >= 0");
  if (c.batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(c.calib_fraction > 0.0) || !(c.calib_fraction < 1.0)) {
    throw std::invalid_argument("TrainConfig: calib_fraction must lie in (0, 1)");
  }
  if (c.hidden_width < 0) throw std::invalid_argument("TrainConfig: hidden_width must be >= 0");
  if (!(c.momentum >= 0.0) || c.momentum >= 1.0) {
    throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
  }
}

// Draws calibration batches. In class-balanced mode each draw picks a class
// uniformly and then a member of that class uniformly, with replacement;
// otherwise draws are uniform over the whole set.
class ClassBalancedSampler {
 public:
  ClassBalancedSampler(const std::vector<int>& labels, int num_classes, bool balanced,
                       std::uint64_t seed)
      : n_(labels.size()), balanced_(balanced), rng_(seed) {
    if (labels.empty()) throw std::invalid_argument("sampler: empty label set");
    if (num_classes < 2) throw std::invalid_argument("sampler: num_classes < 2");
    by_class_.resize(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes) {
        throw std::invalid_argument("sampler: label out of range");
      }
      by_class_[labels[i]].push_back(i);
    }
    if (balanced_) {
      for (int c = 0; c < num_classes; ++c) {
        if (by_class_[c].empty()) {
          throw std::invalid_argument("sampler: class " + std::to_string(c) +
                                      " has no samples; class balancing impossible");
        }
      }
    }
  }

  std::size_t draw() {
    if (!balanced_) return rng_.index(n_);
    const auto& members = by_class_[rng_.index(by_class_.size())];
    return members[rng_.index(members.size())];
  }

  std::vector<std::size_t> next_batch(int batch_size) {
    std::vector<std::size_t> out(batch_size);
    for (auto& i : out) i = draw();
    return out;
  }

 private:
  std::size_t n_;
  bool balanced_;
  Rng rng_;
  std::vector<std::vector<std::size_t>> by_class_;
};

namespace detail {

// Head inputs for a whole dataset. With a frozen hidden layer the transform
// is applied once here instead of per epoch.
struct FeatureCache {
  const Dataset* data = nullptr;
  std::vector<double> hidden;  // empty when the head is linear
  int din = 0;

  std::span<const double> row(std::size_t i) const {
    if (hidden.empty()) return data->row(i);
    return {hidden.data() + i * static_cast<std::size_t>(din), static_cast<std::size_t>(din)};
  }
};

inline FeatureCache cache_features(const EvidentialHead& h, const Dataset& d) {
  FeatureCache fc;
  fc.data = &d;
  fc.din = h.head_input_dim();
  if (h.hidden_width > 0) {
    fc.hidden.reserve(d.size() * static_cast<std::size_t>(fc.din));
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::vector<double> f = head_features(h, d.row(i));
      fc.hidden.insert(fc.hidden.end(), f.begin(), f.end());
    }
  }
  return fc;
}

// Loss and gradient of one stage-1 sample in a single pass over the head.
inline double stage1_sample(const EvidentialHead& h, std::span<const double> feats, int y,
                            double lambda_t, LossVariant variant, double scale, HeadGrad& g) {
  const std::vector<double> z = head_logits(h, feats);
  const int k = h.num_classes;
  DirichletParams p;
  p.alpha.resize(k);
  double s = 0.0;
  for (int c = 0; c < k; ++c) {
    p.alpha[c] = evidence_of(z[c], h.activation) + 1.0;
    s += p.alpha[c];
  }
  double loss;
  if (variant == LossVariant::log_expected) {
    loss = -std::log(p.alpha[y] / s);
  } else {
    loss = digamma(s) - digamma(p.alpha[y]);
  }
  if (lambda_t != 0.0) loss += lambda_t * kl_to_uniform(p);
  const std::vector<double> d_alpha = stage1_dalpha(p.alpha, y, lambda_t, variant);
  accumulate_head_grad(h, feats, z, d_alpha, scale, g);
  return loss;
}

// Weighted CE part of one stage-2 sample, single pass.
inline double stage2_sample(const EvidentialHead& h, std::span<const double> feats, int y,
                            double weight, double scale, HeadGrad& g) {
  const std::vector<double> z = head_logits(h, feats);
  const int k = h.num_classes;
  std::vector<double> alpha(k);
  double s = 0.0;
  for (int c = 0; c < k; ++c) {
    alpha[c] = evidence_of(z[c], h.activation) + 1.0;
    s += alpha[c];
  }
  const std::vector<double> d_alpha = stage2_dalpha(alpha, y);
  accumulate_head_grad(h, feats, z, d_alpha, scale * weight, g);
  return weight * -std::log(alpha[y] / s);
}

struct SgdState {
  std::vector<double> vw, vb;
};

inline void sgd_step(EvidentialHead& h, const HeadGrad& g, double lr, double momentum,
                     SgdState& st) {
  if (st.vw.empty()) {
    st.vw.assign(h.weights.size(), 0.0);
    st.vb.assign(h.bias.size(), 0.0);
  }
  for (std::size_t i = 0; i < h.weights.size(); ++i) {
    st.vw[i] = momentum * st.vw[i] + g.weights[i];
    h.weights[i] -= lr * st.vw[i];
  }
  for (std::size_t i = 0; i < h.bias.size(); ++i) {
    st.vb[i] = momentum * st.vb[i] + g.bias[i];
    h.bias[i] -= lr * st.vb[i];
  }
}

}  // namespace detail

struct Stage1Result {
  EvidentialHead head;
  std::vector<double> loss_trace;  // mean sample loss per epoch
};

// First stage: fit the evidential head by SGD on the annealed objective.
// Single-threaded and fully determined by cfg.seed.
inline Stage1Result run_stage1(const Dataset& train, const TrainConfig& cfg) {
  validate(train);
  validate(cfg);
  EvidentialHead head = make_head(train.feature_dim, train.num_classes, cfg.activation,
                                  cfg.hidden_width, mix_seed(cfg.seed, rng_stream::kHeadInit));
  const detail::FeatureCache feats = detail::cache_features(head, train);
  Rng shuffle_rng(mix_seed(cfg.seed, rng_stream::kStage1Shuffle));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  detail::SgdState sgd;
  Stage1Result res;
  HeadGrad g;
  for (int epoch = 1; epoch <= cfg.t1_epochs; ++epoch) {
    const double lambda = lambda_at(cfg.anneal, epoch);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      g.weights.assign(head.weights.size(), 0.0);
      g.bias.assign(head.bias.size(), 0.0);
      for (std::size_t j = start; j < stop; ++j) {
        const std::size_t i = order[j];
        epoch_loss += detail::stage1_sample(head, feats.row(i), train.labels[i], lambda,
                                            cfg.loss_variant, scale, g);
      }
      detail::sgd_step(head, g, cfg.lr1, cfg.momentum, sgd);
    }
    res.loss_trace.push_back(epoch_loss / static_cast<double>(train.size()));
  }
  res.head = std::move(head);
  return res;
}

// Stage-1 verdict on one calibration sample.
struct CalibScore {
  int predicted = 0;
  double uncertainty = 0.0;
  double weight = 0.0;
};

inline std::vector<CalibScore> score_calibration(const EvidentialHead& theta1,
                                                 const Dataset& calib) {
  validate(calib);
  if (theta1.feature_dim != calib.feature_dim || theta1.num_classes != calib.num_classes) {
    throw std::invalid_argument("score_calibration: head/dataset shape mismatch");
  }
  std::vector<CalibScore> out;
  out.reserve(calib.size());
  for (std::size_t i = 0; i < calib.size(); ++i) {
    const DirichletOutput o = forward(theta1, calib.row(i));
    CalibScore s;
    s.predicted = o.predicted_class;
    s.uncertainty = o.uncertainty;
    s.weight = calib_weight(o.predicted_class, calib.labels[i], o.uncertainty);
    out.push_back(s);
  }
  return out;
}

struct Stage2Result {
  EvidentialHead head;                    // model after the last epoch
  std::vector<double> loss_trace;         // mean batch objective per epoch
  std::vector<EvidentialHead> epoch_heads;  // snapshot after every epoch
};

// Second stage: retrain the head on the calibration set with the frozen
// uncertainty weights and the proximal pull toward theta1.
inline Stage2Result run_stage2(const EvidentialHead& theta1, const Dataset& calib,
                               const std::vector<CalibScore>& scores, const TrainConfig& cfg) {
  validate(theta1);
  validate(calib);
  validate(cfg);
  if (scores.size() != calib.size()) {
    throw std::invalid_argument("run_stage2: scores/calibration size mismatch");
  }
  if (theta1.feature_dim != calib.feature_dim || theta1.num_classes != calib.num_classes) {
    throw std::invalid_argument("run_stage2: head/dataset shape mismatch");
  }
  EvidentialHead theta2 = theta1;
  const detail::FeatureCache feats = detail::cache_features(theta2, calib);
  ClassBalancedSampler sampler(calib.labels, calib.num_classes, cfg.class_balance,
                               mix_seed(cfg.seed, rng_stream::kStage2Sampler));
  const std::size_t batches_per_epoch =
      (calib.size() + cfg.batch_size - 1) / static_cast<std::size_t>(cfg.batch_size);
  detail::SgdState sgd;
  Stage2Result res;
  HeadGrad g;
  for (int epoch = 1; epoch <= cfg.t2_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::vector<std::size_t> batch = sampler.next_batch(cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(batch.size());
      g.weights.assign(theta2.weights.size(), 0.0);
      g.bias.assign(theta2.bias.size(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i : batch) {
        batch_loss += detail::stage2_sample(theta2, feats.row(i), calib.labels[i],
                                            scores[i].weight, scale, g);
      }
      batch_loss = batch_loss * scale + cfg.beta * param_distance_sq(theta2, theta1);
      detail::sgd_step(theta2, g, cfg.lr2, cfg.momentum, sgd);
      if (cfg.beta != 0.0) {
        // Proximal step for the quadratic pull toward theta1: exact minimizer
        // of beta*||theta - theta1||^2 + ||theta - theta_half||^2 / (2 lr).
        // Shares the stationary points of the full objective but stays stable
        // for arbitrarily large beta, where an explicit gradient step on the
        // penalty oscillates once 2*lr*beta exceeds 2.
        const double shrink = 1.0 / (1.0 + 2.0 * cfg.lr2 * cfg.beta);
        for (std::size_t i = 0; i < theta2.weights.size(); ++i) {
          theta2.weights[i] = theta1.weights[i] + shrink * (theta2.weights[i] - theta1.weights[i]);
        }
        for (std::size_t i = 0; i < theta2.bias.size(); ++i) {
          theta2.bias[i] = theta1.bias[i] + shrink * (theta2.bias[i] - theta1.bias[i]);
        }
      }
      epoch_loss += batch_loss;
    }
    res.loss_trace.push_back(epoch_loss / static_cast<double>(batches_per_epoch));
    res.epoch_heads.push_back(theta2);
  }
  res.head = std::move(theta2);
  return res;
}

// Picks the candidate with the best validation metric; earliest index wins
// ties, so longer training never wins without strict improvement.
inline std::size_t select_model(const std::vector<GroupMetrics>& candidates,
                                SelectionStrategy strategy) {
  if (candidates.empty()) throw std::invalid_argument("select_model: no candidates");
  auto score = [&](const GroupMetrics& m) {
    switch (strategy) {
      case SelectionStrategy::average_acc: return m.average_acc;
      case SelectionStrategy::worst_class_acc: return m.worst_class_acc;
      default:
        if (!m.has_group_metrics) {
          throw std::invalid_argument(
              "select_model: worst_group_acc selection needs attribute annotations");
        }
        return m.worst_group_acc;
    }
  };
  std::size_t best = 0;
  double best_score = score(candidates[0]);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = score(candidates[i]);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

struct PipelineData {
  Dataset train;
  Dataset heldout;  // split into calibration and selection parts
  Dataset test;
};

struct PipelineResult {
  Stage1Result stage1;
  std::vector<CalibScore> scores;
  Stage2Result stage2;
  std::vector<GroupMetrics> candidate_metrics;  // stage-2 epochs on the selection split
  std::size_t selected_epoch = 0;               // index into stage2.epoch_heads
  bool ran_stage2 = false;
  EvidentialHead selected;
  GroupMetrics erm_metrics;    // stage-1 model on the test split
  GroupMetrics final_metrics;  // selected model on the test split
};

// Full two-stage procedure. erm_only stops after stage 1 and reports the
// stage-1 model as final.
inline PipelineResult run_pipeline(const PipelineData& data, const TrainConfig& cfg,
                                   bool erm_only = false) {
  validate(cfg);
  validate(data.train);
  validate(data.heldout);
  validate(data.test);
  if (data.train.feature_dim != data.heldout.feature_dim ||
      data.train.feature_dim != data.test.feature_dim ||
      data.train.num_classes != data.heldout.num_classes ||
      data.train.num_classes != data.test.num_classes) {
    throw std::invalid_argument("run_pipeline: splits disagree on dimensions");
  }
  auto [calib, selection] = split_calibration(data.heldout, cfg.calib_fraction, cfg.seed);

  PipelineResult res;
  if (cfg.include_calib_in_stage1) {
    res.stage1 = run_stage1(concat(data.train, calib), cfg);
  } else {
    res.stage1 = run_stage1(data.train, cfg);
  }
  res.erm_metrics = evaluate(res.stage1.head, data.test);
  if (erm_only) {
    res.selected = res.stage1.head;
    res.final_metrics = res.erm_metrics;
    return res;
  }

  res.scores = score_calibration(res.stage1.head, calib);
  res.stage2 = run_stage2(res.stage1.head, calib, res.scores, cfg);
  res.ran_stage2 = true;
  res.candidate_metrics.reserve(res.stage2.epoch_heads.size());
  for (const EvidentialHead& h : res.stage2.epoch_heads) {
    res.candidate_metrics.push_back(evaluate(h, selection));
  }
  res.selected_epoch = select_model(res.candidate_metrics, cfg.selection);
  res.selected = res.stage2.epoch_heads[res.selected_epoch];
  res.final_metrics = evaluate(res.selected, data.test);
  return res;
}

}  // namespace evalign
