#pragma once

// Supervised fine-tuning of LoRA adapters: AdamW with decoupled weight decay,
// linear warmup into cosine decay, global-norm clipping and gradient
// accumulation. Everything except the adapters stays frozen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tslam/error.hpp"
#include "tslam/model.hpp"
#include "tslam/tensor.hpp"
#include "tslam/tokenizer.hpp"

namespace tslam {

struct OptimizerConfig {
  double peak_lr = 2e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_frac = 0.10;
  int micro_batch = 8;
  int grad_accum = 4;
  double max_grad_norm = 1.0;
  int epochs = 1;
  std::uint64_t seed = 0;

  int effective_batch() const { return micro_batch * grad_accum; }

  void validate() const {
    if (!(peak_lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("learning rate and decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
      throw ConfigError("invalid AdamW constants");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in [0, 1)");
    if (micro_batch < 1 || grad_accum < 1) throw ConfigError("batch sizes must be positive");
    if (!(max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
  }
};

inline std::size_t warmup_steps(std::size_t total_steps, const OptimizerConfig& cfg) {
  return static_cast<std::size_t>(std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
}

/// Linear 0 -> peak over the first ceil(warmup_frac * total) steps, then
/// cosine peak -> 0 at `total_steps`.
inline double lr_at_step(std::size_t step, std::size_t total_steps, const OptimizerConfig& cfg) {
  if (total_steps == 0) throw ConfigError("total_steps must be positive");
  if (step > total_steps) throw ConfigError("step beyond schedule");
  const std::size_t warm = warmup_steps(total_steps, cfg);
  if (step < warm) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total_steps == warm) return cfg.peak_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales every gradient group by max_norm / ||g|| when the global L2 norm
/// exceeds max_norm. Returns the factor applied (1 when untouched).
template <class Real>
double clip_global_norm(std::span<const std::span<Real>> groups, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("max_norm must be positive");
  double sq = 0.0;
  for (auto g : groups)
    for (Real v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return 1.0;
  for (auto g : groups)
    for (Real& v : g) v = static_cast<Real>(static_cast<double>(v) * max_norm / norm);
  return max_norm / norm;
}

template <class Real>
double clip_global_norm(std::span<Real> grads, double max_norm) {
  const std::span<Real> one[] = {grads};
  return clip_global_norm<Real>(std::span<const std::span<Real>>(one), max_norm);
}

template <class Real>
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

template <class Real>
bool all_finite(std::span<const Real> xs) {
  return std::all_of(xs.begin(), xs.end(), [](Real x) { return std::isfinite(x); });
}

/// One decoupled AdamW update (step_index counts from 1).
template <class Real>
void adamw_step(std::span<Real> param, std::span<const Real> grad, AdamMoments<Real>& mom, std::size_t step_index,
                double lr, const OptimizerConfig& cfg) {
  if (step_index < 1) throw ConfigError("step_index counts from 1");
  if (param.size() != grad.size()) throw ConfigError("parameter and gradient sizes differ");
  if (!all_finite(grad)) throw DivergenceError("non-finite gradient");
  if (mom.m.size() != param.size()) {
    mom.m.assign(param.size(), 0.0);
    mom.v.assign(param.size(), 0.0);
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
    mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
    double w = static_cast<double>(param[i]);
    w *= 1.0 - lr * cfg.weight_decay;
    w -= lr * (mom.m[i] / bc1) / (std::sqrt(mom.v[i] / bc2) + cfg.eps);
    param[i] = static_cast<Real>(w);
  }
}

/// Fraction of masked positions whose argmax equals the target.
template <class Real>
double token_accuracy(const std::vector<Mat<Real>>& logits, const TokenBatch& targets) {
  if (logits.size() != targets.batch()) throw DataError("logits batch does not match targets");
  LossStats total;
  for (std::size_t b = 0; b < logits.size(); ++b)
    total += sequence_ce<Real>(logits[b], targets.token_ids[b], targets.loss_mask[b]);
  if (total.targets == 0) throw DataError("no target tokens");
  return total.accuracy();
}

struct TrainReport {
  std::vector<double> loss_curve;      // per optimizer step
  std::vector<double> accuracy_curve;  // per optimizer step
  std::vector<double> lr_curve;
  std::vector<double> epoch_loss;      // token-weighted per epoch
  std::vector<double> epoch_accuracy;
  double final_loss = 0.0;
  double final_accuracy = 0.0;
  std::size_t tokens_processed = 0;
  std::size_t total_steps = 0;
};

inline nlohmann::ordered_json to_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["final_loss"] = r.final_loss;
  j["final_accuracy"] = r.final_accuracy;
  j["tokens_processed"] = r.tokens_processed;
  j["total_steps"] = r.total_steps;
  j["epoch_loss"] = r.epoch_loss;
  j["epoch_accuracy"] = r.epoch_accuracy;
  j["loss_curve"] = r.loss_curve;
  j["accuracy_curve"] = r.accuracy_curve;
  j["lr_curve"] = r.lr_curve;
  return j;
}

/// Plain-text loss curve: one line per optimizer step.
inline std::string loss_table(const TrainReport& r) {
  std::ostringstream os;
  os << "step\tlr\tloss\taccuracy\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) {
    os << (i + 1) << '\t' << r.lr_curve[i] << '\t' << r.loss_curve[i] << '\t' << r.accuracy_curve[i] << '\n';
  }
  return os.str();
}

/// Deterministic Fisher-Yates shuffle driven by uniform01.
inline std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

struct StepLog {
  std::size_t step;
  std::size_t total_steps;
  int epoch;
  double lr;
  double loss;
  double accuracy;
};

template <class Real>
class AdapterOptimizer {
 public:
  explicit AdapterOptimizer(const OptimizerConfig& cfg) : cfg_(cfg) {}

  void step(Model<Real>& model, std::vector<AdapterGradSlot<Real>>& grads, double lr) {
    ++t_;
    auto layers = model.named_layers();
    moments_.resize(layers.size() * 2);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& ad = layers[i].second->adapter();
      adamw_step<Real>(std::span<Real>(ad.A.data(), static_cast<std::size_t>(ad.A.size())),
                       std::span<const Real>(grads[i].dA.data(), static_cast<std::size_t>(grads[i].dA.size())),
                       moments_[2 * i], t_, lr, cfg_);
      adamw_step<Real>(std::span<Real>(ad.B.data(), static_cast<std::size_t>(ad.B.size())),
                       std::span<const Real>(grads[i].dB.data(), static_cast<std::size_t>(grads[i].dB.size())),
                       moments_[2 * i + 1], t_, lr, cfg_);
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::vector<AdamMoments<Real>> moments_;
};

template <class Real>
std::vector<std::span<Real>> gradient_views(std::vector<AdapterGradSlot<Real>>& grads) {
  std::vector<std::span<Real>> views;
  for (auto& g : grads) {
    views.emplace_back(g.dA.data(), static_cast<std::size_t>(g.dA.size()));
    views.emplace_back(g.dB.data(), static_cast<std::size_t>(g.dB.size()));
  }
  return views;
}

/// Copies of every adapter pair, used to roll back a diverged step.
template <class Real>
std::vector<std::pair<Mat<Real>, Mat<Real>>> snapshot_adapters(Model<Real>& model) {
  std::vector<std::pair<Mat<Real>, Mat<Real>>> snap;
  for (auto& [name, layer] : model.named_layers()) snap.emplace_back(layer->adapter().A, layer->adapter().B);
  return snap;
}

template <class Real>
void restore_adapters(Model<Real>& model, const std::vector<std::pair<Mat<Real>, Mat<Real>>>& snap) {
  auto layers = model.named_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].second->adapter().A = snap[i].first;
    layers[i].second->adapter().B = snap[i].second;
  }
}

inline EncodedSequence truncate_to(const EncodedSequence& s, int max_seq) {
  if (s.ids.size() <= static_cast<std::size_t>(max_seq)) return s;
  EncodedSequence t;
  t.ids.assign(s.ids.begin(), s.ids.begin() + max_seq);
  t.mask.assign(s.mask.begin(), s.mask.begin() + max_seq);
  return t;
}

/// Fine-tunes the attached adapters. Each optimizer step consumes up to
/// grad_accum micro-batches; the loss is normalized by the number of target
/// tokens in the whole accumulation window, so accumulation is equivalent to
/// one large batch. On a non-finite loss or gradient the adapters are rolled
/// back to the last good step and DivergenceError is thrown.
template <class Real>
TrainReport train(Model<Real>& model, std::span<const EncodedSequence> dataset, const OptimizerConfig& opt,
                  const std::function<void(const StepLog&)>& on_step = {}) {
  opt.validate();
  if (dataset.empty()) throw DataError("empty training set");
  if (!model.has_adapters()) throw ConfigError("model has no adapters attached");

  TrainReport report;
  if (opt.epochs == 0) return report;

  std::vector<EncodedSequence> data;
  data.reserve(dataset.size());
  for (const auto& s : dataset) {
    if (s.ids.size() != s.mask.size()) throw DataError("mask shape differs from ids");
    data.push_back(truncate_to(s, model.cfg.max_seq));
  }

  const std::size_t n = data.size();
  const auto micro = static_cast<std::size_t>(opt.micro_batch);
  const auto window = micro * static_cast<std::size_t>(opt.grad_accum);
  const std::size_t steps_per_epoch = (n + window - 1) / window;
  const std::size_t total = steps_per_epoch * static_cast<std::size_t>(opt.epochs);
  report.total_steps = total;

  Rng shuffle_rng(mix_seed(opt.seed, 1));
  Rng dropout_rng(mix_seed(opt.seed, 2));
  AdapterOptimizer<Real> optimizer(opt);
  std::vector<AdapterGradSlot<Real>> grads;
  std::size_t step = 0;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto order = seeded_permutation(n, shuffle_rng);
    LossStats epoch_stats;
    for (std::size_t start = 0; start < n; start += window) {
      const std::size_t end = std::min(n, start + window);
      std::size_t targets = 0;
      for (std::size_t i = start; i < end; ++i) targets += data[order[i]].targets();
      if (targets == 0) continue;

      for (auto& g : grads) {
        g.dA.setZero();
        g.dB.setZero();
      }
      const Real scale = Real(1) / static_cast<Real>(targets);
      LossStats st;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data[order[i]];
        st += model.forward_backward(s.ids, s.mask, scale, true, &dropout_rng, grads);
      }
      if (!std::isfinite(st.loss_sum)) throw DivergenceError("non-finite loss at step " + std::to_string(step + 1));
      auto views = gradient_views(grads);
      for (auto v : views)
        if (!all_finite<Real>(v)) throw DivergenceError("non-finite gradient at step " + std::to_string(step + 1));
      clip_global_norm<Real>(std::span<const std::span<Real>>(views), opt.max_grad_norm);

      const double lr = lr_at_step(step, total, opt);
      const auto snap = snapshot_adapters(model);
      optimizer.step(model, grads, lr);
      for (const auto& [name, layer] : model.named_layers()) {
        const auto& ad = layer->adapter();
        if (!ad.A.allFinite() || !ad.B.allFinite()) {
          restore_adapters(model, snap);
          throw DivergenceError("non-finite parameter at step " + std::to_string(step + 1));
        }
      }
      ++step;

      report.loss_curve.push_back(st.mean_loss());
      report.accuracy_curve.push_back(st.accuracy());
      report.lr_curve.push_back(lr);
      report.tokens_processed += st.targets;
      epoch_stats += st;
      if (on_step) on_step({step, total, epoch, lr, st.mean_loss(), st.accuracy()});
    }
    report.epoch_loss.push_back(epoch_stats.mean_loss());
    report.epoch_accuracy.push_back(epoch_stats.accuracy());
  }
  report.final_loss = report.epoch_loss.back();
  report.final_accuracy = report.epoch_accuracy.back();
  return report;
}

/// Evaluation-mode loss/accuracy over a corpus.
template <class Real>
LossStats evaluate_corpus(const Model<Real>& model, std::span<const EncodedSequence> data) {
  LossStats total;
  for (const auto& s : data) {
    const auto t = truncate_to(s, model.cfg.max_seq);
    total += model.evaluate(t.ids, t.mask);
  }
  return total;
}

}  // namespace tslam
