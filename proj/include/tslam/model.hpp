#pragma once

// Tiny decoder-only transformer with grouped-query attention.
//
// Every q/k/v/o and fc1/fc2 projection is an NF4-quantized AdaptedLinear.
// Token/position embeddings, RMS norm gains and the output head stay in full
// precision and are frozen; only LoRA adapters are ever trained.
//
// Loss-mask convention: mask[t] == true means token t is a target, predicted
// by the logits at position t - 1. mask[0] is therefore always false.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tslam/error.hpp"
#include "tslam/lora.hpp"
#include "tslam/quant.hpp"
#include "tslam/sampling.hpp"
#include "tslam/tensor.hpp"
#include "tslam/tokenizer.hpp"

namespace tslam {

struct ModelConfig {
  int vocab_size = kVocabSize;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 2;
  int d_ff = 256;
  int max_seq = 256;
  std::uint64_t seed = 0;
  std::size_t nf4_block_size = kDefaultBlockSize;

  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || d_ff < 1 ||
        max_seq < 2 || nf4_block_size < 1)
      throw ConfigError("model dimensions must be positive");
    if (n_heads % n_kv_heads != 0) throw ConfigError("n_heads must be divisible by n_kv_heads");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LoraConfig {
  int rank = 16;
  double alpha = 32.0;
  double dropout = 0.05;
};

// ---------------------------------------------------------------------------
// Elementwise pieces

template <class Real>
struct RmsNormOut {
  Mat<Real> y;
  Vec<Real> inv_rms;  // one per row
};

inline constexpr double kRmsEps = 1e-6;

template <class Real>
RmsNormOut<Real> rms_norm(const Mat<Real>& x, const RowVec<Real>& gain) {
  RmsNormOut<Real> out;
  out.inv_rms.resize(x.rows());
  out.y.resize(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const Real ms = x.row(t).squaredNorm() / static_cast<Real>(x.cols());
    const Real inv = Real(1) / std::sqrt(ms + static_cast<Real>(kRmsEps));
    out.inv_rms(t) = inv;
    out.y.row(t) = (x.row(t) * inv).cwiseProduct(gain);
  }
  return out;
}

template <class Real>
Mat<Real> rms_norm_backward(const Mat<Real>& x, const Vec<Real>& inv_rms, const RowVec<Real>& gain,
                            const Mat<Real>& dy) {
  Mat<Real> dx(x.rows(), x.cols());
  const Real d = static_cast<Real>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const RowVec<Real> gdy = dy.row(t).cwiseProduct(gain);
    const Real inv = inv_rms(t);
    const Real dot = gdy.dot(x.row(t));
    dx.row(t) = gdy * inv - x.row(t) * (dot * inv * inv * inv / d);
  }
  return dx;
}

template <class Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
}

template <class Real>
Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
  const Real pdf = std::exp(Real(-0.5) * x * x) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// Grouped-query attention

template <class Real>
struct AttentionResult {
  Mat<Real> out;                // T x (n_heads * head_dim)
  std::vector<Mat<Real>> probs;  // one T x T row-stochastic matrix per query head
};

/// KV head serving query head h.
inline int kv_group_of(int h, int n_heads, int n_kv_heads) { return h / (n_heads / n_kv_heads); }

template <class Real>
AttentionResult<Real> gqa_attention(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v, int n_heads,
                                    int n_kv_heads, bool causal = true) {
  if (n_heads < 1 || n_kv_heads < 1 || n_heads % n_kv_heads != 0)
    throw ConfigError("n_heads must be divisible by n_kv_heads");
  if (q.cols() % n_heads != 0) throw ConfigError("query width not divisible by head count");
  const Eigen::Index dh = q.cols() / n_heads;
  if (k.cols() != dh * n_kv_heads || v.cols() != k.cols() || k.rows() != q.rows() || v.rows() != q.rows())
    throw ConfigError("key/value shape mismatch");
  const Eigen::Index T = q.rows();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  AttentionResult<Real> res;
  res.out.resize(T, q.cols());
  res.probs.resize(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const int g = kv_group_of(h, n_heads, n_kv_heads);
    Mat<Real> s = (q.middleCols(h * dh, dh) * k.middleCols(g * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < T; ++i) {
      const Eigen::Index last = causal ? i : T - 1;
      Real mx = s(i, 0);
      for (Eigen::Index j = 1; j <= last; ++j) mx = std::max(mx, s(i, j));
      Real z = 0;
      for (Eigen::Index j = 0; j <= last; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        z += s(i, j);
      }
      for (Eigen::Index j = 0; j <= last; ++j) s(i, j) /= z;
      for (Eigen::Index j = last + 1; j < T; ++j) s(i, j) = 0;
    }
    res.out.middleCols(h * dh, dh).noalias() = s * v.middleCols(g * dh, dh);
    res.probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return res;
}

template <class Real>
struct AttentionGrads {
  Mat<Real> dq, dk, dv;
};

template <class Real>
AttentionGrads<Real> gqa_attention_backward(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v,
                                            const std::vector<Mat<Real>>& probs, const Mat<Real>& dout,
                                            int n_heads, int n_kv_heads) {
  const Eigen::Index dh = q.cols() / n_heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  AttentionGrads<Real> g;
  g.dq = Mat<Real>::Zero(q.rows(), q.cols());
  g.dk = Mat<Real>::Zero(k.rows(), k.cols());
  g.dv = Mat<Real>::Zero(v.rows(), v.cols());
  for (int h = 0; h < n_heads; ++h) {
    const int grp = kv_group_of(h, n_heads, n_kv_heads);
    const Mat<Real>& p = probs[static_cast<std::size_t>(h)];
    const auto dout_h = dout.middleCols(h * dh, dh);
    g.dv.middleCols(grp * dh, dh).noalias() += p.transpose() * dout_h;
    Mat<Real> dp = dout_h * v.middleCols(grp * dh, dh).transpose();
    // softmax backward: ds = p * (dp - rowsum(dp * p))
    Vec<Real> rowdot = dp.cwiseProduct(p).rowwise().sum();
    Mat<Real> ds = p.cwiseProduct(dp.colwise() - rowdot) * scale;
    g.dq.middleCols(h * dh, dh).noalias() = ds * k.middleCols(grp * dh, dh);
    g.dk.middleCols(grp * dh, dh).noalias() += ds.transpose() * q.middleCols(h * dh, dh);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Loss

struct TokenBatch {
  std::vector<std::vector<int>> token_ids;   // batch x seq, right-padded with kPadId
  std::vector<std::vector<std::uint8_t>> loss_mask;

  std::size_t batch() const { return token_ids.size(); }

  void validate(int vocab_size) const {
    if (loss_mask.size() != token_ids.size()) throw DataError("mask shape differs from ids");
    for (std::size_t b = 0; b < token_ids.size(); ++b) {
      if (loss_mask[b].size() != token_ids[b].size()) throw DataError("mask shape differs from ids");
      for (int id : token_ids[b])
        if (id < 0 || id >= vocab_size) throw DataError("token id out of vocabulary");
      if (!loss_mask[b].empty() && loss_mask[b][0]) throw DataError("position 0 cannot be a target");
    }
  }

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (const auto& row : loss_mask)
      for (auto m : row) n += m ? 1 : 0;
    return n;
  }
};

struct LossStats {
  double loss_sum = 0.0;  // sum of -log p over targets
  std::size_t targets = 0;
  std::size_t correct = 0;  // argmax hits

  LossStats& operator+=(const LossStats& o) {
    loss_sum += o.loss_sum;
    targets += o.targets;
    correct += o.correct;
    return *this;
  }
  double mean_loss() const { return targets ? loss_sum / static_cast<double>(targets) : 0.0; }
  double accuracy() const { return targets ? static_cast<double>(correct) / static_cast<double>(targets) : 0.0; }
};

/// Cross-entropy over masked targets of one sequence. When `dlogits` is given
/// it receives (softmax - onehot) * grad_scale on every predicting row.
template <class Real>
LossStats sequence_ce(const Mat<Real>& logits, std::span<const int> ids, std::span<const std::uint8_t> mask,
                      Mat<Real>* dlogits = nullptr, Real grad_scale = Real(1)) {
  LossStats st;
  if (dlogits) *dlogits = Mat<Real>::Zero(logits.rows(), logits.cols());
  const std::size_t T = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(logits.rows()) + 1);
  for (std::size_t t = 1; t < T; ++t) {
    if (!mask[t]) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(t - 1));
    Eigen::Index best;
    const Real mx = row.maxCoeff(&best);
    double z = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<double>(row(j) - mx));
    const double logz = std::log(z) + static_cast<double>(mx);
    st.loss_sum += logz - static_cast<double>(row(ids[t]));
    st.targets += 1;
    st.correct += (best == ids[t]) ? 1 : 0;
    if (dlogits) {
      auto drow = dlogits->row(static_cast<Eigen::Index>(t - 1));
      for (Eigen::Index j = 0; j < row.size(); ++j)
        drow(j) = static_cast<Real>(std::exp(static_cast<double>(row(j)) - logz)) * grad_scale;
      drow(ids[t]) -= grad_scale;
    }
  }
  return st;
}

/// Mean negative log-likelihood over masked positions of a batch.
/// `logits[b]` holds one row per position of sequence b.
template <class Real>
double masked_ce_loss(const std::vector<Mat<Real>>& logits, const TokenBatch& targets) {
  if (logits.size() != targets.batch()) throw DataError("logits batch does not match targets");
  LossStats total;
  for (std::size_t b = 0; b < logits.size(); ++b)
    total += sequence_ce<Real>(logits[b], targets.token_ids[b], targets.loss_mask[b]);
  if (total.targets == 0) throw DataError("no target tokens");
  return total.mean_loss();
}

// ---------------------------------------------------------------------------
// Model

template <class Real>
struct TransformerBlock {
  RowVec<Real> attn_norm;
  AdaptedLinear<Real> q_proj, k_proj, v_proj, o_proj;
  RowVec<Real> ffn_norm;
  AdaptedLinear<Real> fc1, fc2;
};

template <class Real>
struct AdapterGradSlot {
  Mat<Real> dA;
  Mat<Real> dB;
};

/// Per-layer forward activations retained for the backward pass.
template <class Real>
struct BlockCache {
  Mat<Real> x_in;
  Vec<Real> inv_rms1;
  Mat<Real> q, k, v;
  std::vector<Mat<Real>> probs;
  Mat<Real> x_mid;
  Vec<Real> inv_rms2;
  Mat<Real> u;  // fc1 pre-activation
};

template <class Real>
class Model {
 public:
  ModelConfig cfg;
  Mat<Real> tok_emb;  // vocab x d_model
  Mat<Real> pos_emb;  // max_seq x d_model
  std::vector<TransformerBlock<Real>> blocks;
  RowVec<Real> final_norm;
  Mat<Real> head;  // vocab x d_model

  /// Stable, ordered view of every adaptable projection with its path name.
  std::vector<std::pair<std::string, AdaptedLinear<Real>*>> named_layers() {
    std::vector<std::pair<std::string, AdaptedLinear<Real>*>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i);
      auto& b = blocks[i];
      out.emplace_back(p + ".attn.q_proj", &b.q_proj);
      out.emplace_back(p + ".attn.k_proj", &b.k_proj);
      out.emplace_back(p + ".attn.v_proj", &b.v_proj);
      out.emplace_back(p + ".attn.o_proj", &b.o_proj);
      out.emplace_back(p + ".mlp.fc1", &b.fc1);
      out.emplace_back(p + ".mlp.fc2", &b.fc2);
    }
    return out;
  }

  std::vector<std::pair<std::string, const AdaptedLinear<Real>*>> named_layers() const {
    std::vector<std::pair<std::string, const AdaptedLinear<Real>*>> out;
    for (auto& [name, ptr] : const_cast<Model*>(this)->named_layers()) out.emplace_back(name, ptr);
    return out;
  }

  void attach_adapters(const LoraConfig& lc, std::uint64_t seed) {
    std::uint64_t salt = 0;
    for (auto& [name, layer] : named_layers()) {
      layer->attach(init_adapter<Real>(static_cast<int>(layer->in_dim()), static_cast<int>(layer->out_dim()),
                                       lc.rank, lc.alpha, lc.dropout, mix_seed(seed, salt++)));
    }
  }

  bool has_adapters() const {
    for (const auto& [name, layer] : named_layers())
      if (!layer->has_adapter()) return false;
    return !blocks.empty();
  }

  void detach_adapters() {
    for (auto& [name, layer] : named_layers()) layer->detach();
  }

  /// Hash over every quantized base code stream, in layer order.
  std::uint64_t base_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, layer] : named_layers()) h = mix_seed(h, code_stream_hash(layer->base()));
    return h;
  }

  Mat<Real> embed(std::span<const int> ids) const {
    const auto T = static_cast<Eigen::Index>(ids.size());
    if (T == 0) throw DataError("empty token sequence");
    if (T > cfg.max_seq) throw DataError("sequence longer than max_seq");
    Mat<Real> x(T, cfg.d_model);
    for (Eigen::Index t = 0; t < T; ++t) {
      const int id = ids[static_cast<std::size_t>(t)];
      if (id < 0 || id >= cfg.vocab_size) throw DataError("token id out of vocabulary");
      x.row(t) = tok_emb.row(id) + pos_emb.row(t);
    }
    return x;
  }

  /// Evaluation-mode logits, one row per position. Safe for concurrent readers.
  Mat<Real> logits(std::span<const int> ids) const {
    Mat<Real> x = embed(ids);
    for (const auto& b : blocks) {
      const auto n1 = rms_norm(x, b.attn_norm);
      auto att = gqa_attention(b.q_proj.infer(n1.y), b.k_proj.infer(n1.y), b.v_proj.infer(n1.y), cfg.n_heads,
                               cfg.n_kv_heads, true);
      x += b.o_proj.infer(att.out);
      const auto n2 = rms_norm(x, b.ffn_norm);
      Mat<Real> u = b.fc1.infer(n2.y);
      u = u.unaryExpr([](Real z) { return gelu(z); });
      x += b.fc2.infer(u);
    }
    const auto nf = rms_norm(x, final_norm);
    return nf.y * head.transpose();
  }

  /// Forward + backward on one sequence. Adapter gradients are added into
  /// `grads` (ordered like named_layers()), with dL/dlogits scaled by grad_scale.
  LossStats forward_backward(std::span<const int> ids, std::span<const std::uint8_t> mask, Real grad_scale,
                             bool training, Rng* rng, std::vector<AdapterGradSlot<Real>>& grads) {
    auto layers = named_layers();
    if (grads.size() != layers.size()) {
      grads.clear();
      for (auto& [name, layer] : layers) {
        if (!layer->has_adapter()) throw ConfigError("model has no adapters attached");
        grads.push_back({Mat<Real>::Zero(layer->adapter().A.rows(), layer->adapter().A.cols()),
                         Mat<Real>::Zero(layer->adapter().B.rows(), layer->adapter().B.cols())});
      }
    }

    std::vector<BlockCache<Real>> caches(blocks.size());
    Mat<Real> x = embed(ids);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      auto& c = caches[i];
      c.x_in = x;
      auto n1 = rms_norm(x, b.attn_norm);
      c.inv_rms1 = std::move(n1.inv_rms);
      c.q = b.q_proj.forward(n1.y, training, rng);
      c.k = b.k_proj.forward(n1.y, training, rng);
      c.v = b.v_proj.forward(n1.y, training, rng);
      auto att = gqa_attention(c.q, c.k, c.v, cfg.n_heads, cfg.n_kv_heads, true);
      c.probs = std::move(att.probs);
      x += b.o_proj.forward(att.out, training, rng);
      c.x_mid = x;
      auto n2 = rms_norm(x, b.ffn_norm);
      c.inv_rms2 = std::move(n2.inv_rms);
      c.u = b.fc1.forward(n2.y, training, rng);
      Mat<Real> a = c.u.unaryExpr([](Real z) { return gelu(z); });
      x += b.fc2.forward(a, training, rng);
    }
    auto nf = rms_norm(x, final_norm);
    Mat<Real> lg = nf.y * head.transpose();

    Mat<Real> dlogits;
    LossStats st = sequence_ce<Real>(lg, ids, mask, &dlogits, grad_scale);
    if (!std::isfinite(st.loss_sum)) return st;

    Mat<Real> dx = rms_norm_backward(x, nf.inv_rms, final_norm, Mat<Real>(dlogits * head));
    for (std::size_t ii = blocks.size(); ii-- > 0;) {
      auto& b = blocks[ii];
      auto& c = caches[ii];
      auto* slot = &grads[ii * 6];

      auto g_fc2 = b.fc2.backward(dx);
      accumulate(slot[5], g_fc2);
      Mat<Real> du = g_fc2.dx.cwiseProduct(c.u.unaryExpr([](Real z) { return gelu_grad(z); }));
      auto g_fc1 = b.fc1.backward(du);
      accumulate(slot[4], g_fc1);
      dx += rms_norm_backward(c.x_mid, c.inv_rms2, b.ffn_norm, g_fc1.dx);

      auto g_o = b.o_proj.backward(dx);
      accumulate(slot[3], g_o);
      auto ag = gqa_attention_backward(c.q, c.k, c.v, c.probs, g_o.dx, cfg.n_heads, cfg.n_kv_heads);
      auto g_q = b.q_proj.backward(ag.dq);
      auto g_k = b.k_proj.backward(ag.dk);
      auto g_v = b.v_proj.backward(ag.dv);
      accumulate(slot[0], g_q);
      accumulate(slot[1], g_k);
      accumulate(slot[2], g_v);
      Mat<Real> dh1 = g_q.dx + g_k.dx + g_v.dx;
      dx += rms_norm_backward(c.x_in, c.inv_rms1, b.attn_norm, dh1);
    }
    for (auto& [name, layer] : layers) layer->clear_cache();
    return st;
  }

  /// Loss statistics without gradients, evaluation mode.
  LossStats evaluate(std::span<const int> ids, std::span<const std::uint8_t> mask) const {
    return sequence_ce<Real>(logits(ids), ids, mask);
  }

 private:
  static void accumulate(AdapterGradSlot<Real>& slot, const AdapterGrads<Real>& g) {
    slot.dA += g.dA;
    slot.dB += g.dB;
  }
};

/// Deterministic Gaussian initialization; projections are quantized to NF4.
template <class Real>
Model<Real> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Model<Real> m;
  m.cfg = cfg;
  const int d = cfg.d_model;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_out_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  m.tok_emb = gaussian_matrix<Real>(cfg.vocab_size, d, 1.0, rng);
  m.pos_emb = gaussian_matrix<Real>(cfg.max_seq, d, 0.5, rng);
  auto make = [&](int out, int in, double stddev) {
    return AdaptedLinear<Real>::from_dense(gaussian_matrix<Real>(out, in, stddev, rng), cfg.nf4_block_size);
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    TransformerBlock<Real> b;
    b.attn_norm = RowVec<Real>::Ones(d);
    b.q_proj = make(d, d, proj_std);
    b.k_proj = make(cfg.kv_dim(), d, proj_std);
    b.v_proj = make(cfg.kv_dim(), d, proj_std);
    b.o_proj = make(d, d, proj_std * resid_scale);
    b.ffn_norm = RowVec<Real>::Ones(d);
    b.fc1 = make(cfg.d_ff, d, proj_std);
    b.fc2 = make(d, cfg.d_ff, ff_out_std * resid_scale);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = RowVec<Real>::Ones(d);
  m.head = gaussian_matrix<Real>(cfg.vocab_size, d, 0.3, rng);
  return m;
}

/// Autoregressive sampling. Returns only the newly generated tokens; stops at
/// EOS (not included), after max_new tokens, or when max_seq is reached.
template <class Real>
std::vector<int> generate(const Model<Real>& model, std::span<const int> prompt, double temperature, double top_p,
                          int max_new, std::uint64_t seed, int eos_id = kEosId) {
  if (prompt.empty()) throw DataError("empty prompt");
  if (temperature < 0.0) throw ConfigError("temperature must be non-negative");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  Rng rng(seed);
  std::vector<int> seq(prompt.begin(), prompt.end());
  if (seq.size() > static_cast<std::size_t>(model.cfg.max_seq))
    seq.erase(seq.begin(), seq.end() - model.cfg.max_seq);
  std::vector<int> out;
  for (int i = 0; i < max_new && seq.size() < static_cast<std::size_t>(model.cfg.max_seq); ++i) {
    const Mat<Real> lg = model.logits(seq);
    const RowVec<Real> last = lg.row(lg.rows() - 1);
    const auto next = static_cast<int>(
        sample_token<Real>(std::span<const Real>(last.data(), static_cast<std::size_t>(last.size())), temperature,
                           top_p, rng));
    if (next == eos_id) break;
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

}  // namespace tslam
