#pragma once

// Low-rank adapters on top of NF4-quantized frozen linear layers.
//
//   y = W x + (alpha / r) * B (A dropout(x))
//
// W is the dequantized base and never receives gradients. Activations are
// stored as rows (tokens x features), so a batch forward is X W^T.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>

#include "tslam/error.hpp"
#include "tslam/quant.hpp"
#include "tslam/tensor.hpp"

namespace tslam {

template <class Real>
struct LoraAdapter {
  Mat<Real> A;  // rank x in_dim
  Mat<Real> B;  // out_dim x rank
  int rank = 0;
  Real alpha = 0;
  Real dropout_p = 0;

  Real scaling() const { return alpha / static_cast<Real>(rank); }
  Eigen::Index in_dim() const { return A.cols(); }
  Eigen::Index out_dim() const { return B.rows(); }
};

/// A ~ N(0, 1/r), B = 0, so a fresh adapter contributes exactly nothing.
template <class Real>
LoraAdapter<Real> init_adapter(int in_dim, int out_dim, int r, double alpha, double dropout_p,
                               std::uint64_t seed) {
  if (r < 1) throw ConfigError("rank must be positive");
  if (r > std::min(in_dim, out_dim)) throw ConfigError("rank exceeds layer dimension");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  Rng rng(seed);
  LoraAdapter<Real> ad;
  ad.rank = r;
  ad.alpha = static_cast<Real>(alpha);
  ad.dropout_p = static_cast<Real>(dropout_p);
  ad.A = gaussian_matrix<Real>(r, in_dim, 1.0 / std::sqrt(static_cast<double>(r)), rng);
  ad.B = Mat<Real>::Zero(out_dim, r);
  return ad;
}

template <class Real>
struct AdapterGrads {
  Mat<Real> dA;
  Mat<Real> dB;
  Mat<Real> dx;
};

/// Frozen NF4 base plus an optional trainable adapter.
template <class Real>
class AdaptedLinear {
 public:
  AdaptedLinear() = default;

  explicit AdaptedLinear(QuantizedTensor base)
      : base_(std::move(base)), weight_(dequantize_matrix<Real>(base_)) {}

  static AdaptedLinear from_dense(const Mat<Real>& w, std::size_t block_size = kDefaultBlockSize) {
    return AdaptedLinear(quantize_matrix(w, block_size));
  }

  const QuantizedTensor& base() const { return base_; }
  /// Dequantized base weight (out_dim x in_dim).
  const Mat<Real>& weight() const { return weight_; }
  Eigen::Index in_dim() const { return weight_.cols(); }
  Eigen::Index out_dim() const { return weight_.rows(); }

  bool has_adapter() const { return adapter_.has_value(); }
  const LoraAdapter<Real>& adapter() const { return *adapter_; }
  LoraAdapter<Real>& adapter() { return *adapter_; }

  void attach(LoraAdapter<Real> ad) {
    if (ad.in_dim() != in_dim() || ad.out_dim() != out_dim() || ad.B.cols() != ad.rank ||
        ad.A.rows() != ad.rank)
      throw ConfigError("adapter shape does not match layer");
    adapter_ = std::move(ad);
  }
  void detach() { adapter_.reset(); }

  /// Evaluation-mode forward; no state is touched.
  Mat<Real> infer(const Mat<Real>& x) const {
    check_input(x);
    Mat<Real> y = x * weight_.transpose();
    if (adapter_) y.noalias() += adapter_->scaling() * ((x * adapter_->A.transpose()) * adapter_->B.transpose());
    return y;
  }

  /// Training-capable forward. Caches what the backward pass needs; dropout
  /// is applied to the adapter input only when `training` is set.
  Mat<Real> forward(const Mat<Real>& x, bool training, Rng* rng = nullptr) {
    check_input(x);
    Mat<Real> y = x * weight_.transpose();
    cached_ = true;
    drop_scale_.resize(0, 0);
    if (!adapter_) {
      return y;
    }
    const Real p = adapter_->dropout_p;
    if (training && p > 0) {
      if (rng == nullptr) throw ConfigError("dropout requires an rng");
      const Real keep = Real(1) / (Real(1) - p);
      drop_scale_.resize(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < drop_scale_.size(); ++i)
        drop_scale_.data()[i] = uniform01(*rng) < static_cast<double>(p) ? Real(0) : keep;
      x_in_ = x.cwiseProduct(drop_scale_);
    } else {
      x_in_ = x;
    }
    xa_.noalias() = x_in_ * adapter_->A.transpose();
    y.noalias() += adapter_->scaling() * (xa_ * adapter_->B.transpose());
    return y;
  }

  /// Gradients for the adapter and the layer input given dL/dy.
  AdapterGrads<Real> backward(const Mat<Real>& dy) const {
    if (!cached_) throw Error("backward before forward");
    if (dy.cols() != out_dim()) throw ConfigError("upstream gradient has wrong width");
    AdapterGrads<Real> g;
    g.dx.noalias() = dy * weight_;
    if (!adapter_) return g;
    if (dy.rows() != xa_.rows()) throw ConfigError("upstream gradient does not match cached input");
    const Real s = adapter_->scaling();
    g.dB.noalias() = s * (dy.transpose() * xa_);
    Mat<Real> dxa = s * (dy * adapter_->B);  // tokens x rank
    g.dA.noalias() = dxa.transpose() * x_in_;
    Mat<Real> dx_adapter = dxa * adapter_->A;
    if (drop_scale_.size() > 0) dx_adapter = dx_adapter.cwiseProduct(drop_scale_);
    g.dx += dx_adapter;
    return g;
  }

  void clear_cache() {
    cached_ = false;
    x_in_.resize(0, 0);
    xa_.resize(0, 0);
    drop_scale_.resize(0, 0);
  }

 private:
  void check_input(const Mat<Real>& x) const {
    if (x.cols() != in_dim()) throw ConfigError("input dimension mismatch");
  }

  QuantizedTensor base_;
  Mat<Real> weight_;
  std::optional<LoraAdapter<Real>> adapter_;

  bool cached_ = false;
  Mat<Real> x_in_;        // adapter input after dropout
  Mat<Real> xa_;          // x_in A^T
  Mat<Real> drop_scale_;  // empty when dropout was not applied
};

template <class Real>
Mat<Real> adapted_forward(AdaptedLinear<Real>& layer, const Mat<Real>& x, bool training, Rng* rng = nullptr) {
  return layer.forward(x, training, rng);
}

template <class Real>
AdapterGrads<Real> adapter_grads(const AdaptedLinear<Real>& layer, const Mat<Real>& upstream) {
  return layer.backward(upstream);
}

/// W + (alpha / r) B A. Inputs are left untouched.
template <class Real>
Mat<Real> merge(const Mat<Real>& base_dense, const LoraAdapter<Real>& adapter) {
  if (base_dense.rows() != adapter.out_dim() || base_dense.cols() != adapter.in_dim())
    throw ConfigError("adapter shape does not match base");
  Mat<Real> merged = base_dense;
  merged.noalias() += adapter.scaling() * (adapter.B * adapter.A);
  return merged;
}

/// Inverse of merge, up to rounding.
template <class Real>
Mat<Real> unmerge(const Mat<Real>& merged, const LoraAdapter<Real>& adapter) {
  if (merged.rows() != adapter.out_dim() || merged.cols() != adapter.in_dim())
    throw ConfigError("adapter shape does not match base");
  Mat<Real> base = merged;
  base.noalias() -= adapter.scaling() * (adapter.B * adapter.A);
  return base;
}

}  // namespace tslam
