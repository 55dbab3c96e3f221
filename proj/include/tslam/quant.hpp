#pragma once

// Blockwise 4-bit NormalFloat (NF4) quantization of frozen weights.
//
// Each block of `block_size` consecutive elements is divided by its absmax and
// every element is replaced by the index of the nearest codebook value. Codes
// are packed two per byte, low nibble first.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tslam/error.hpp"
#include "tslam/tensor.hpp"

namespace tslam {

inline constexpr std::size_t kDefaultBlockSize = 64;

struct Nf4Codebook {
  std::array<float, 16> values{};
  /// midpoints[i] separates values[i] and values[i + 1].
  std::array<float, 15> midpoints{};

  float operator[](std::size_t i) const { return values[i]; }

  std::uint8_t zero_index() const {
    for (std::uint8_t i = 0; i < 16; ++i)
      if (values[i] == 0.0f) return i;
    return 0;
  }

  /// Nearest codebook index for a value already normalized into [-1, 1].
  /// A value exactly on a midpoint maps to the lower index.
  std::uint8_t nearest(float x) const {
    auto it = std::lower_bound(midpoints.begin(), midpoints.end(), x);
    return static_cast<std::uint8_t>(it - midpoints.begin());
  }

  float max_adjacent_gap() const {
    float gap = 0.0f;
    for (std::size_t i = 0; i + 1 < values.size(); ++i)
      gap = std::max(gap, values[i + 1] - values[i]);
    return gap;
  }
};

namespace detail {

// Standard normal quantile: rational initial guess, then Halley steps on erfc.
inline double normal_quantile(double p) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  for (int it = 0; it < 3; ++it) {
    double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x = x - u / (1.0 + 0.5 * x * u);
  }
  return x;
}

}  // namespace detail

/// 16-value NF4 codebook: 8 positive and 7 negative standard-normal quantiles
/// plus an exact zero, scaled so the extremes are exactly -1 and +1.
inline Nf4Codebook build_nf4_codebook() {
  // Outermost probability: midway between the 15- and 16-level symmetric offsets.
  const double offset = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));
  std::array<double, 16> v{};
  std::size_t k = 0;
  for (int i = 0; i < 8; ++i) v[k++] = detail::normal_quantile(offset + i * (0.5 - offset) / 8.0);
  for (int i = 0; i < 7; ++i) v[k++] = -detail::normal_quantile(offset + i * (0.5 - offset) / 7.0);
  v[k++] = 0.0;
  std::sort(v.begin(), v.end());
  const double top = v.back();

  Nf4Codebook cb;
  for (std::size_t i = 0; i < 16; ++i) cb.values[i] = static_cast<float>(v[i] / top);
  cb.values.front() = -1.0f;
  cb.values.back() = 1.0f;
  for (std::size_t i = 0; i < 15; ++i) cb.midpoints[i] = 0.5f * (cb.values[i] + cb.values[i + 1]);
  return cb;
}

/// Shared instance; the codebook is immutable after construction.
inline const Nf4Codebook& nf4() {
  static const Nf4Codebook cb = build_nf4_codebook();
  return cb;
}

inline std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
  std::vector<std::uint8_t> packed((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    auto nib = static_cast<std::uint8_t>(codes[i] & 0x0F);
    packed[i / 2] |= (i % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
  }
  return packed;
}

inline std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
  if (count > packed.size() * 2) throw DataError("corrupt code stream");
  std::vector<std::uint8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i)
    codes[i] = (i % 2 == 0) ? (packed[i / 2] & 0x0F) : (packed[i / 2] >> 4);
  return codes;
}

struct QuantizedTensor {
  std::vector<std::uint8_t> codes;  // packed nibbles, padded_numel() entries
  std::vector<float> scales;        // one absmax per block
  std::size_t block_size = kDefaultBlockSize;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string dtype_tag = "f32";

  std::size_t numel() const { return rows * cols; }
  std::size_t num_blocks() const { return (numel() + block_size - 1) / block_size; }
  std::size_t padded_numel() const { return num_blocks() * block_size; }

  std::uint8_t code_at(std::size_t i) const {
    return (i % 2 == 0) ? (codes[i / 2] & 0x0F) : (codes[i / 2] >> 4);
  }

  void validate() const {
    if (block_size == 0 || codes.size() != (padded_numel() + 1) / 2 ||
        scales.size() != num_blocks())
      throw DataError("corrupt code stream");
    for (float s : scales)
      if (!(s >= 0.0f) || !std::isfinite(s)) throw DataError("corrupt code stream");
  }
};

/// FNV-1a over codes and scale bytes; used to assert the base never moves.
inline std::uint64_t code_stream_hash(const QuantizedTensor& qt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(qt.codes.data(), qt.codes.size());
  feed(qt.scales.data(), qt.scales.size() * sizeof(float));
  return h;
}

template <class Real>
QuantizedTensor quantize_blockwise(std::span<const Real> data, std::size_t rows, std::size_t cols,
                                   std::size_t block_size, const Nf4Codebook& codebook = nf4()) {
  if (data.empty()) throw DataError("empty tensor");
  if (block_size == 0) throw ConfigError("block size must be positive");
  if (rows * cols != data.size()) throw ConfigError("shape does not match element count");

  QuantizedTensor qt;
  qt.block_size = block_size;
  qt.rows = rows;
  qt.cols = cols;
  qt.dtype_tag = sizeof(Real) == 8 ? "f64" : "f32";

  const std::size_t n = data.size();
  const std::size_t blocks = qt.num_blocks();
  const std::uint8_t zero = codebook.zero_index();
  std::vector<std::uint8_t> codes(qt.padded_numel(), zero);
  qt.scales.resize(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t lo = b * block_size;
    const std::size_t hi = std::min(n, lo + block_size);
    float absmax = 0.0f;
    for (std::size_t i = lo; i < hi; ++i) absmax = std::max(absmax, std::abs(static_cast<float>(data[i])));
    qt.scales[b] = absmax;
    if (absmax == 0.0f) continue;
    for (std::size_t i = lo; i < hi; ++i) codes[i] = codebook.nearest(static_cast<float>(data[i]) / absmax);
  }
  qt.codes = pack_nibbles(codes);
  return qt;
}

/// Single-row convenience overload.
template <class Real>
QuantizedTensor quantize_blockwise(std::span<const Real> data, std::size_t block_size,
                                   const Nf4Codebook& codebook = nf4()) {
  return quantize_blockwise<Real>(data, 1, data.size(), block_size, codebook);
}

template <class Real>
QuantizedTensor quantize_matrix(const Mat<Real>& m, std::size_t block_size = kDefaultBlockSize,
                                const Nf4Codebook& codebook = nf4()) {
  return quantize_blockwise<Real>(std::span<const Real>(m.data(), static_cast<std::size_t>(m.size())),
                                  static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()),
                                  block_size, codebook);
}

/// Element i = scales[i / block_size] * codebook[code_i]; padding is dropped.
inline std::vector<float> dequantize(const QuantizedTensor& qt, const Nf4Codebook& codebook = nf4()) {
  qt.validate();
  std::vector<float> out(qt.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = qt.scales[i / qt.block_size] * codebook[qt.code_at(i)];
  return out;
}

/// Dequantizes an unpacked code sequence; any index above 15 is rejected.
inline std::vector<float> dequantize_codes(std::span<const std::uint8_t> codes, std::span<const float> scales,
                                           std::size_t block_size, std::size_t numel,
                                           const Nf4Codebook& codebook = nf4()) {
  if (block_size == 0 || codes.size() < numel || scales.size() * block_size < numel)
    throw DataError("corrupt code stream");
  std::vector<float> out(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    if (codes[i] > 15) throw DataError("corrupt code stream");
    out[i] = scales[i / block_size] * codebook[codes[i]];
  }
  return out;
}

template <class Real>
Mat<Real> dequantize_matrix(const QuantizedTensor& qt, const Nf4Codebook& codebook = nf4()) {
  const std::vector<float> flat = dequantize(qt, codebook);
  Mat<Real> m(static_cast<Eigen::Index>(qt.rows), static_cast<Eigen::Index>(qt.cols));
  for (std::size_t i = 0; i < flat.size(); ++i) m.data()[i] = static_cast<Real>(flat[i]);
  return m;
}

}  // namespace tslam
