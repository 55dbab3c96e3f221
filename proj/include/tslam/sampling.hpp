#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "tslam/error.hpp"
#include "tslam/tensor.hpp"

namespace tslam {

struct NucleusEntry {
  std::size_t index;
  double prob;
};

template <class Real>
std::size_t argmax(std::span<const Real> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

/// softmax(logits / temperature) in double precision. temperature must be > 0.
template <class Real>
std::vector<double> softmax_with_temperature(std::span<const Real> logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive for softmax");
  std::vector<double> p(logits.size());
  double mx = -INFINITY;
  for (auto l : logits) mx = std::max(mx, static_cast<double>(l) / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

/// Smallest prefix of the probability-sorted tokens whose mass reaches top_p,
/// renormalized. Ties in probability keep the lower token index first.
inline std::vector<NucleusEntry> nucleus_filter(std::span<const double> probs, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  std::vector<NucleusEntry> order(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) order[i] = {i, probs[i]};
  std::stable_sort(order.begin(), order.end(),
                   [](const NucleusEntry& a, const NucleusEntry& b) { return a.prob > b.prob; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += order[keep].prob;
    ++keep;
    if (cum >= top_p) break;
  }
  order.resize(keep);
  for (auto& e : order) e.prob /= cum;
  return order;
}

/// Draws one token. temperature == 0 means greedy argmax.
template <class Real>
std::size_t sample_token(std::span<const Real> logits, double temperature, double top_p, Rng& rng) {
  if (temperature < 0.0) throw ConfigError("temperature must be non-negative");
  if (temperature == 0.0) return argmax(logits);
  const auto probs = softmax_with_temperature(logits, temperature);
  const auto nucleus = nucleus_filter(probs, top_p);
  const double u = uniform01(rng);
  double cum = 0.0;
  for (const auto& e : nucleus) {
    cum += e.prob;
    if (u < cum) return e.index;
  }
  return nucleus.back().index;
}

}  // namespace tslam
