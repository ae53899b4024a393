#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace actfocus {

/// log(sum_i exp(x_i)) in max-subtracted form. -inf for an empty input.
inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline void log_softmax(std::span<const double> x, std::span<double> out) {
  const double lse = log_sum_exp(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
}

/// Shannon entropy (nats) of softmax(x).
inline double softmax_entropy(std::span<const double> x) {
  const double lse = log_sum_exp(x);
  double h = 0.0;
  for (double v : x) {
    const double lp = v - lse;
    h -= std::exp(lp) * lp;
  }
  return h;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace actfocus
