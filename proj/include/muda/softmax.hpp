#pragma once

#include <algorithm>
#include <cmath>

#include "muda/matrix.hpp"

namespace muda {

// Row-wise log-softmax with max subtraction, finite for |logit| up to ~1e300.
inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    const double lse = m + std::log(s);
    auto o = out.row(i);
    for (std::size_t c = 0; c < z.size(); ++c) o[c] = z[c] - lse;
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    const double m = *std::max_element(z.begin(), z.end());
    auto o = out.row(i);
    double s = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) s += (o[c] = std::exp(z[c] - m));
    for (double& v : o) v /= s;
  }
  return out;
}

}  // namespace muda
