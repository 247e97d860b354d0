#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "microbia/rng.hpp"
#include "microbia/tensor.hpp"

namespace testing {

using microbia::Rng;
using microbia::Shape;
using microbia::TensorD;

inline TensorD random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  TensorD t(shape);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

/// Central differences of a scalar function with respect to every element of `x`.
inline TensorD numeric_gradient(const std::function<double()>& f, TensorD& x, double h = 1e-5) {
  TensorD g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const TensorD& a, const TensorD& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(const TensorD& a, const TensorD& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Scalar probe sum(out * weights), so d probe / d out = weights.
inline double project(const TensorD& out, const TensorD& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
  return s;
}

/// Direct six-loop valid cross-correlation.
inline TensorD naive_conv(const TensorD& x, const TensorD& w, const TensorD& b) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  TensorD out({B, K, H - kh + 1, W - kw + 1});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i + kh <= H; ++i)
        for (std::size_t j = 0; j + kw <= W; ++j) {
          double s = b[k];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) s += x.at(n, c, i + u, j + v) * w.at(k, c, u, v);
          out.at(n, k, i, j) = s;
        }
  return out;
}

}  // namespace testing
