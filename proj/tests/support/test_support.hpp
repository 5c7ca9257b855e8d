#pragma once

// Test-only helpers: random tensors, a central finite-difference gradient
// oracle and brute-force reference computations. None of this calls into the
// library code paths it is used to check.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "distill_span/tensor.hpp"

namespace distill_span::testing {

inline Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed,
                                    double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

// Central differences of a scalar function with respect to every element of x.
inline Tensor<double> numeric_gradient(Tensor<double>& x,
                                       const std::function<double()>& f,
                                       double h = 1e-5) {
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f();
    x[i] = orig - h;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

// Sum of elementwise products: the scalar used to turn a tensor-valued op
// into a loss with upstream gradient `w`.
inline double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

inline Tensor<double> triple_loop_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Naive O(batch*len*k*c_in*c_out) separable convolution.
inline Tensor<double> naive_separable_conv(const Tensor<double>& x, const Tensor<double>& dk,
                                           const Tensor<double>& pk, const Tensor<double>& pb) {
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), K = dk.dim(0),
                    O = pk.dim(1);
  const long half = static_cast<long>(K / 2);
  Tensor<double> y({B, L, O});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t o = 0; o < O; ++o) {
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) {
          double d = 0;
          for (std::size_t j = 0; j < K; ++j) {
            const long src = static_cast<long>(t) + static_cast<long>(j) - half;
            if (src < 0 || src >= static_cast<long>(L)) continue;
            d += dk.at(j, c) * x.at(b, static_cast<std::size_t>(src), c);
          }
          s += d * pk.at(c, o);
        }
        y.at(b, t, o) = s + pb[o];
      }
  return y;
}

}  // namespace distill_span::testing
