// Straight-line reference kernels. No vectorization hints, no threading.

#include <algorithm>
#include <cmath>
#include <limits>

#include "distill_span/errors.hpp"
#include "distill_span/kernels.hpp"

namespace distill_span::kernels {

void add_flops(std::uint64_t n);

namespace serial {

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  add_flops(2ull * m * n * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const T bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        acc += av * bv;
      }
      T& out = c[i * ldc + j];
      out = beta == T{0} ? alpha * acc : alpha * acc + beta * out;
    }
  }
}

template <typename T>
void depthwise_conv1d(std::size_t batch, std::size_t len, std::size_t channels,
                      std::size_t ksize, const T* x, const T* w, T* y) {
  add_flops(2ull * batch * len * channels * ksize);
  const std::size_t half = ksize / 2;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < channels; ++c) {
        T acc = 0;
        for (std::size_t j = 0; j < ksize; ++j) {
          if (t + j < half || t + j - half >= len) continue;
          acc += w[j * channels + c] * x[(b * len + t + j - half) * channels + c];
        }
        y[(b * len + t) * channels + c] = acc;
      }
    }
  }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x,
                  std::span<const std::uint8_t> mask, T* y) {
  const bool broadcast = mask.size() == cols && rows != 1;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m =
        mask.empty() ? nullptr : mask.data() + (broadcast ? 0 : r * cols);
    if (m && std::none_of(m, m + cols, [](std::uint8_t v) { return v != 0; })) {
      throw DegenerateMaskError("softmax: every position of a slice is masked");
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      T s = x[r * cols + c];
      if (m && !m[c]) s += static_cast<T>(-1e9);
      y[r * cols + c] = s;
      mx = std::max(mx, s);
    }
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[r * cols + c] = std::exp(y[r * cols + c] - mx);
      sum += y[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= sum;
  }
}

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, const T* gain,
                     const T* bias, T eps, T* y, T* xhat, T* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[r * cols + c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      var += (x[r * cols + c] - mean) * (x[r * cols + c] - mean);
    }
    var /= static_cast<T>(cols);
    const T inv = T{1} / std::sqrt(var + eps);
    if (rstd) rstd[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const T n = (x[r * cols + c] - mean) * inv;
      if (xhat) xhat[r * cols + c] = n;
      y[r * cols + c] = n * gain[c] + bias[c];
    }
  }
}

template <typename T>
void gelu(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = x[i] * T{0.5} * (T{1} + std::erf(x[i] / std::sqrt(T{2})));
  }
}

template <typename T>
void add_bias_rows(std::size_t rows, std::size_t cols, const T* bias, T* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += bias[c];
  }
}

#define DISTILL_SPAN_INSTANTIATE(T)                                                 \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, T,     \
                        const T*, std::size_t, const T*, std::size_t, T, T*,        \
                        std::size_t);                                               \
  template void depthwise_conv1d<T>(std::size_t, std::size_t, std::size_t,          \
                                    std::size_t, const T*, const T*, T*);           \
  template void softmax_rows<T>(std::size_t, std::size_t, const T*,                 \
                                std::span<const std::uint8_t>, T*);                 \
  template void layer_norm_rows<T>(std::size_t, std::size_t, const T*, const T*,    \
                                   const T*, T, T*, T*, T*);                        \
  template void gelu<T>(std::size_t, const T*, T*);                                 \
  template void add_bias_rows<T>(std::size_t, std::size_t, const T*, T*);

DISTILL_SPAN_INSTANTIATE(float)
DISTILL_SPAN_INSTANTIATE(double)

#undef DISTILL_SPAN_INSTANTIATE

}  // namespace serial
}  // namespace distill_span::kernels
