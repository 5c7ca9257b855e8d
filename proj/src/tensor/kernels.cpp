#include "distill_span/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "distill_span/errors.hpp"

namespace distill_span::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::parallel};
std::atomic<bool> g_count_flops{false};
std::atomic<std::uint64_t> g_flops{0};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;

inline void count(std::uint64_t n) {
  if (g_count_flops.load(std::memory_order_relaxed)) {
    g_flops.fetch_add(n, std::memory_order_relaxed);
  }
}

constexpr double kMaskedScore = -1e9;

}  // namespace

Backend backend() noexcept { return g_backend.load(std::memory_order_relaxed); }
void set_backend(Backend b) noexcept { g_backend.store(b, std::memory_order_relaxed); }

void enable_flop_counter(bool on) noexcept { g_count_flops.store(on); }
void reset_flop_counter() noexcept { g_flops.store(0); }
std::uint64_t flop_count() noexcept { return g_flops.load(); }

// Shared with kernels_serial.cpp.
void add_flops(std::uint64_t n) { count(n); }

int max_threads() noexcept {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_max_threads(int n) noexcept {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  count(2ull * m * n * k);
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  ConstMap<T> A(a, ta == Trans::no ? em : ek, ta == Trans::no ? ek : em,
                Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
  ConstMap<T> B(b, tb == Trans::no ? ek : en, tb == Trans::no ? en : ek,
                Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));
  MutMap<T> C(c, em, en, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  if (beta == T{0}) {
    C.setZero();
  } else if (beta != T{1}) {
    C *= beta;
  }
  if (k == 0) return;
  if (ta == Trans::no && tb == Trans::no) {
    C.noalias() += alpha * A * B;
  } else if (ta == Trans::no) {
    C.noalias() += alpha * A * B.transpose();
  } else if (tb == Trans::no) {
    C.noalias() += alpha * A.transpose() * B;
  } else {
    C.noalias() += alpha * A.transpose() * B.transpose();
  }
}

template <typename T>
void depthwise_conv1d(std::size_t batch, std::size_t len, std::size_t channels,
                      std::size_t ksize, const T* x, const T* w, T* y) {
  count(2ull * batch * len * channels * ksize);
  const auto half = static_cast<std::ptrdiff_t>(ksize / 2);
  const auto L = static_cast<std::ptrdiff_t>(len);
  const auto rows = static_cast<std::ptrdiff_t>(batch * len);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::ptrdiff_t b = r / L;
    const std::ptrdiff_t t = r % L;
    T* out = y + r * static_cast<std::ptrdiff_t>(channels);
    std::fill(out, out + channels, T{0});
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(ksize); ++j) {
      const std::ptrdiff_t src = t + j - half;
      if (src < 0 || src >= L) continue;
      const T* in = x + (b * L + src) * static_cast<std::ptrdiff_t>(channels);
      const T* wj = w + j * static_cast<std::ptrdiff_t>(channels);
#pragma omp simd
      for (std::size_t c = 0; c < channels; ++c) out[c] += wj[c] * in[c];
    }
  }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x,
                  std::span<const std::uint8_t> mask, T* y) {
  const bool broadcast = mask.size() == cols && rows != 1;
  const auto R = static_cast<std::ptrdiff_t>(rows);
  bool degenerate = false;
#pragma omp parallel for schedule(static) reduction(|| : degenerate)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    const T* in = x + r * static_cast<std::ptrdiff_t>(cols);
    T* out = y + r * static_cast<std::ptrdiff_t>(cols);
    const std::uint8_t* m =
        mask.empty() ? nullptr
                     : mask.data() + (broadcast ? 0 : r * static_cast<std::ptrdiff_t>(cols));
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      const T s = (m && !m[c]) ? in[c] + static_cast<T>(kMaskedScore) : in[c];
      out[c] = s;
      mx = std::max(mx, s);
      any = any || !m || m[c];
    }
    if (!any) {
      degenerate = true;
      continue;
    }
    T sum = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = std::exp(out[c] - mx);
      sum += out[c];
    }
    const T inv = T{1} / sum;
    for (std::size_t c = 0; c < cols; ++c) out[c] *= inv;
  }
  if (degenerate) {
    throw DegenerateMaskError("softmax: every position of a slice is masked");
  }
}

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, const T* gain,
                     const T* bias, T eps, T* y, T* xhat, T* rstd) {
  const auto R = static_cast<std::ptrdiff_t>(rows);
  const auto C = static_cast<std::ptrdiff_t>(cols);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    const T* in = x + r * C;
    T mean = 0;
    for (std::ptrdiff_t c = 0; c < C; ++c) mean += in[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      const T d = in[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T inv = T{1} / std::sqrt(var + eps);
    if (rstd) rstd[r] = inv;
    T* out = y + r * C;
    T* xh = xhat ? xhat + r * C : nullptr;
#pragma omp simd
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      const T n = (in[c] - mean) * inv;
      if (xh) xh[c] = n;
      out[c] = n * gain[c] + bias[c];
    }
  }
}

template <typename T>
void gelu(std::size_t n, const T* x, T* y) {
  const auto N = static_cast<std::ptrdiff_t>(n);
  const T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
#pragma omp parallel for simd schedule(static)
  for (std::ptrdiff_t i = 0; i < N; ++i) {
    y[i] = x[i] * T{0.5} * (T{1} + std::erf(x[i] * inv_sqrt2));
  }
}

template <typename T>
void add_bias_rows(std::size_t rows, std::size_t cols, const T* bias, T* y) {
  const auto R = static_cast<std::ptrdiff_t>(rows);
  const auto C = static_cast<std::ptrdiff_t>(cols);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    T* out = y + r * C;
#pragma omp simd
    for (std::ptrdiff_t c = 0; c < C; ++c) out[c] += bias[c];
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

}  // namespace distill_span::kernels
