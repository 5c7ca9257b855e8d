#pragma once

// Raw-buffer compute kernels. Every kernel has an OpenMP-parallel version
// (namespace kernels) and a plain serial version (namespace kernels::serial)
// that is kept as the reference the parallel code is tested against.
// All matrices are row-major with an explicit leading dimension.

#include <cstddef>
#include <cstdint>
#include <span>

namespace distill_span::kernels {

enum class Trans { no, yes };

enum class Backend { parallel, serial };

// Process-wide kernel selection used by the tensor ops.
Backend backend() noexcept;
void set_backend(Backend b) noexcept;

class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : previous_(backend()) { set_backend(b); }
  ~ScopedBackend() { set_backend(previous_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend previous_;
};

// Counts multiply-add work (2 per MAC) in gemm and depthwise convolution
// while enabled. Elementwise kernels are not counted.
void enable_flop_counter(bool on) noexcept;
void reset_flop_counter() noexcept;
std::uint64_t flop_count() noexcept;

class FlopCounterScope {
 public:
  FlopCounterScope() {
    reset_flop_counter();
    enable_flop_counter(true);
  }
  ~FlopCounterScope() { enable_flop_counter(false); }
  std::uint64_t flops() const noexcept { return flop_count(); }
};

int max_threads() noexcept;
void set_max_threads(int n) noexcept;

// C[m x n] = alpha * op(A) * op(B) + beta * C. op(A) is m x k, op(B) is k x n.
// beta == 0 overwrites C without reading it.
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc);

// y[b, t, c] = sum_j w[j, c] * x[b, t + j - k/2, c] with zero padding.
template <typename T>
void depthwise_conv1d(std::size_t batch, std::size_t len, std::size_t channels,
                      std::size_t ksize, const T* x, const T* w, T* y);

// Row-wise softmax over `cols` entries. `mask`, when non-empty, has either
// rows*cols entries or cols entries broadcast across rows; zero means masked.
// Masked entries get -1e9 added before exponentiation.
template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x,
                  std::span<const std::uint8_t> mask, T* y);

// Row-wise layer normalization. xhat and rstd may be null.
template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, const T* gain,
                     const T* bias, T eps, T* y, T* xhat, T* rstd);

template <typename T>
void gelu(std::size_t n, const T* x, T* y);

// y[r, :] += bias
template <typename T>
void add_bias_rows(std::size_t rows, std::size_t cols, const T* bias, T* y);

namespace serial {

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc);

template <typename T>
void depthwise_conv1d(std::size_t batch, std::size_t len, std::size_t channels,
                      std::size_t ksize, const T* x, const T* w, T* y);

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x,
                  std::span<const std::uint8_t> mask, T* y);

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, const T* gain,
                     const T* bias, T eps, T* y, T* xhat, T* rstd);

template <typename T>
void gelu(std::size_t n, const T* x, T* y);

template <typename T>
void add_bias_rows(std::size_t rows, std::size_t cols, const T* bias, T* y);

}  // namespace serial

// Dispatch on backend().
namespace dispatch {

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c,
          std::size_t ldc) {
  if (backend() == Backend::serial) {
    serial::gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    kernels::gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

template <typename T>
void depthwise_conv1d(std::size_t batch, std::size_t len, std::size_t channels,
                      std::size_t ksize, const T* x, const T* w, T* y) {
  if (backend() == Backend::serial) {
    serial::depthwise_conv1d(batch, len, channels, ksize, x, w, y);
  } else {
    kernels::depthwise_conv1d(batch, len, channels, ksize, x, w, y);
  }
}

template <typename T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* x,
                  std::span<const std::uint8_t> mask, T* y) {
  if (backend() == Backend::serial) {
    serial::softmax_rows(rows, cols, x, mask, y);
  } else {
    kernels::softmax_rows(rows, cols, x, mask, y);
  }
}

template <typename T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* x, const T* gain,
                     const T* bias, T eps, T* y, T* xhat, T* rstd) {
  if (backend() == Backend::serial) {
    serial::layer_norm_rows(rows, cols, x, gain, bias, eps, y, xhat, rstd);
  } else {
    kernels::layer_norm_rows(rows, cols, x, gain, bias, eps, y, xhat, rstd);
  }
}

template <typename T>
void gelu(std::size_t n, const T* x, T* y) {
  if (backend() == Backend::serial) {
    serial::gelu(n, x, y);
  } else {
    kernels::gelu(n, x, y);
  }
}

template <typename T>
void add_bias_rows(std::size_t rows, std::size_t cols, const T* bias, T* y) {
  if (backend() == Backend::serial) {
    serial::add_bias_rows(rows, cols, bias, y);
  } else {
    kernels::add_bias_rows(rows, cols, bias, y);
  }
}

}  // namespace dispatch

}  // namespace distill_span::kernels
