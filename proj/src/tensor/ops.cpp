#include "distill_span/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "distill_span/kernels.hpp"

namespace distill_span {

namespace kd = kernels::dispatch;
using kernels::Trans;

void require_recorded(const Tape& tape, const char* op) {
  if (!tape.recorded) {
    throw MissingTapeError(std::string(op) +
                           ": backward requested but the forward pass was not recorded");
  }
}

namespace {

Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

template <typename T>
void require_rank_at_least(const Tensor<T>& t, std::size_t r, const char* op) {
  if (t.rank() < r) {
    throw DimensionError(std::string(op) + ": expected rank >= " + std::to_string(r) +
                         ", got " + shape_to_string(t.shape()));
  }
}

template <typename T>
void require_vector(const Tensor<T>& t, std::size_t n, const char* op, const char* what) {
  if (t.rank() != 1 || t.dim(0) != n) {
    throw DimensionError(std::string(op) + ": " + what + " has shape " +
                         shape_to_string(t.shape()) + ", expected [" + std::to_string(n) +
                         "]");
  }
}

// Column sums of a rows x cols buffer.
template <typename T>
Tensor<T> column_sums(const Tensor<T>& t) {
  Tensor<T> out({t.cols()});
  const std::size_t rows = t.rows();
  const std::size_t cols = t.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = t.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += in[c];
  }
  return out;
}

}  // namespace

// ---- matmul -----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<MatmulTape<T>>* tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> y({m, n});
  kd::gemm<T>(Trans::no, Trans::no, m, n, k, T{1}, a.data(), k, b.data(), n, T{0},
              y.data(), n);
  if (tape) {
    tape->a = a;
    tape->b = b;
    tape->recorded = true;
  }
  return y;
}

template <typename T>
MatmulGrads<T> matmul_backward(const MatmulTape<T>& tape, const Tensor<T>& dy) {
  require_recorded(tape, "matmul");
  const std::size_t m = tape.a.dim(0), k = tape.a.dim(1), n = tape.b.dim(1);
  if (dy.shape() != Shape{m, n}) {
    throw DimensionError("matmul backward: upstream " + shape_to_string(dy.shape()) +
                         " vs output [" + std::to_string(m) + "x" + std::to_string(n) + "]");
  }
  MatmulGrads<T> g{Tensor<T>({m, k}), Tensor<T>({k, n})};
  kd::gemm<T>(Trans::no, Trans::yes, m, k, n, T{1}, dy.data(), n, tape.b.data(), n, T{0},
              g.da.data(), k);
  kd::gemm<T>(Trans::yes, Trans::no, k, n, m, T{1}, tape.a.data(), k, dy.data(), n, T{0},
              g.db.data(), n);
  return g;
}

// ---- linear -------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::type_identity_t<LinearTape<T>>* tape) {
  require_rank_at_least(x, 1, "linear");
  if (w.rank() != 2 || w.dim(0) != x.cols()) {
    throw DimensionError("linear: input " + shape_to_string(x.shape()) +
                         " does not match weight " + shape_to_string(w.shape()));
  }
  const std::size_t in = w.dim(0), out = w.dim(1), rows = x.rows();
  require_vector(b, out, "linear", "bias");
  Tensor<T> y(with_last(x.shape(), out));
  kd::gemm<T>(Trans::no, Trans::no, rows, out, in, T{1}, x.data(), in, w.data(), out,
              T{0}, y.data(), out);
  kd::add_bias_rows<T>(rows, out, b.data(), y.data());
  if (tape) {
    tape->x = x;
    tape->recorded = true;
  }
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const LinearTape<T>& tape, const Tensor<T>& w,
                               const Tensor<T>& dy) {
  require_recorded(tape, "linear");
  const std::size_t in = w.dim(0), out = w.dim(1), rows = tape.x.rows();
  if (dy.cols() != out || dy.rows() != rows) {
    throw DimensionError("linear backward: upstream " + shape_to_string(dy.shape()) +
                         " does not match weight " + shape_to_string(w.shape()));
  }
  LinearGrads<T> g{Tensor<T>(tape.x.shape()), Tensor<T>({in, out}), column_sums(dy)};
  kd::gemm<T>(Trans::no, Trans::yes, rows, in, out, T{1}, dy.data(), out, w.data(), out,
              T{0}, g.dx.data(), in);
  kd::gemm<T>(Trans::yes, Trans::no, in, out, rows, T{1}, tape.x.data(), in, dy.data(),
              out, T{0}, g.dw.data(), out);
  return g;
}

// ---- softmax ------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& scores, std::span<const std::uint8_t> mask,
                  std::type_identity_t<SoftmaxTape<T>>* tape) {
  require_rank_at_least(scores, 1, "softmax");
  if (!mask.empty() && mask.size() != scores.size() && mask.size() != scores.cols()) {
    throw DimensionError("softmax: mask of " + std::to_string(mask.size()) +
                         " entries does not fit scores " + shape_to_string(scores.shape()));
  }
  Tensor<T> y(scores.shape());
  kd::softmax_rows<T>(scores.rows(), scores.cols(), scores.data(), mask, y.data());
  if (tape) {
    tape->y = y;
    tape->recorded = true;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const SoftmaxTape<T>& tape, const Tensor<T>& dy) {
  require_recorded(tape, "softmax");
  tape.y.require_same_shape(dy, "softmax backward");
  Tensor<T> dx(dy.shape());
  const std::size_t rows = dy.rows(), cols = dy.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* y = tape.y.data() + r * cols;
    const T* g = dy.data() + r * cols;
    T dot = 0;
    for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
    T* out = dx.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] = y[c] * (g[c] - dot);
  }
  return dx;
}

// ---- layer norm ---------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     std::type_identity_t<T> eps, std::type_identity_t<LayerNormTape<T>>* tape) {
  require_rank_at_least(x, 1, "layer_norm");
  require_vector(gain, x.cols(), "layer_norm", "gain");
  require_vector(bias, x.cols(), "layer_norm", "bias");
  if (!(eps > T{0})) throw ParameterError("layer_norm: eps must be positive");
  Tensor<T> y(x.shape());
  if (tape) {
    tape->xhat = Tensor<T>(x.shape());
    tape->rstd.assign(x.rows(), T{0});
    tape->recorded = true;
  }
  kd::layer_norm_rows<T>(x.rows(), x.cols(), x.data(), gain.data(), bias.data(), eps,
                         y.data(), tape ? tape->xhat.data() : nullptr,
                         tape ? tape->rstd.data() : nullptr);
  return y;
}

template <typename T>
NormGrads<T> layer_norm_backward(const LayerNormTape<T>& tape, const Tensor<T>& gain,
                                 const Tensor<T>& dy) {
  require_recorded(tape, "layer_norm");
  tape.xhat.require_same_shape(dy, "layer_norm backward");
  const std::size_t rows = dy.rows(), cols = dy.cols();
  NormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({cols}), Tensor<T>({cols})};
  const auto R = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    const T* xh = tape.xhat.data() + r * cols;
    const T* d = dy.data() + r * cols;
    T sum = 0, sum_xh = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const T dxh = d[c] * gain[c];
      sum += dxh;
      sum_xh += dxh * xh[c];
    }
    const T inv_n = T{1} / static_cast<T>(cols);
    T* out = g.dx.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      const T dxh = d[c] * gain[c];
      out[c] = tape.rstd[r] * (dxh - sum * inv_n - xh[c] * sum_xh * inv_n);
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      g.dgain[c] += dy[r * cols + c] * tape.xhat[r * cols + c];
      g.dbias[c] += dy[r * cols + c];
    }
  }
  return g;
}

// ---- batch norm ---------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     const BatchNormState<T>& state, Mode mode, std::type_identity_t<T> momentum, std::type_identity_t<T> eps,
                     std::type_identity_t<BatchNormTape<T>>* tape, std::type_identity_t<BatchNormState<T>>* update) {
  require_rank_at_least(x, 2, "batch_norm");
  const std::size_t rows = x.rows(), ch = x.cols();
  require_vector(gain, ch, "batch_norm", "gain");
  require_vector(bias, ch, "batch_norm", "bias");
  if (state.running_mean.size() != ch || state.running_var.size() != ch) {
    throw DimensionError("batch_norm: running statistics have " +
                         std::to_string(state.running_mean.size()) + " channels, input " +
                         shape_to_string(x.shape()));
  }
  if (!(eps > T{0})) throw ParameterError("batch_norm: eps must be positive");

  std::vector<T> mean(ch, T{0}), var(ch, T{0});
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < ch; ++c) mean[c] += x[r * ch + c];
    }
    for (std::size_t c = 0; c < ch; ++c) mean[c] /= static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < ch; ++c) {
        const T d = x[r * ch + c] - mean[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < ch; ++c) var[c] /= static_cast<T>(rows);
  } else {
    if (!state.initialized) {
      throw UninitializedStatisticsError(
          "batch_norm: inference requested before any training step or loaded statistics");
    }
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<T> rstd(ch);
  for (std::size_t c = 0; c < ch; ++c) rstd[c] = T{1} / std::sqrt(var[c] + eps);

  Tensor<T> y(x.shape());
  if (tape) {
    tape->xhat = Tensor<T>(x.shape());
    tape->mode = mode;
  }
  const auto R = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T n = (x[r * ch + c] - mean[c]) * rstd[c];
      if (tape) tape->xhat[r * ch + c] = n;
      y[r * ch + c] = n * gain[c] + bias[c];
    }
  }
  if (tape) {
    tape->rstd = rstd;
    tape->recorded = true;
  }

  if (mode == Mode::train && update) {
    update->running_mean.resize(ch);
    update->running_var.resize(ch);
    for (std::size_t c = 0; c < ch; ++c) {
      update->running_mean[c] = momentum * state.running_mean[c] + (T{1} - momentum) * mean[c];
      update->running_var[c] = momentum * state.running_var[c] + (T{1} - momentum) * var[c];
    }
    update->initialized = true;
  }
  return y;
}

template <typename T>
NormGrads<T> batch_norm_backward(const BatchNormTape<T>& tape, const Tensor<T>& gain,
                                 const Tensor<T>& dy) {
  require_recorded(tape, "batch_norm");
  tape.xhat.require_same_shape(dy, "batch_norm backward");
  const std::size_t rows = dy.rows(), ch = dy.cols();
  NormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({ch}), Tensor<T>({ch})};
  std::vector<T> sum(ch, T{0}), sum_xh(ch, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T d = dy[r * ch + c];
      g.dgain[c] += d * tape.xhat[r * ch + c];
      g.dbias[c] += d;
      sum[c] += d * gain[c];
      sum_xh[c] += d * gain[c] * tape.xhat[r * ch + c];
    }
  }
  const T inv_n = T{1} / static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T dxh = dy[r * ch + c] * gain[c];
      if (tape.mode == Mode::train) {
        g.dx[r * ch + c] = tape.rstd[c] * (dxh - sum[c] * inv_n -
                                           tape.xhat[r * ch + c] * sum_xh[c] * inv_n);
      } else {
        g.dx[r * ch + c] = tape.rstd[c] * dxh;
      }
    }
  }
  return g;
}

// ---- activations --------------------------------------------------------------

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation act, std::type_identity_t<ActivationTape<T>>* tape) {
  Tensor<T> y(x.shape());
  if (act.kind == Activation::Kind::gelu) {
    kd::gelu<T>(x.size(), x.data(), y.data());
  } else {
    const T alpha = static_cast<T>(act.alpha);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T{0} ? x[i] : alpha * x[i];
  }
  if (tape) {
    tape->x = x;
    tape->recorded = true;
  }
  return y;
}

template <typename T>
Tensor<T> activation_backward(const ActivationTape<T>& tape, Activation act,
                              const Tensor<T>& dy) {
  require_recorded(tape, "activation");
  tape.x.require_same_shape(dy, "activation backward");
  Tensor<T> dx(dy.shape());
  if (act.kind == Activation::Kind::gelu) {
    const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
    const T inv_sqrt_2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T x = tape.x[i];
      const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * x * x);
      dx[i] = dy[i] * (cdf + x * pdf);
    }
  } else {
    const T alpha = static_cast<T>(act.alpha);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      dx[i] = tape.x[i] >= T{0} ? dy[i] : alpha * dy[i];
    }
  }
  return dx;
}

// ---- depthwise separable conv -------------------------------------------------

template <typename T>
Tensor<T> depthwise_separable_conv1d(const Tensor<T>& x, const Tensor<T>& depth_kernel,
                                     const Tensor<T>& point_kernel,
                                     const Tensor<T>& point_bias,
                                     std::type_identity_t<SeparableConvTape<T>>* tape) {
  if (x.rank() != 3) {
    throw DimensionError("depthwise_separable_conv1d: input must be [batch x len x c], got " +
                         shape_to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), len = x.dim(1), cin = x.dim(2);
  if (depth_kernel.rank() != 2 || depth_kernel.dim(1) != cin) {
    throw DimensionError("depthwise_separable_conv1d: depth kernel " +
                         shape_to_string(depth_kernel.shape()) + " vs input " +
                         shape_to_string(x.shape()));
  }
  const std::size_t k = depth_kernel.dim(0);
  if (k % 2 == 0) {
    throw UnsupportedKernelError("depthwise_separable_conv1d: kernel size " +
                                 std::to_string(k) + " is even; only odd sizes are supported");
  }
  Tensor<T> depthwise({batch, len, cin});
  kd::depthwise_conv1d<T>(batch, len, cin, k, x.data(), depth_kernel.data(),
                          depthwise.data());
  Tensor<T> y = linear(depthwise, point_kernel, point_bias);
  if (tape) {
    tape->x = x;
    tape->depthwise = std::move(depthwise);
    tape->kernel_size = k;
    tape->recorded = true;
  }
  return y;
}

template <typename T>
SeparableConvGrads<T> depthwise_separable_conv1d_backward(const SeparableConvTape<T>& tape,
                                                          const Tensor<T>& depth_kernel,
                                                          const Tensor<T>& point_kernel,
                                                          const Tensor<T>& dy) {
  require_recorded(tape, "depthwise_separable_conv1d");
  LinearTape<T> pw;
  pw.x = tape.depthwise;
  pw.recorded = true;
  LinearGrads<T> lg = linear_backward(pw, point_kernel, dy);

  const std::size_t batch = tape.x.dim(0), len = tape.x.dim(1), cin = tape.x.dim(2);
  const std::size_t k = tape.kernel_size;
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto L = static_cast<std::ptrdiff_t>(len);
  const Tensor<T>& dd = lg.dx;  // gradient wrt depthwise output

  SeparableConvGrads<T> g;
  g.dx = Tensor<T>(tape.x.shape());
  g.d_depth_kernel = Tensor<T>(depth_kernel.shape());
  g.d_point_kernel = std::move(lg.dw);
  g.d_point_bias = std::move(lg.db);

  // dx[b, s, c] = sum_j dd[b, s - j + half, c] * w[j, c]
  const auto rows = static_cast<std::ptrdiff_t>(batch * len);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::ptrdiff_t b = r / L, s = r % L;
    T* out = g.dx.data() + r * static_cast<std::ptrdiff_t>(cin);
    for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(k); ++j) {
      const std::ptrdiff_t t = s - j + half;
      if (t < 0 || t >= L) continue;
      const T* up = dd.data() + (b * L + t) * static_cast<std::ptrdiff_t>(cin);
      const T* w = depth_kernel.data() + j * static_cast<std::ptrdiff_t>(cin);
      for (std::size_t c = 0; c < cin; ++c) out[c] += up[c] * w[c];
    }
  }
  // dW[j, c] = sum_{b,t} dd[b, t, c] * x[b, t + j - half, c]
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(k); ++j) {
    T* out = g.d_depth_kernel.data() + j * static_cast<std::ptrdiff_t>(cin);
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch); ++b) {
      for (std::ptrdiff_t t = 0; t < L; ++t) {
        const std::ptrdiff_t src = t + j - half;
        if (src < 0 || src >= L) continue;
        const T* up = dd.data() + (b * L + t) * static_cast<std::ptrdiff_t>(cin);
        const T* in = tape.x.data() + (b * L + src) * static_cast<std::ptrdiff_t>(cin);
        for (std::size_t c = 0; c < cin; ++c) out[c] += up[c] * in[c];
      }
    }
  }
  return g;
}

// ---- dropout ------------------------------------------------------------------

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, std::type_identity_t<DropoutTape<T>>* tape) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  Tensor<T> scale(x.shape(), T{1});
  if (rate > 0.0) {
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (std::size_t i = 0; i < scale.size(); ++i) {
      scale[i] = uniform01(rng) < rate ? T{0} : keep;
    }
  }
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * scale[i];
  if (tape) {
    tape->scale = std::move(scale);
    tape->recorded = true;
  }
  return y;
}

template <typename T>
Tensor<T> dropout_backward(const DropoutTape<T>& tape, const Tensor<T>& dy) {
  require_recorded(tape, "dropout");
  tape.scale.require_same_shape(dy, "dropout backward");
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * tape.scale[i];
  return dx;
}

// ---- attention ----------------------------------------------------------------

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, std::span<const std::uint8_t> key_mask,
                               std::type_identity_t<AttentionTape<T>>* tape) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q " + shape_to_string(q.shape()) + ", k " +
                         shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
  }
  const std::size_t batch = q.dim(0), len = q.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!key_mask.empty()) {
    if (key_mask.size() != batch * len) {
      throw DimensionError("attention: key mask has " + std::to_string(key_mask.size()) +
                           " entries, expected " + std::to_string(batch * len));
    }
    for (std::size_t b = 0; b < batch; ++b) {
      auto m = key_mask.subspan(b * len, len);
      if (std::none_of(m.begin(), m.end(), [](std::uint8_t x) { return x != 0; })) {
        throw DegenerateMaskError("attention: every key of batch element " +
                                  std::to_string(b) + " is masked");
      }
    }
  }
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> out({batch, len, d});
  if (tape) tape->probs = Tensor<T>({batch, heads, len, len});

  const auto jobs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel
  {
    std::vector<T> scores(len * len), probs(len * len);
#pragma omp for schedule(dynamic)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / heads;
      const std::size_t h = static_cast<std::size_t>(job) % heads;
      const std::size_t base = b * len * d + h * dh;
      kd::gemm<T>(Trans::no, Trans::yes, len, len, dh, scale, q.data() + base, d,
                  k.data() + base, d, T{0}, scores.data(), len);
      auto m = key_mask.empty() ? std::span<const std::uint8_t>{}
                                : key_mask.subspan(b * len, len);
      T* p = tape ? tape->probs.data() + static_cast<std::size_t>(job) * len * len
                  : probs.data();
      kd::softmax_rows<T>(len, len, scores.data(), m, p);
      kd::gemm<T>(Trans::no, Trans::no, len, dh, len, T{1}, p, len, v.data() + base, d,
                  T{0}, out.data() + base, d);
    }
  }
  if (tape) {
    tape->q = q;
    tape->k = k;
    tape->v = v;
    tape->recorded = true;
  }
  return out;
}

template <typename T>
AttentionGrads<T> multi_head_attention_backward(const AttentionTape<T>& tape,
                                                std::size_t heads, const Tensor<T>& dy) {
  require_recorded(tape, "attention");
  tape.q.require_same_shape(dy, "attention backward");
  const std::size_t batch = dy.dim(0), len = dy.dim(1), d = dy.dim(2);
  const std::size_t dh = d / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  AttentionGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>(dy.shape()), Tensor<T>(dy.shape())};

  const auto jobs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel
  {
    std::vector<T> dp(len * len);
#pragma omp for schedule(dynamic)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / heads;
      const std::size_t h = static_cast<std::size_t>(job) % heads;
      const std::size_t base = b * len * d + h * dh;
      const T* p = tape.probs.data() + static_cast<std::size_t>(job) * len * len;
      // dV = P^T dY ; dP = dY V^T
      kd::gemm<T>(Trans::yes, Trans::no, len, dh, len, T{1}, p, len, dy.data() + base, d,
                  T{0}, g.dv.data() + base, d);
      kd::gemm<T>(Trans::no, Trans::yes, len, len, dh, T{1}, dy.data() + base, d,
                  tape.v.data() + base, d, T{0}, dp.data(), len);
      // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
      for (std::size_t i = 0; i < len; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += dp[i * len + j] * p[i * len + j];
        for (std::size_t j = 0; j < len; ++j) {
          dp[i * len + j] = p[i * len + j] * (dp[i * len + j] - dot) * scale;
        }
      }
      kd::gemm<T>(Trans::no, Trans::no, len, dh, len, T{1}, dp.data(), len,
                  tape.k.data() + base, d, T{0}, g.dq.data() + base, d);
      kd::gemm<T>(Trans::yes, Trans::no, len, dh, len, T{1}, dp.data(), len,
                  tape.q.data() + base, d, T{0}, g.dk.data() + base, d);
    }
  }
  return g;
}

// ---- init ---------------------------------------------------------------------

double glorot_sigma(double fan_in, double fan_out) {
  return std::sqrt(2.0 / (fan_in + fan_out));
}

template <typename T>
Tensor<T> glorot_normal_init(const Shape& shape, double fan_in, double fan_out,
                             std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, glorot_sigma(fan_in, fan_out));
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
Tensor<T> glorot_normal_init(const Shape& shape, std::uint64_t seed) {
  if (shape.empty()) throw DimensionError("glorot_normal_init: empty shape");
  double fan_in = 0, fan_out = 0;
  if (shape.size() == 1) {
    fan_in = fan_out = static_cast<double>(shape[0]);
  } else {
    fan_out = static_cast<double>(shape.back());
    fan_in = static_cast<double>(shape_size(shape) / shape.back());
  }
  return glorot_normal_init<T>(shape, fan_in, fan_out, seed);
}

#define DISTILL_SPAN_INSTANTIATE(T)                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, MatmulTape<T>*);        \
  template MatmulGrads<T> matmul_backward(const MatmulTape<T>&, const Tensor<T>&);      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                            LinearTape<T>*);                                            \
  template LinearGrads<T> linear_backward(const LinearTape<T>&, const Tensor<T>&,       \
                                          const Tensor<T>&);                            \
  template Tensor<T> softmax(const Tensor<T>&, std::span<const std::uint8_t>,           \
                             SoftmaxTape<T>*);                                          \
  template Tensor<T> softmax_backward(const SoftmaxTape<T>&, const Tensor<T>&);         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                T, LayerNormTape<T>*);                                  \
  template NormGrads<T> layer_norm_backward(const LayerNormTape<T>&, const Tensor<T>&,  \
                                            const Tensor<T>&);                          \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                const BatchNormState<T>&, Mode, T, T,                   \
                                BatchNormTape<T>*, BatchNormState<T>*);                 \
  template NormGrads<T> batch_norm_backward(const BatchNormTape<T>&, const Tensor<T>&,  \
                                            const Tensor<T>&);                          \
  template Tensor<T> activation(const Tensor<T>&, Activation, ActivationTape<T>*);      \
  template Tensor<T> activation_backward(const ActivationTape<T>&, Activation,          \
                                         const Tensor<T>&);                             \
  template Tensor<T> depthwise_separable_conv1d(const Tensor<T>&, const Tensor<T>&,     \
                                                const Tensor<T>&, const Tensor<T>&,     \
                                                SeparableConvTape<T>*);                 \
  template SeparableConvGrads<T> depthwise_separable_conv1d_backward(                   \
      const SeparableConvTape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&, DropoutTape<T>*);          \
  template Tensor<T> dropout_backward(const DropoutTape<T>&, const Tensor<T>&);         \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&,           \
                                          const Tensor<T>&, std::size_t,                \
                                          std::span<const std::uint8_t>,                \
                                          AttentionTape<T>*);                           \
  template AttentionGrads<T> multi_head_attention_backward(                             \
      const AttentionTape<T>&, std::size_t, const Tensor<T>&);                          \
  template Tensor<T> glorot_normal_init(const Shape&, std::uint64_t);                   \
  template Tensor<T> glorot_normal_init(const Shape&, double, double, std::uint64_t);

DISTILL_SPAN_INSTANTIATE(float)
DISTILL_SPAN_INSTANTIATE(double)

#undef DISTILL_SPAN_INSTANTIATE

}  // namespace distill_span
