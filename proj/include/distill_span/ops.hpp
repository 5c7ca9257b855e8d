#pragma once

// Differentiable tensor operations. Each forward function optionally fills a
// tape with what its backward function needs; calling backward with a tape
// that was never filled raises MissingTapeError.

#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "distill_span/tensor.hpp"

namespace distill_span {

using Rng = std::mt19937_64;

enum class Mode { train, infer };

struct Tape {
  bool recorded = false;
};

// Throws MissingTapeError naming `op` unless the tape was recorded.
void require_recorded(const Tape& tape, const char* op);

// ---- matmul -----------------------------------------------------------------

template <typename T>
struct MatmulTape : Tape {
  Tensor<T> a;
  Tensor<T> b;
};

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, std::type_identity_t<MatmulTape<T>>* tape = nullptr);

template <typename T>
MatmulGrads<T> matmul_backward(const MatmulTape<T>& tape, const Tensor<T>& dy);

// ---- affine: y = x W + b over the last axis of x ------------------------------

template <typename T>
struct LinearTape : Tape {
  Tensor<T> x;
};

template <typename T>
struct LinearGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::type_identity_t<LinearTape<T>>* tape = nullptr);

template <typename T>
LinearGrads<T> linear_backward(const LinearTape<T>& tape, const Tensor<T>& w,
                               const Tensor<T>& dy);

// ---- softmax over the last axis -------------------------------------------------

template <typename T>
struct SoftmaxTape : Tape {
  Tensor<T> y;
};

// mask: empty, same size as scores, or last-axis length (broadcast). 0 = masked.
template <typename T>
Tensor<T> softmax(const Tensor<T>& scores, std::span<const std::uint8_t> mask = {},
                  std::type_identity_t<SoftmaxTape<T>>* tape = nullptr);

template <typename T>
Tensor<T> softmax_backward(const SoftmaxTape<T>& tape, const Tensor<T>& dy);

// ---- layer norm ---------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-12;

template <typename T>
struct LayerNormTape : Tape {
  Tensor<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
struct NormGrads {
  Tensor<T> dx;
  Tensor<T> dgain;
  Tensor<T> dbias;
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     std::type_identity_t<T> eps = static_cast<T>(kLayerNormEps),
                     std::type_identity_t<LayerNormTape<T>>* tape = nullptr);

template <typename T>
NormGrads<T> layer_norm_backward(const LayerNormTape<T>& tape, const Tensor<T>& gain,
                                 const Tensor<T>& dy);

// ---- batch norm (statistics per channel over every leading position) -----------

inline constexpr double kBatchNormEps = 1e-3;
inline constexpr double kBatchNormMomentum = 0.99;

template <typename T>
struct BatchNormState {
  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T{0}), running_var(channels, T{1}) {}
  std::vector<T> running_mean;
  std::vector<T> running_var;
  // False until a train step ran or statistics were loaded.
  bool initialized = false;
};

template <typename T>
struct BatchNormTape : Tape {
  Mode mode = Mode::train;
  Tensor<T> xhat;
  std::vector<T> rstd;
};

// In train mode, `update` (which may alias `state`) receives the
// momentum-blended running statistics. Infer mode reads `state` only.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     const BatchNormState<T>& state, Mode mode,
                     std::type_identity_t<T> momentum = static_cast<T>(kBatchNormMomentum),
                     std::type_identity_t<T> eps = static_cast<T>(kBatchNormEps),
                     std::type_identity_t<BatchNormTape<T>>* tape = nullptr,
                     std::type_identity_t<BatchNormState<T>>* update = nullptr);

template <typename T>
NormGrads<T> batch_norm_backward(const BatchNormTape<T>& tape, const Tensor<T>& gain,
                                 const Tensor<T>& dy);

// ---- activations --------------------------------------------------------------

struct Activation {
  enum class Kind { gelu, leaky_relu };
  Kind kind = Kind::gelu;
  double alpha = 0.2;

  static Activation gelu() { return {Kind::gelu, 0.0}; }
  static Activation leaky_relu(double alpha) { return {Kind::leaky_relu, alpha}; }
};

template <typename T>
struct ActivationTape : Tape {
  Tensor<T> x;
};

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation act,
                     std::type_identity_t<ActivationTape<T>>* tape = nullptr);

template <typename T>
Tensor<T> activation_backward(const ActivationTape<T>& tape, Activation act,
                              const Tensor<T>& dy);

// ---- depthwise separable 1-D convolution -------------------------------------

template <typename T>
struct SeparableConvTape : Tape {
  Tensor<T> x;
  Tensor<T> depthwise;  // per-channel convolution output, before pointwise mix
  std::size_t kernel_size = 0;
};

template <typename T>
struct SeparableConvGrads {
  Tensor<T> dx;
  Tensor<T> d_depth_kernel;
  Tensor<T> d_point_kernel;
  Tensor<T> d_point_bias;
};

// x: [batch x len x c_in], depth_kernel: [k x c_in], point_kernel: [c_in x c_out],
// point_bias: [c_out]. Stride 1 with symmetric zero padding; k must be odd.
template <typename T>
Tensor<T> depthwise_separable_conv1d(const Tensor<T>& x, const Tensor<T>& depth_kernel,
                                     const Tensor<T>& point_kernel,
                                     const Tensor<T>& point_bias,
                                     std::type_identity_t<SeparableConvTape<T>>* tape = nullptr);

template <typename T>
SeparableConvGrads<T> depthwise_separable_conv1d_backward(
    const SeparableConvTape<T>& tape, const Tensor<T>& depth_kernel,
    const Tensor<T>& point_kernel, const Tensor<T>& dy);

// ---- dropout ------------------------------------------------------------------

template <typename T>
struct DropoutTape : Tape {
  Tensor<T> scale;  // 0 or 1/(1-rate) per element
};

// Inverted dropout. rate == 0 returns x unchanged (and records a unit scale).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng,
                  std::type_identity_t<DropoutTape<T>>* tape = nullptr);

template <typename T>
Tensor<T> dropout_backward(const DropoutTape<T>& tape, const Tensor<T>& dy);

// ---- multi-head scaled dot-product attention ------------------------------------

template <typename T>
struct AttentionTape : Tape {
  Tensor<T> q, k, v;
  Tensor<T> probs;  // [batch x heads x len x len]
};

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

// q, k, v: [batch x len x d]. Head h uses columns [h*d/H, (h+1)*d/H).
// key_mask: empty or batch*len entries (0 = key excluded).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, std::span<const std::uint8_t> key_mask,
                               std::type_identity_t<AttentionTape<T>>* tape = nullptr);

template <typename T>
AttentionGrads<T> multi_head_attention_backward(const AttentionTape<T>& tape,
                                                std::size_t heads, const Tensor<T>& dy);

// ---- initialization -----------------------------------------------------------

// Zero-mean normal with sigma = sqrt(2 / (fan_in + fan_out)). fan_in is the
// product of all but the last axis, fan_out the last axis; a 1-axis shape uses
// its length for both.
template <typename T>
Tensor<T> glorot_normal_init(const Shape& shape, std::uint64_t seed);

template <typename T>
Tensor<T> glorot_normal_init(const Shape& shape, double fan_in, double fan_out,
                             std::uint64_t seed);

double glorot_sigma(double fan_in, double fan_out);

// Uniform double in [0, 1) from 53 random bits; identical on every platform.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace distill_span
