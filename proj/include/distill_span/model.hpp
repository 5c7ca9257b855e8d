#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distill_span/model_config.hpp"
#include "distill_span/ops.hpp"
#include "distill_span/parameter.hpp"
#include "distill_span/tensor.hpp"
#include "distill_span/windows.hpp"

namespace distill_span {

// Row-major [size x length] id/mask arrays for a batch of windows.
struct Batch {
  std::size_t size = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> segment_ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::size_t> question_len;
};

Batch make_batch(std::span<const WindowFeature> windows);
Batch make_batch(std::span<const WindowFeature* const> windows);

// ---- embedding ------------------------------------------------------------------

template <typename T>
struct EmbeddingTape : Tape {
  LayerNormTape<T> norm;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> segment_ids;
  std::size_t length = 0;
};

template <typename T>
class Embedding {
 public:
  static constexpr std::size_t kSegments = 3;

  Embedding(std::size_t vocab, std::size_t positions, std::size_t dim, std::uint64_t seed,
            const std::string& prefix = "embedding");

  // Output [batch x length x dim]. Ids outside a table raise DataError.
  Tensor<T> forward(const Batch& batch, EmbeddingTape<T>* tape = nullptr) const;
  void backward(const EmbeddingTape<T>& tape, const Tensor<T>& dy);

  void collect(ParameterList<T>& out);
  void collect(ConstParameterList<T>& out) const;

  Parameter<T> token, position, segment, gain, bias;
};

// ---- multi-window convolution -----------------------------------------------------

template <typename T>
struct ConvBranch {
  std::size_t kernel_size = 0;
  Parameter<T> depth, point, point_bias, bn_gain, bn_bias;
  BatchNormState<T> stats;
};

template <typename T>
struct ConvBranchTape {
  SeparableConvTape<T> conv;
  BatchNormTape<T> norm;
  ActivationTape<T> act;
};

template <typename T>
struct ConvTape : Tape {
  std::vector<ConvBranchTape<T>> branches;
};

// One depthwise-separable branch per kernel size, each followed by batch norm
// and a leaky ReLU; branch outputs are concatenated on the channel axis.
template <typename T>
class MultiWindowConv {
 public:
  MultiWindowConv(std::size_t in_dim, const std::vector<std::size_t>& kernel_sizes,
                  std::size_t filters, double leaky_alpha, std::uint64_t seed,
                  const std::string& prefix = "conv");

  std::size_t out_dim() const noexcept { return filters_ * branches_.size(); }

  // Train mode normalizes with batch statistics and folds them into the running stats.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, ConvTape<T>* tape = nullptr);
  Tensor<T> infer(const Tensor<T>& x) const;
  Tensor<T> backward(const ConvTape<T>& tape, const Tensor<T>& dy);

  std::vector<ConvBranch<T>>& branches() noexcept { return branches_; }
  const std::vector<ConvBranch<T>>& branches() const noexcept { return branches_; }
  void collect(ParameterList<T>& out);
  void collect(ConstParameterList<T>& out) const;

 private:
  Tensor<T> run(const Tensor<T>& x, Mode mode, ConvTape<T>* tape, bool update) const;

  std::size_t filters_;
  Activation act_;
  mutable std::vector<ConvBranch<T>> branches_;
};

// ---- encoder layer ----------------------------------------------------------------

template <typename T>
struct EncoderTape : Tape {
  LinearTape<T> q, k, v, a, i, o;
  DropoutTape<T> dq, dk, dv, da, di, dout;
  AttentionTape<T> att;
  LayerNormTape<T> ln1, ln2;
  ActivationTape<T> gelu;
};

template <typename T>
class EncoderLayer {
 public:
  EncoderLayer(std::size_t width, std::size_t heads, std::size_t ffn_inner, std::uint64_t seed,
               const std::string& prefix);

  std::size_t width() const noexcept { return wq.value.dim(0); }
  std::size_t heads() const noexcept { return heads_; }

  // key_mask: empty (attend everywhere) or batch*len entries. rng is required
  // when mode is train and dropout > 0.
  Tensor<T> forward(const Tensor<T>& x, std::span<const std::uint8_t> key_mask, Mode mode,
                    double dropout, Rng* rng, EncoderTape<T>* tape = nullptr) const;
  Tensor<T> backward(const EncoderTape<T>& tape, const Tensor<T>& dy);

  void collect(ParameterList<T>& out);
  void collect(ConstParameterList<T>& out) const;

  // Per-head Q/K/V projections are stored side by side: head j owns columns
  // [j*d/H, (j+1)*d/H) of wq, wk, wv and the matching bias entries.
  Parameter<T> wq, bq, wk, bk, wv, bv, wa, ba, wi, bi, wo, bo, ln1_gain, ln1_bias, ln2_gain,
      ln2_bias;

 private:
  std::size_t heads_;
};

// Sequential encoder layers; consecutive widths must agree.
template <typename T>
class EncoderStack {
 public:
  explicit EncoderStack(std::vector<EncoderLayer<T>> layers);

  Tensor<T> forward(const Tensor<T>& x, std::span<const std::uint8_t> key_mask, Mode mode,
                    double dropout, Rng* rng, std::vector<EncoderTape<T>>* tapes = nullptr) const;
  Tensor<T> backward(const std::vector<EncoderTape<T>>& tapes, const Tensor<T>& dy);

  std::size_t size() const noexcept { return layers_.size(); }
  EncoderLayer<T>& operator[](std::size_t i) { return layers_[i]; }
  const EncoderLayer<T>& operator[](std::size_t i) const { return layers_[i]; }
  void collect(ParameterList<T>& out);
  void collect(ConstParameterList<T>& out) const;

 private:
  std::vector<EncoderLayer<T>> layers_;
};

// ---- span head ---------------------------------------------------------------------

template <typename T>
struct SpanHeadTape : Tape {
  LinearTape<T> affine;
  std::vector<std::size_t> rows;  // physical row of each scored position
  Shape input_shape;
};

// Drops the mid-sequence pads, then scores start (column 0) and end (column 1).
template <typename T>
class SpanHead {
 public:
  SpanHead(std::size_t width, std::size_t scorable, std::size_t mid_pads, std::uint64_t seed,
           const std::string& prefix = "span_head");

  // psi [batch x physical x d] -> z [batch x scorable x 2].
  Tensor<T> forward(const Tensor<T>& psi, std::span<const std::size_t> question_len,
                    SpanHeadTape<T>* tape = nullptr) const;
  Tensor<T> backward(const SpanHeadTape<T>& tape, const Tensor<T>& dz);

  void collect(ParameterList<T>& out);
  void collect(ConstParameterList<T>& out) const;

  Parameter<T> w, b;

 private:
  std::size_t scorable_, mid_pads_;
};

// ---- full model ----------------------------------------------------------------------

template <typename T>
struct ModelTape : Tape {
  EmbeddingTape<T> embedding;
  ConvTape<T> conv;
  std::vector<EncoderTape<T>> encoder;
  SpanHeadTape<T> head;
};

template <typename T>
class SpanModel {
 public:
  // Glorot-normal weights, zero biases, unit norm gains; every parameter gets
  // its own stream derived from `seed` and its name.
  SpanModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  // z: [batch x scorable x 2]. Train mode applies dropout from `rng` and
  // updates batch-norm running statistics.
  Tensor<T> forward(const Batch& batch, Mode mode, Rng* rng = nullptr,
                    ModelTape<T>* tape = nullptr);
  Tensor<T> infer(const Batch& batch) const;
  // Accumulates into every trainable parameter's grad.
  void backward(const ModelTape<T>& tape, const Tensor<T>& dz);

  ParameterList<T> parameters();
  ConstParameterList<T> parameters() const;
  void zero_grad();

  // Swap in a pretrained token table, which is then frozen.
  void set_token_table(const Tensor<T>& table);

  Embedding<T>& embedding() noexcept { return embedding_; }
  const Embedding<T>& embedding() const noexcept { return embedding_; }
  MultiWindowConv<T>* conv() noexcept { return conv_ ? &*conv_ : nullptr; }
  const MultiWindowConv<T>* conv() const noexcept { return conv_ ? &*conv_ : nullptr; }
  EncoderStack<T>& encoder() noexcept { return encoder_; }
  const EncoderStack<T>& encoder() const noexcept { return encoder_; }
  SpanHead<T>& head() noexcept { return head_; }
  const SpanHead<T>& head() const noexcept { return head_; }

 private:
  std::span<const std::uint8_t> key_mask(const Batch& batch) const;
  void check_batch(const Batch& batch) const;

  ModelConfig config_;
  Embedding<T> embedding_;
  std::optional<MultiWindowConv<T>> conv_;
  EncoderStack<T> encoder_;
  SpanHead<T> head_;
};

// Per-parameter seed: a SplitMix64 mix of the model seed and the name.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& name);

}  // namespace distill_span
