#include "distill_span/model.hpp"

#include <algorithm>
#include <utility>

#include "distill_span/errors.hpp"

namespace distill_span {

std::uint64_t derive_seed(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

template <typename T>
Parameter<T> glorot(const std::string& name, const Shape& shape, std::uint64_t seed) {
  return Parameter<T>(name, glorot_normal_init<T>(shape, derive_seed(seed, name)), true);
}

template <typename T>
Parameter<T> table(const std::string& name, const Shape& shape, std::uint64_t seed) {
  return Parameter<T>(name, glorot_normal_init<T>(shape, derive_seed(seed, name)), false);
}

template <typename T>
Parameter<T> constant(const std::string& name, std::size_t n, T value) {
  return Parameter<T>(name, Tensor<T>({n}, value), false);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  out += b;
  return out;
}

template <typename T>
void accumulate(Parameter<T>& p, const Tensor<T>& g) {
  if (p.trainable) p.grad += g;
}

}  // namespace

// ---- batch ---------------------------------------------------------------------

Batch make_batch(std::span<const WindowFeature* const> windows) {
  Batch b;
  b.size = windows.size();
  if (windows.empty()) return b;
  b.length = windows.front()->token_ids.size();
  for (const WindowFeature* w : windows) {
    if (w->token_ids.size() != b.length || w->segment_ids.size() != b.length ||
        w->attention_mask.size() != b.length) {
      throw DimensionError("batch: window " + w->feature_id + " has length " +
                           std::to_string(w->token_ids.size()) + ", expected " +
                           std::to_string(b.length));
    }
    b.token_ids.insert(b.token_ids.end(), w->token_ids.begin(), w->token_ids.end());
    b.segment_ids.insert(b.segment_ids.end(), w->segment_ids.begin(), w->segment_ids.end());
    b.attention_mask.insert(b.attention_mask.end(), w->attention_mask.begin(),
                            w->attention_mask.end());
    b.question_len.push_back(w->question_len);
  }
  return b;
}

Batch make_batch(std::span<const WindowFeature> windows) {
  std::vector<const WindowFeature*> ptrs;
  for (const auto& w : windows) ptrs.push_back(&w);
  return make_batch(std::span<const WindowFeature* const>(ptrs));
}

// ---- embedding -------------------------------------------------------------------

template <typename T>
Embedding<T>::Embedding(std::size_t vocab, std::size_t positions, std::size_t dim,
                        std::uint64_t seed, const std::string& prefix)
    : token(table<T>(prefix + ".token", {vocab, dim}, seed)),
      position(table<T>(prefix + ".position", {positions, dim}, seed)),
      segment(table<T>(prefix + ".segment", {kSegments, dim}, seed)),
      gain(constant<T>(prefix + ".norm.gain", dim, T{1})),
      bias(constant<T>(prefix + ".norm.bias", dim, T{0})) {}

template <typename T>
Tensor<T> Embedding<T>::forward(const Batch& batch, EmbeddingTape<T>* tape) const {
  const std::size_t B = batch.size, L = batch.length, d = token.value.dim(1);
  const std::size_t V = token.value.dim(0);
  if (L > position.value.dim(0)) {
    throw DimensionError("embedding: window length " + std::to_string(L) + " exceeds " +
                         std::to_string(position.value.dim(0)) + " positions");
  }
  Tensor<T> sum({B, L, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < L; ++p) {
      const std::size_t r = b * L + p;
      const std::int32_t id = batch.token_ids[r];
      const std::uint8_t seg = batch.segment_ids[r];
      if (id < 0 || static_cast<std::size_t>(id) >= V) {
        throw DataError("embedding: token id " + std::to_string(id) + " at position " +
                        std::to_string(p) + " of window " + std::to_string(b) +
                        " is outside the vocabulary of " + std::to_string(V));
      }
      if (seg >= kSegments) {
        throw DataError("embedding: segment id " + std::to_string(seg) + " at position " +
                        std::to_string(p) + " of window " + std::to_string(b));
      }
      T* out = sum.data() + r * d;
      const T* t = token.value.data() + static_cast<std::size_t>(id) * d;
      const T* s = segment.value.data() + seg * d;
      const T* q = position.value.data() + p * d;
      for (std::size_t c = 0; c < d; ++c) out[c] = t[c] + s[c] + q[c];
    }
  Tensor<T> y = layer_norm(sum, gain.value, bias.value, static_cast<T>(kLayerNormEps),
                           tape ? &tape->norm : nullptr);
  if (tape) {
    tape->token_ids = batch.token_ids;
    tape->segment_ids = batch.segment_ids;
    tape->length = L;
    tape->recorded = true;
  }
  return y;
}

template <typename T>
void Embedding<T>::backward(const EmbeddingTape<T>& tape, const Tensor<T>& dy) {
  require_recorded(tape, "embedding");
  const NormGrads<T> g = layer_norm_backward(tape.norm, gain.value, dy);
  accumulate(gain, g.dgain);
  accumulate(bias, g.dbias);
  const std::size_t d = token.value.dim(1), L = tape.length;
  for (std::size_t r = 0; r < tape.token_ids.size(); ++r) {
    const T* src = g.dx.data() + r * d;
    if (token.trainable) {
      T* dt = token.grad.data() + static_cast<std::size_t>(tape.token_ids[r]) * d;
      for (std::size_t c = 0; c < d; ++c) dt[c] += src[c];
    }
    if (segment.trainable) {
      T* ds = segment.grad.data() + tape.segment_ids[r] * d;
      for (std::size_t c = 0; c < d; ++c) ds[c] += src[c];
    }
    if (position.trainable) {
      T* dp = position.grad.data() + (r % L) * d;
      for (std::size_t c = 0; c < d; ++c) dp[c] += src[c];
    }
  }
}

template <typename T>
void Embedding<T>::collect(ParameterList<T>& out) {
  for (auto* p : {&token, &position, &segment, &gain, &bias}) out.push_back(p);
}

template <typename T>
void Embedding<T>::collect(ConstParameterList<T>& out) const {
  for (auto* p : {&token, &position, &segment, &gain, &bias}) out.push_back(p);
}

// ---- multi-window convolution --------------------------------------------------------

template <typename T>
MultiWindowConv<T>::MultiWindowConv(std::size_t in_dim, const std::vector<std::size_t>& kernel_sizes,
                                    std::size_t filters, double leaky_alpha, std::uint64_t seed,
                                    const std::string& prefix)
    : filters_(filters), act_(Activation::leaky_relu(leaky_alpha)) {
  if (kernel_sizes.empty()) throw ConfigError("conv: at least one kernel size is required");
  for (std::size_t i = 0; i < kernel_sizes.size(); ++i) {
    const std::size_t k = kernel_sizes[i];
    if (k % 2 == 0) throw UnsupportedKernelError("conv: kernel size " + std::to_string(k) + " is even");
    const std::string name = prefix + "." + std::to_string(i);
    ConvBranch<T> br;
    br.kernel_size = k;
    br.depth = Parameter<T>(
        name + ".depthwise",
        glorot_normal_init<T>({k, in_dim}, double(k * in_dim), double(in_dim),
                              derive_seed(seed, name + ".depthwise")),
        true);
    br.point = glorot<T>(name + ".pointwise", {in_dim, filters}, seed);
    br.point_bias = constant<T>(name + ".pointwise_bias", filters, T{0});
    br.bn_gain = constant<T>(name + ".bn.gain", filters, T{1});
    br.bn_bias = constant<T>(name + ".bn.bias", filters, T{0});
    br.stats = BatchNormState<T>(filters);
    // Zero mean / unit variance, usable before the first training step.
    br.stats.initialized = true;
    branches_.push_back(std::move(br));
  }
}

template <typename T>
Tensor<T> MultiWindowConv<T>::run(const Tensor<T>& x, Mode mode, ConvTape<T>* tape,
                                  bool update) const {
  if (x.rank() != 3) throw DimensionError("conv: expected [batch x len x channels], got " + shape_to_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), F = filters_, nb = branches_.size();
  if (tape) tape->branches.assign(nb, {});
  Tensor<T> out({B, L, F * nb});
  for (std::size_t i = 0; i < nb; ++i) {
    ConvBranch<T>& br = branches_[i];
    ConvBranchTape<T>* bt = tape ? &tape->branches[i] : nullptr;
    Tensor<T> y = depthwise_separable_conv1d(x, br.depth.value, br.point.value,
                                             br.point_bias.value, bt ? &bt->conv : nullptr);
    y = batch_norm(y, br.bn_gain.value, br.bn_bias.value, br.stats, mode,
                   static_cast<T>(kBatchNormMomentum), static_cast<T>(kBatchNormEps),
                   bt ? &bt->norm : nullptr, update ? &br.stats : nullptr);
    y = activation(y, act_, bt ? &bt->act : nullptr);
    for (std::size_t r = 0; r < B * L; ++r)
      std::copy_n(y.data() + r * F, F, out.data() + r * F * nb + i * F);
  }
  if (tape) tape->recorded = true;
  return out;
}

template <typename T>
Tensor<T> MultiWindowConv<T>::forward(const Tensor<T>& x, Mode mode, ConvTape<T>* tape) {
  return run(x, mode, tape, mode == Mode::train);
}

template <typename T>
Tensor<T> MultiWindowConv<T>::infer(const Tensor<T>& x) const {
  return run(x, Mode::infer, nullptr, false);
}

template <typename T>
Tensor<T> MultiWindowConv<T>::backward(const ConvTape<T>& tape, const Tensor<T>& dy) {
  require_recorded(tape, "conv");
  const std::size_t B = dy.dim(0), L = dy.dim(1), F = filters_, nb = branches_.size();
  std::optional<Tensor<T>> dx;
  for (std::size_t i = 0; i < nb; ++i) {
    ConvBranch<T>& br = branches_[i];
    const ConvBranchTape<T>& bt = tape.branches[i];
    Tensor<T> d({B, L, F});
    for (std::size_t r = 0; r < B * L; ++r)
      std::copy_n(dy.data() + r * F * nb + i * F, F, d.data() + r * F);
    d = activation_backward(bt.act, act_, d);
    const NormGrads<T> ng = batch_norm_backward(bt.norm, br.bn_gain.value, d);
    accumulate(br.bn_gain, ng.dgain);
    accumulate(br.bn_bias, ng.dbias);
    const SeparableConvGrads<T> cg =
        depthwise_separable_conv1d_backward(bt.conv, br.depth.value, br.point.value, ng.dx);
    accumulate(br.depth, cg.d_depth_kernel);
    accumulate(br.point, cg.d_point_kernel);
    accumulate(br.point_bias, cg.d_point_bias);
    if (dx) {
      *dx += cg.dx;
    } else {
      dx = cg.dx;
    }
  }
  return std::move(*dx);
}

template <typename T>
void MultiWindowConv<T>::collect(ParameterList<T>& out) {
  for (auto& br : branches_)
    for (auto* p : {&br.depth, &br.point, &br.point_bias, &br.bn_gain, &br.bn_bias})
      out.push_back(p);
}

template <typename T>
void MultiWindowConv<T>::collect(ConstParameterList<T>& out) const {
  for (const auto& br : branches_)
    for (auto* p : {&br.depth, &br.point, &br.point_bias, &br.bn_gain, &br.bn_bias})
      out.push_back(p);
}

// ---- encoder layer ---------------------------------------------------------------------

template <typename T>
EncoderLayer<T>::EncoderLayer(std::size_t width, std::size_t heads, std::size_t ffn_inner,
                              std::uint64_t seed, const std::string& prefix)
    : wq(glorot<T>(prefix + ".query.weight", {width, width}, seed)),
      bq(constant<T>(prefix + ".query.bias", width, T{0})),
      wk(glorot<T>(prefix + ".key.weight", {width, width}, seed)),
      bk(constant<T>(prefix + ".key.bias", width, T{0})),
      wv(glorot<T>(prefix + ".value.weight", {width, width}, seed)),
      bv(constant<T>(prefix + ".value.bias", width, T{0})),
      wa(glorot<T>(prefix + ".attention_output.weight", {width, width}, seed)),
      ba(constant<T>(prefix + ".attention_output.bias", width, T{0})),
      wi(glorot<T>(prefix + ".intermediate.weight", {width, ffn_inner}, seed)),
      bi(constant<T>(prefix + ".intermediate.bias", ffn_inner, T{0})),
      wo(glorot<T>(prefix + ".output.weight", {ffn_inner, width}, seed)),
      bo(constant<T>(prefix + ".output.bias", width, T{0})),
      ln1_gain(constant<T>(prefix + ".norm1.gain", width, T{1})),
      ln1_bias(constant<T>(prefix + ".norm1.bias", width, T{0})),
      ln2_gain(constant<T>(prefix + ".norm2.gain", width, T{1})),
      ln2_bias(constant<T>(prefix + ".norm2.bias", width, T{0})),
      heads_(heads) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("encoder: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> EncoderLayer<T>::forward(const Tensor<T>& x, std::span<const std::uint8_t> key_mask,
                                   Mode mode, double dropout_rate, Rng* rng,
                                   EncoderTape<T>* tape) const {
  if (x.rank() != 3 || x.dim(2) != width()) {
    throw DimensionError("encoder: input " + shape_to_string(x.shape()) + " does not match width " +
                         std::to_string(width()));
  }
  const double rate = mode == Mode::train ? dropout_rate : 0.0;
  if (rate > 0.0 && rng == nullptr) throw ParameterError("encoder: dropout needs a random generator");
  Rng unused(0);
  Rng& gen = rng ? *rng : unused;
  auto affine = [&](const Tensor<T>& in, const Parameter<T>& w, const Parameter<T>& b,
                    LinearTape<T>* lt, DropoutTape<T>* dt) {
    Tensor<T> y = linear(in, w.value, b.value, lt);
    if (rate > 0.0 || dt) y = dropout(y, rate, gen, dt);
    return y;
  };
  EncoderTape<T>* t = tape;
  const Tensor<T> q = affine(x, wq, bq, t ? &t->q : nullptr, t ? &t->dq : nullptr);
  const Tensor<T> k = affine(x, wk, bk, t ? &t->k : nullptr, t ? &t->dk : nullptr);
  const Tensor<T> v = affine(x, wv, bv, t ? &t->v : nullptr, t ? &t->dv : nullptr);
  const Tensor<T> att = multi_head_attention(q, k, v, heads_, key_mask, t ? &t->att : nullptr);
  const Tensor<T> a = affine(att, wa, ba, t ? &t->a : nullptr, t ? &t->da : nullptr);
  const Tensor<T> lam = layer_norm(add(x, a), ln1_gain.value, ln1_bias.value,
                                   static_cast<T>(kLayerNormEps), t ? &t->ln1 : nullptr);
  const Tensor<T> h = affine(lam, wi, bi, t ? &t->i : nullptr, t ? &t->di : nullptr);
  const Tensor<T> g = activation(h, Activation::gelu(), t ? &t->gelu : nullptr);
  const Tensor<T> o = affine(g, wo, bo, t ? &t->o : nullptr, t ? &t->dout : nullptr);
  Tensor<T> psi = layer_norm(add(lam, o), ln2_gain.value, ln2_bias.value,
                             static_cast<T>(kLayerNormEps), t ? &t->ln2 : nullptr);
  if (t) t->recorded = true;
  return psi;
}

template <typename T>
Tensor<T> EncoderLayer<T>::backward(const EncoderTape<T>& t, const Tensor<T>& dy) {
  require_recorded(t, "encoder layer");
  auto affine_back = [&](const Tensor<T>& d, Parameter<T>& w, Parameter<T>& b,
                         const LinearTape<T>& lt, const DropoutTape<T>& dt) {
    const LinearGrads<T> g = linear_backward(lt, w.value, dropout_backward(dt, d));
    accumulate(w, g.dw);
    accumulate(b, g.db);
    return g.dx;
  };
  const NormGrads<T> n2 = layer_norm_backward(t.ln2, ln2_gain.value, dy);
  accumulate(ln2_gain, n2.dgain);
  accumulate(ln2_bias, n2.dbias);
  Tensor<T> dlam = n2.dx;
  const Tensor<T> dg = affine_back(n2.dx, wo, bo, t.o, t.dout);
  const Tensor<T> dh = activation_backward(t.gelu, Activation::gelu(), dg);
  dlam += affine_back(dh, wi, bi, t.i, t.di);

  const NormGrads<T> n1 = layer_norm_backward(t.ln1, ln1_gain.value, dlam);
  accumulate(ln1_gain, n1.dgain);
  accumulate(ln1_bias, n1.dbias);
  Tensor<T> dx = n1.dx;
  const Tensor<T> datt = affine_back(n1.dx, wa, ba, t.a, t.da);
  const AttentionGrads<T> ag = multi_head_attention_backward(t.att, heads_, datt);
  dx += affine_back(ag.dq, wq, bq, t.q, t.dq);
  dx += affine_back(ag.dk, wk, bk, t.k, t.dk);
  dx += affine_back(ag.dv, wv, bv, t.v, t.dv);
  return dx;
}

#define DISTILL_SPAN_ENCODER_PARAMS \
  &wq, &bq, &wk, &bk, &wv, &bv, &wa, &ba, &wi, &bi, &wo, &bo, &ln1_gain, &ln1_bias, &ln2_gain, &ln2_bias

template <typename T>
void EncoderLayer<T>::collect(ParameterList<T>& out) {
  for (auto* p : {DISTILL_SPAN_ENCODER_PARAMS}) out.push_back(p);
}

template <typename T>
void EncoderLayer<T>::collect(ConstParameterList<T>& out) const {
  for (auto* p : {DISTILL_SPAN_ENCODER_PARAMS}) out.push_back(p);
}

#undef DISTILL_SPAN_ENCODER_PARAMS

template <typename T>
EncoderStack<T>::EncoderStack(std::vector<EncoderLayer<T>> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ConfigError("encoder stack needs at least one layer");
  for (std::size_t i = 1; i < layers_.size(); ++i) {
    if (layers_[i].width() != layers_[i - 1].width()) {
      throw ConfigError("encoder stack: layer " + std::to_string(i) + " has width " +
                        std::to_string(layers_[i].width()) + " after a layer of width " +
                        std::to_string(layers_[i - 1].width()));
    }
  }
}

template <typename T>
Tensor<T> EncoderStack<T>::forward(const Tensor<T>& x, std::span<const std::uint8_t> key_mask,
                                   Mode mode, double dropout, Rng* rng,
                                   std::vector<EncoderTape<T>>* tapes) const {
  if (tapes) tapes->assign(layers_.size(), {});
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h, key_mask, mode, dropout, rng, tapes ? &(*tapes)[i] : nullptr);
  }
  return h;
}

template <typename T>
Tensor<T> EncoderStack<T>::backward(const std::vector<EncoderTape<T>>& tapes, const Tensor<T>& dy) {
  if (tapes.size() != layers_.size()) throw MissingTapeError("encoder stack: tape count mismatch");
  Tensor<T> d = dy;
  for (std::size_t i = layers_.size(); i-- > 0;) d = layers_[i].backward(tapes[i], d);
  return d;
}

template <typename T>
void EncoderStack<T>::collect(ParameterList<T>& out) {
  for (auto& l : layers_) l.collect(out);
}

template <typename T>
void EncoderStack<T>::collect(ConstParameterList<T>& out) const {
  for (const auto& l : layers_) l.collect(out);
}

// ---- span head -------------------------------------------------------------------------

template <typename T>
SpanHead<T>::SpanHead(std::size_t width, std::size_t scorable, std::size_t mid_pads,
                      std::uint64_t seed, const std::string& prefix)
    : w(glorot<T>(prefix + ".weight", {width, 2}, seed)),
      b(constant<T>(prefix + ".bias", 2, T{0})),
      scorable_(scorable),
      mid_pads_(mid_pads) {}

template <typename T>
Tensor<T> SpanHead<T>::forward(const Tensor<T>& psi, std::span<const std::size_t> question_len,
                               SpanHeadTape<T>* tape) const {
  if (psi.rank() != 3 || psi.dim(1) != scorable_ + mid_pads_) {
    throw DimensionError("span head: input " + shape_to_string(psi.shape()) + ", expected " +
                         std::to_string(scorable_ + mid_pads_) + " positions");
  }
  const std::size_t B = psi.dim(0), L = psi.dim(1), d = psi.dim(2);
  if (question_len.size() != B) {
    throw DimensionError("span head: " + std::to_string(question_len.size()) +
                         " question lengths for a batch of " + std::to_string(B));
  }
  std::vector<std::size_t> rows;
  rows.reserve(B * scorable_);
  for (std::size_t bi = 0; bi < B; ++bi) {
    const std::size_t q = question_len[bi];
    if (q + 1 + mid_pads_ > L) throw DimensionError("span head: question length exceeds window");
    for (std::size_t s = 0; s < scorable_; ++s) rows.push_back(bi * L + (s <= q ? s : s + mid_pads_));
  }
  Tensor<T> gathered({B * scorable_, d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(psi.data() + rows[r] * d, d, gathered.data() + r * d);
  Tensor<T> z = linear(gathered, w.value, b.value, tape ? &tape->affine : nullptr);
  if (tape) {
    tape->rows = std::move(rows);
    tape->input_shape = psi.shape();
    tape->recorded = true;
  }
  return z.reshaped({B, scorable_, 2});
}

template <typename T>
Tensor<T> SpanHead<T>::backward(const SpanHeadTape<T>& tape, const Tensor<T>& dz) {
  require_recorded(tape, "span head");
  const LinearGrads<T> g = linear_backward(tape.affine, w.value, dz.reshaped({tape.rows.size(), 2}));
  accumulate(w, g.dw);
  accumulate(b, g.db);
  Tensor<T> dpsi(tape.input_shape);
  const std::size_t d = dpsi.dim(2);
  for (std::size_t r = 0; r < tape.rows.size(); ++r)
    std::copy_n(g.dx.data() + r * d, d, dpsi.data() + tape.rows[r] * d);
  return dpsi;
}

template <typename T>
void SpanHead<T>::collect(ParameterList<T>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

template <typename T>
void SpanHead<T>::collect(ConstParameterList<T>& out) const {
  out.push_back(&w);
  out.push_back(&b);
}

// ---- span model ---------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<EncoderLayer<T>> make_layers(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::vector<EncoderLayer<T>> layers;
  for (std::size_t i = 0; i < c.encoder_layers; ++i) {
    layers.emplace_back(c.model_width, c.heads, c.ffn_inner, seed,
                        "encoder." + std::to_string(i));
  }
  return layers;
}

}  // namespace

template <typename T>
SpanModel<T>::SpanModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      embedding_(config_.vocab_size, config_.physical_length(), config_.embed_dim, seed),
      encoder_(make_layers<T>(config_, seed)),
      head_(config_.model_width, config_.seq_scorable, config_.mid_pads, seed) {
  if (config_.architecture == Architecture::conv) {
    conv_.emplace(config_.embed_dim, config_.conv_kernel_sizes, config_.conv_filters,
                  config_.leaky_alpha, seed);
  }
  require_unique_names(std::as_const(*this).parameters());
}

template <typename T>
void SpanModel<T>::check_batch(const Batch& batch) const {
  if (batch.size == 0) throw ParameterError("model: empty batch");
  if (batch.length != config_.physical_length()) {
    throw DimensionError("model: windows have " + std::to_string(batch.length) +
                         " positions, model expects " + std::to_string(config_.physical_length()));
  }
  const std::size_t n = batch.size * batch.length;
  if (batch.token_ids.size() != n || batch.segment_ids.size() != n ||
      batch.attention_mask.size() != n || batch.question_len.size() != batch.size) {
    throw DimensionError("model: inconsistent batch arrays");
  }
}

template <typename T>
std::span<const std::uint8_t> SpanModel<T>::key_mask(const Batch& batch) const {
  if (!config_.attention_mask) return {};
  return batch.attention_mask;
}

template <typename T>
Tensor<T> SpanModel<T>::forward(const Batch& batch, Mode mode, Rng* rng, ModelTape<T>* tape) {
  check_batch(batch);
  Tensor<T> h = embedding_.forward(batch, tape ? &tape->embedding : nullptr);
  if (conv_) h = conv_->forward(h, mode, tape ? &tape->conv : nullptr);
  h = encoder_.forward(h, key_mask(batch), mode, config_.dropout_rate, rng,
                       tape ? &tape->encoder : nullptr);
  Tensor<T> z = head_.forward(h, batch.question_len, tape ? &tape->head : nullptr);
  if (tape) tape->recorded = true;
  return z;
}

template <typename T>
Tensor<T> SpanModel<T>::infer(const Batch& batch) const {
  check_batch(batch);
  Tensor<T> h = embedding_.forward(batch);
  if (conv_) h = conv_->infer(h);
  h = encoder_.forward(h, key_mask(batch), Mode::infer, 0.0, nullptr);
  return head_.forward(h, batch.question_len);
}

template <typename T>
void SpanModel<T>::backward(const ModelTape<T>& tape, const Tensor<T>& dz) {
  require_recorded(tape, "model");
  Tensor<T> d = head_.backward(tape.head, dz);
  d = encoder_.backward(tape.encoder, d);
  if (conv_) d = conv_->backward(tape.conv, d);
  embedding_.backward(tape.embedding, d);
}

template <typename T>
ParameterList<T> SpanModel<T>::parameters() {
  ParameterList<T> out;
  embedding_.collect(out);
  if (conv_) conv_->collect(out);
  encoder_.collect(out);
  head_.collect(out);
  return out;
}

template <typename T>
ConstParameterList<T> SpanModel<T>::parameters() const {
  ConstParameterList<T> out;
  embedding_.collect(out);
  if (conv_) conv_->collect(out);
  encoder_.collect(out);
  head_.collect(out);
  return out;
}

template <typename T>
void SpanModel<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
void SpanModel<T>::set_token_table(const Tensor<T>& table) {
  if (table.shape() != embedding_.token.value.shape()) {
    throw DimensionError("token table " + shape_to_string(table.shape()) + " does not match " +
                         shape_to_string(embedding_.token.value.shape()));
  }
  embedding_.token.value = table;
  embedding_.token.trainable = false;
  embedding_.token.zero_grad();
}

template struct ConvBranch<float>;
template struct ConvBranch<double>;
template class Embedding<float>;
template class Embedding<double>;
template class MultiWindowConv<float>;
template class MultiWindowConv<double>;
template class EncoderLayer<float>;
template class EncoderLayer<double>;
template class EncoderStack<float>;
template class EncoderStack<double>;
template class SpanHead<float>;
template class SpanHead<double>;
template class SpanModel<float>;
template class SpanModel<double>;

}  // namespace distill_span
