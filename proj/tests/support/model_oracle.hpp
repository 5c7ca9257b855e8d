#pragma once

// Straight-line reference evaluation of the span model in double precision,
// written with explicit loops over the stored parameters.

#include <cmath>
#include <span>
#include <vector>

#include "distill_span/model.hpp"

namespace distill_span::testing {

// [rows x cols] row-major.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat y(x.rows, w.dim(1));
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t o = 0; o < w.dim(1); ++o) {
      double s = b[o];
      for (std::size_t c = 0; c < x.cols; ++c) s += x(i, c) * w.at(c, o);
      y(i, o) = s;
    }
  return y;
}

inline Mat layer_norm_rows(const Mat& x, const Tensor<double>& g, const Tensor<double>& b,
                           double eps = 1e-12) {
  Mat y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += x(i, c);
    mean /= double(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= double(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c)
      y(i, c) = (x(i, c) - mean) / std::sqrt(var + eps) * g[c] + b[c];
  }
  return y;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

// One window: token/segment/position sum followed by layer norm.
inline Mat embed_window(const Embedding<double>& e, const Batch& batch, std::size_t w) {
  const std::size_t L = batch.length, d = e.token.value.dim(1);
  Mat x(L, d);
  for (std::size_t p = 0; p < L; ++p) {
    const std::size_t r = w * L + p;
    for (std::size_t c = 0; c < d; ++c)
      x(p, c) = e.token.value.at(batch.token_ids[r], c) +
                e.segment.value.at(batch.segment_ids[r], c) + e.position.value.at(p, c);
  }
  return layer_norm_rows(x, e.gain.value, e.bias.value);
}

// Inference-mode branch: separable conv, running-stat batch norm, leaky ReLU.
inline Mat conv_window(const MultiWindowConv<double>& conv, const Mat& x, double alpha) {
  const auto& branches = conv.branches();
  const std::size_t L = x.rows, C = x.cols;
  std::size_t total = 0;
  for (const auto& br : branches) total += br.point.value.dim(1);
  Mat out(L, total);
  std::size_t col0 = 0;
  for (const auto& br : branches) {
    const std::size_t K = br.kernel_size, F = br.point.value.dim(1);
    const long half = long(K / 2);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t f = 0; f < F; ++f) {
        double s = br.point_bias.value[f];
        for (std::size_t c = 0; c < C; ++c) {
          double dsum = 0;
          for (std::size_t j = 0; j < K; ++j) {
            const long src = long(t) + long(j) - half;
            if (src >= 0 && src < long(L)) dsum += br.depth.value.at(j, c) * x(src, c);
          }
          s += dsum * br.point.value.at(c, f);
        }
        double y = (s - br.stats.running_mean[f]) / std::sqrt(br.stats.running_var[f] + 1e-3);
        y = y * br.bn_gain.value[f] + br.bn_bias.value[f];
        out(t, col0 + f) = y >= 0 ? y : alpha * y;
      }
    col0 += F;
  }
  return out;
}

// Per-head projections q_j = x W_j^Q + b_j^Q etc., scaled dot product with
// key masking, head concat, output projection, residual norms and a GELU FFN.
inline Mat encoder_window(const EncoderLayer<double>& l, const Mat& x,
                          std::span<const std::uint8_t> mask) {
  const std::size_t L = x.rows, d = x.cols, H = l.heads(), dh = d / H;
  const Mat q = affine(x, l.wq.value, l.bq.value), k = affine(x, l.wk.value, l.bk.value),
            v = affine(x, l.wv.value, l.bv.value);
  Mat heads(L, d);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(L);
      double mx = -1e300;
      for (std::size_t j = 0; j < L; ++j) {
        if (!mask.empty() && !mask[j]) continue;
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        s[j] = dot / std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < L; ++j) {
        s[j] = (!mask.empty() && !mask[j]) ? 0.0 : std::exp(s[j] - mx);
        z += s[j];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0;
        for (std::size_t j = 0; j < L; ++j) acc += s[j] / z * v(j, h * dh + c);
        heads(i, h * dh + c) = acc;
      }
    }
  const Mat lam = layer_norm_rows(add(x, affine(heads, l.wa.value, l.ba.value)), l.ln1_gain.value,
                                  l.ln1_bias.value);
  Mat inner = affine(lam, l.wi.value, l.bi.value);
  for (double& u : inner.v) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
  return layer_norm_rows(add(lam, affine(inner, l.wo.value, l.bo.value)), l.ln2_gain.value,
                         l.ln2_bias.value);
}

// z rows for the scorable positions of one window: [scorable x 2].
inline Mat head_window(const SpanHead<double>& head, const Mat& psi, std::size_t q_len,
                       std::size_t mid_pads) {
  const std::size_t scorable = psi.rows - mid_pads;
  Mat z(scorable, 2);
  for (std::size_t s = 0; s < scorable; ++s) {
    const std::size_t p = s <= q_len ? s : s + mid_pads;
    for (std::size_t o = 0; o < 2; ++o) {
      double acc = head.b.value[o];
      for (std::size_t c = 0; c < psi.cols; ++c) acc += psi(p, c) * head.w.value.at(c, o);
      z(s, o) = acc;
    }
  }
  return z;
}

inline std::vector<double> model_infer(SpanModel<double>& m, const Batch& batch) {
  const auto& c = m.config();
  std::vector<double> out;
  for (std::size_t w = 0; w < batch.size; ++w) {
    Mat h = embed_window(m.embedding(), batch, w);
    if (m.conv()) h = conv_window(*m.conv(), h, c.leaky_alpha);
    std::span<const std::uint8_t> mask;
    if (c.attention_mask)
      mask = std::span<const std::uint8_t>(batch.attention_mask).subspan(w * batch.length, batch.length);
    for (std::size_t i = 0; i < m.encoder().size(); ++i) h = encoder_window(m.encoder()[i], h, mask);
    const Mat z = head_window(m.head(), h, batch.question_len[w], c.mid_pads);
    out.insert(out.end(), z.v.begin(), z.v.end());
  }
  return out;
}

}  // namespace distill_span::testing
