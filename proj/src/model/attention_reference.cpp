#include "distill_span/attention_reference.hpp"

#include <cmath>

#include "distill_span/errors.hpp"
#include "distill_span/ops.hpp"

namespace distill_span {

namespace {

Tensor<double> transpose(const Tensor<double>& a) {
  Tensor<double> t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

void require_projection(const Tensor<double>& w, std::size_t d, const char* name) {
  if (w.rank() != 2 || w.dim(1) != d) {
    throw DimensionError(std::string("score_and_attend: ") + name + " is " +
                         shape_to_string(w.shape()) + ", expected [k x " + std::to_string(d) +
                         "]");
  }
}

}  // namespace

AttendResult score_and_attend(const Tensor<double>& p, const Tensor<double>& q,
                              ScoreVariant variant, const ScoreParams& params) {
  if (p.rank() != 2 || q.rank() != 2 || p.dim(1) != q.dim(1)) {
    throw DimensionError("score_and_attend: P " + shape_to_string(p.shape()) + " and Q " +
                         shape_to_string(q.shape()) + " differ in width");
  }
  const std::size_t m = p.dim(0), n = q.dim(0), d = p.dim(1);
  AttendResult r;
  if (variant == ScoreVariant::additive) {
    require_projection(params.w2, d, "W2");
    require_projection(params.w3, d, "W3");
    const std::size_t k = params.w2.dim(0);
    if (params.w3.dim(0) != k || params.v.rank() != 1 || params.v.size() != k) {
      throw DimensionError("score_and_attend: additive parameters disagree on k");
    }
    const Tensor<double> a = matmul(p, transpose(params.w2));  // [m x k]
    const Tensor<double> b = matmul(q, transpose(params.w3));  // [n x k]
    r.scores = Tensor<double>({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t h = 0; h < k; ++h) s += params.v[h] * std::tanh(a.at(i, h) + b.at(j, h));
        r.scores.at(i, j) = s;
      }
  } else {
    require_projection(params.u, d, "U");
    require_projection(params.v_mat, d, "V");
    const std::size_t k = params.u.dim(0);
    if (params.v_mat.dim(0) != k) throw DimensionError("score_and_attend: U and V disagree on k");
    const Tensor<double> up = matmul(p, transpose(params.u));      // [m x k]
    const Tensor<double> vq = matmul(q, transpose(params.v_mat));  // [n x k]
    r.scores = matmul(up, transpose(vq));
    if (variant == ScoreVariant::scaled_multiplicative) r.scores *= 1.0 / std::sqrt(double(k));
  }
  r.weights = softmax(r.scores);
  r.context = matmul(r.weights, q);
  return r;
}

}  // namespace distill_span
