#pragma once

// Single-query-set attention with the classic score functions. Used as a
// reference and for experiments; the encoder layer has its own batched path.

#include "distill_span/tensor.hpp"

namespace distill_span {

enum class ScoreVariant { multiplicative, scaled_multiplicative, additive };

// multiplicative: s_ij = p_i^T U^T V q_j, with U, V: [k x d]; the scaled form divides by sqrt(k).
// additive:       s_ij = v^T tanh(W2 p_i + W3 q_j), with W2, W3: [k x d], v: [k].
struct ScoreParams {
  Tensor<double> u, v_mat;   // multiplicative variants
  Tensor<double> w2, w3, v;  // additive
};

struct AttendResult {
  Tensor<double> scores;   // [m x n]
  Tensor<double> weights;  // [m x n], rows sum to 1
  Tensor<double> context;  // [m x d]
};

// p: [m x d], q: [n x d].
AttendResult score_and_attend(const Tensor<double>& p, const Tensor<double>& q,
                              ScoreVariant variant, const ScoreParams& params);

}  // namespace distill_span
