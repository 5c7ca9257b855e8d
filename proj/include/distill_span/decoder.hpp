#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distill_span/model.hpp"
#include "distill_span/squad.hpp"
#include "distill_span/windows.hpp"

namespace distill_span {

inline constexpr std::size_t kMaxAnswerLen = 30;

struct SpanChoice {
  std::size_t start = 0;
  std::size_t end = 0;
  double score = 0;
  bool no_answer = true;
};

// argmax of start[i] + end[j] over begin <= i <= j < end_pos with j - i < max_len,
// plus (0, 0) when allow_no_answer. Ties keep the earliest pair in (i, j) order.
SpanChoice decode_span(std::span<const double> start, std::span<const double> end,
                       std::size_t begin, std::size_t end_pos, std::size_t max_len,
                       bool allow_no_answer);

// Per-window decode over the window's context region or NO_ANS. z is
// [scorable x 2]; indices in the result are scorable positions.
SpanChoice decode_window_span(const Tensor<double>& z, const WindowFeature& window,
                              std::size_t max_answer_len = kMaxAnswerLen);

struct WindowLogits {
  std::size_t doc_offset = 0;
  std::size_t context_len = 0;
  std::size_t context_begin = 0;  // scorable index of the first context token
  std::vector<double> start, end;  // over scorable positions
};

struct MergedScores {
  std::vector<double> start, end;   // per passage token
  std::vector<std::size_t> source;  // index of the winning window
};

// Tokens to the left/right of passage token t inside a window's context, min of the two.
std::size_t token_context(std::size_t token, std::size_t doc_offset, std::size_t context_len);

// Each passage token takes its logits from the window where its context is
// largest; ties go to the smallest doc offset.
MergedScores merge_windows_max_context(std::span<const WindowLogits> windows);

// Source substring from the first token's begin to the last token's end.
std::string extract_answer_text(std::size_t first, std::size_t last,
                                std::span<const CharSpan> token_to_char, std::string_view passage);

// ---- metrics -------------------------------------------------------------------

std::string normalize_answer(std::string_view s);
double exact_match_score(std::string_view prediction, std::string_view gold);
double f1_score(std::string_view prediction, std::string_view gold);

struct SquadMetrics {
  double exact_match = 0;  // 0..100
  double f1 = 0;
  std::size_t questions = 0;
  std::size_t missing_predictions = 0;
};

SquadMetrics squad_metrics(const std::map<std::string, std::string>& predictions,
                           const std::vector<QaRecord>& gold);

// ---- end-to-end evaluation --------------------------------------------------------

struct SpanPrediction {
  std::string qa_id;
  std::size_t start_token = 0;
  std::size_t end_token = 0;
  double score = 0;
  std::string answer_text;
  bool is_no_answer = false;
  std::size_t windows = 0;
  std::size_t no_answer_windows = 0;
  bool fallback = false;  // every window preferred NO_ANS
};

struct EvalResult {
  std::vector<SpanPrediction> predictions;  // sorted by qa_id
  SquadMetrics metrics;
  std::size_t fallbacks = 0;
  std::size_t excluded_questions = 0;  // records without any window (long questions)
};

// Runs the model over every window, merges per question and scores against
// the records. Records whose question produced no windows are excluded from
// the metrics and counted.
template <typename T>
EvalResult evaluate(const SpanModel<T>& model, const std::vector<WindowFeature>& features,
                    const std::vector<QaRecord>& records, std::size_t batch_size = 64,
                    std::size_t max_answer_len = kMaxAnswerLen);

// Decodes already-computed window logits (z per feature, same order).
EvalResult decode_predictions(const std::vector<WindowFeature>& features,
                              const std::vector<Tensor<double>>& logits,
                              const std::vector<QaRecord>& records,
                              std::size_t max_answer_len = kMaxAnswerLen);

std::map<std::string, std::string> prediction_map(const EvalResult& r);
std::string predictions_json(const EvalResult& r);
std::string diagnostics_json(const EvalResult& r);

}  // namespace distill_span
