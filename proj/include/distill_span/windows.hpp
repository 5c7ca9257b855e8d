#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "distill_span/squad.hpp"
#include "distill_span/tokenizer.hpp"

namespace distill_span {

struct WindowLayout {
  std::size_t scorable = 384;     // positions the span head scores
  std::size_t mid_pads = 10;      // pads between question and first separator
  std::size_t stride = 128;       // doc-offset step between windows
  std::size_t max_question = 60;  // longer questions are discarded

  std::size_t physical() const noexcept { return scorable + mid_pads; }
  // Context tokens that fit next to a question of `q_len` tokens.
  std::size_t capacity(std::size_t q_len) const;
  // Physical index of scorable position s, for a window whose question has q_len tokens.
  std::size_t physical_index(std::size_t s, std::size_t q_len) const noexcept;
  // Scorable index of physical position p; nullopt for the mid pads.
  std::optional<std::size_t> scorable_index(std::size_t p, std::size_t q_len) const noexcept;
  void validate() const;
};

struct WindowFeature {
  std::string feature_id;  // "{qa_id}:{doc_offset}"
  std::string qa_id;
  std::vector<std::int32_t> token_ids;     // physical length
  std::vector<std::uint8_t> segment_ids;   // 1 question, 2 context, 0 otherwise
  std::vector<std::uint8_t> attention_mask;
  std::size_t question_len = 0;
  std::size_t doc_offset = 0;    // first context token of this window
  std::size_t context_len = 0;   // context tokens in this window
  std::size_t label_start = 0;   // scorable index; 0 means NO_ANS
  std::size_t label_end = 0;
  std::vector<CharSpan> token_to_char;  // per window context token

  // Scorable index of this window's first context token.
  std::size_t context_begin() const noexcept { return question_len + 2; }
  std::vector<double> start_one_hot(std::size_t scorable) const;
  std::vector<double> end_one_hot(std::size_t scorable) const;
};

// Token range [first, last] of an answer in the full context token list.
struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;
  bool aligned = true;  // false when the char span cut through a token
};

// Thrown-free signal for questions over the length cap.
struct BuildResult {
  std::vector<WindowFeature> windows;
  bool discarded = false;
};

BuildResult build_windows(const std::string& qa_id, const std::vector<TokenPiece>& question,
                          const std::vector<TokenPiece>& context, const Vocab& vocab,
                          const WindowLayout& layout = {});

// Window doc offsets for a context of ctx_len tokens at the given capacity.
std::vector<std::size_t> window_offsets(std::size_t ctx_len, std::size_t capacity,
                                        std::size_t stride);

// Smallest token range covering the char span; nullopt if it covers no token.
std::optional<TokenSpan> char_span_to_tokens(const std::vector<TokenPiece>& context,
                                             CharSpan answer);

// Labels the window with the answer if it lies entirely inside its context
// tokens, NO_ANS (position 0) otherwise.
void assign_span_labels(WindowFeature& window, std::optional<TokenSpan> answer);

struct FeatureStats {
  std::size_t examples = 0;
  std::size_t windows = 0;
  std::size_t discarded_long_questions = 0;
  std::size_t no_answer_windows = 0;
  std::size_t unaligned_answers = 0;
  std::size_t unlocatable_answers = 0;
};

struct FeatureSet {
  std::vector<WindowFeature> features;  // sorted by (qa_id, doc_offset)
  FeatureStats stats;
};

// Tokenizes and windows every record, labelling with the first gold answer.
FeatureSet featurize(const std::vector<QaRecord>& records, const WordpieceTokenizer& tokenizer,
                     const WindowLayout& layout = {});

void write_features_jsonl(std::ostream& out, const std::vector<WindowFeature>& features);
std::string feature_stats_json(const FeatureStats& stats);

}  // namespace distill_span
