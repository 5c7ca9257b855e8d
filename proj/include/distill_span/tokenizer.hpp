#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "distill_span/vocab.hpp"

namespace distill_span {

// Half-open byte range [begin, end) into the UTF-8 source text.
struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct Word {
  std::string text;  // possibly lowercased
  CharSpan span;
};

struct TokenPiece {
  std::string text;
  std::int32_t id = 0;
  CharSpan span;
};

struct TokenizerOptions {
  bool lowercase = true;
  std::size_t max_chars_per_word = 100;
  std::string continuation_prefix = "##";
};

// Whitespace split, then every punctuation character becomes its own word.
// Lowercasing covers ASCII letters only.
std::vector<Word> split_words(std::string_view text, bool lowercase);

// Greedy longest-match-first subword segmentation of each word. A word with
// no segmentation (or longer than max_chars_per_word code points) becomes a
// single unknown token spanning the whole word.
class WordpieceTokenizer {
 public:
  WordpieceTokenizer(const Vocab& vocab, TokenizerOptions options = {});

  std::vector<TokenPiece> tokenize(std::string_view text) const;
  const Vocab& vocab() const noexcept { return vocab_; }
  const TokenizerOptions& options() const noexcept { return options_; }

 private:
  void segment(const Word& word, std::vector<TokenPiece>& out) const;

  const Vocab& vocab_;
  TokenizerOptions options_;
};

std::vector<TokenPiece> wordpiece_tokenize(std::string_view text, const Vocab& vocab,
                                           TokenizerOptions options = {});

// UTF-8 helpers.
std::size_t utf8_sequence_length(unsigned char lead) noexcept;
// Byte offset of code point index `cp` in `text` (text.size() if past the end).
std::size_t utf8_byte_offset(std::string_view text, std::size_t cp);

}  // namespace distill_span
