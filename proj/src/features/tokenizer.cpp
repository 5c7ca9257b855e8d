#include "distill_span/tokenizer.hpp"

#include <algorithm>
#include <optional>

#include "distill_span/errors.hpp"

namespace distill_span {

namespace {

struct CodePoint {
  char32_t value;
  std::size_t length;
};

CodePoint decode(std::string_view s, std::size_t i) {
  const auto lead = static_cast<unsigned char>(s[i]);
  const std::size_t len = utf8_sequence_length(lead);
  if (len == 1 || i + len > s.size()) return {lead < 0x80 ? char32_t{lead} : char32_t{0xFFFD}, 1};
  char32_t cp = lead & (0x7F >> len);
  for (std::size_t k = 1; k < len; ++k) {
    const auto c = static_cast<unsigned char>(s[i + k]);
    if ((c & 0xC0) != 0x80) return {0xFFFD, 1};
    cp = (cp << 6) | (c & 0x3F);
  }
  return {cp, len};
}

bool is_whitespace(char32_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == 0x0B || c == 0x0C ||
         c == 0x00A0 || (c >= 0x2000 && c <= 0x200B) || c == 0x202F || c == 0x205F ||
         c == 0x3000;
}

bool is_punctuation(char32_t c) {
  if ((c >= 33 && c <= 47) || (c >= 58 && c <= 64) || (c >= 91 && c <= 96) ||
      (c >= 123 && c <= 126)) {
    return true;
  }
  return c == 0x00A1 || c == 0x00A7 || c == 0x00AB || c == 0x00B6 || c == 0x00B7 ||
         c == 0x00BB || c == 0x00BF || (c >= 0x2010 && c <= 0x2027) ||
         (c >= 0x2030 && c <= 0x205E) || (c >= 0x3001 && c <= 0x3003) ||
         (c >= 0x3008 && c <= 0x3011);
}

}  // namespace

std::size_t utf8_sequence_length(unsigned char lead) noexcept {
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) return 2;
  if ((lead & 0xF0) == 0xE0) return 3;
  if ((lead & 0xF8) == 0xF0) return 4;
  return 1;
}

std::size_t utf8_byte_offset(std::string_view text, std::size_t cp) {
  std::size_t i = 0;
  for (std::size_t n = 0; n < cp && i < text.size(); ++n) i += decode(text, i).length;
  return std::min(i, text.size());
}

std::vector<Word> split_words(std::string_view text, bool lowercase) {
  std::vector<Word> words;
  Word current;
  bool open = false;
  auto flush = [&] {
    if (open) words.push_back(std::move(current));
    current = Word{};
    open = false;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const CodePoint cp = decode(text, i);
    if (is_whitespace(cp.value) || cp.value == 0) {
      flush();
    } else if (is_punctuation(cp.value)) {
      flush();
      words.push_back(Word{std::string(text.substr(i, cp.length)), {i, i + cp.length}});
    } else {
      if (!open) {
        current.span.begin = i;
        open = true;
      }
      std::string piece(text.substr(i, cp.length));
      if (lowercase && cp.length == 1 && piece[0] >= 'A' && piece[0] <= 'Z') {
        piece[0] = static_cast<char>(piece[0] - 'A' + 'a');
      }
      current.text += piece;
      current.span.end = i + cp.length;
    }
    i += cp.length;
  }
  flush();
  return words;
}

WordpieceTokenizer::WordpieceTokenizer(const Vocab& vocab, TokenizerOptions options)
    : vocab_(vocab), options_(std::move(options)) {
  if (vocab_.empty()) throw ConfigError("wordpiece: vocabulary is empty");
}

std::vector<TokenPiece> WordpieceTokenizer::tokenize(std::string_view text) const {
  std::vector<TokenPiece> out;
  for (const Word& w : split_words(text, options_.lowercase)) segment(w, out);
  return out;
}

void WordpieceTokenizer::segment(const Word& word, std::vector<TokenPiece>& out) const {
  // Code point boundaries of the word; candidate cuts never split a sequence.
  std::vector<std::size_t> bounds{0};
  for (std::size_t i = 0; i < word.text.size();) {
    i += decode(word.text, i).length;
    bounds.push_back(i);
  }
  const std::size_t n_cp = bounds.size() - 1;
  auto unknown = [&] {
    out.push_back({vocab_.specials().unk, vocab_.unk_id(), word.span});
  };
  if (n_cp > options_.max_chars_per_word) {
    unknown();
    return;
  }

  std::vector<TokenPiece> pieces;
  std::size_t start = 0;
  while (start < n_cp) {
    std::size_t end = n_cp;
    std::optional<std::int32_t> found;
    std::string candidate;
    while (end > start) {
      candidate = word.text.substr(bounds[start], bounds[end] - bounds[start]);
      if (start > 0) candidate = options_.continuation_prefix + candidate;
      found = vocab_.find(candidate);
      if (found) break;
      --end;
    }
    if (!found) {
      unknown();
      return;
    }
    // Lowercasing is ASCII-only, so byte offsets carry over from the source.
    pieces.push_back({candidate, *found,
                      {word.span.begin + bounds[start], word.span.begin + bounds[end]}});
    start = end;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

std::vector<TokenPiece> wordpiece_tokenize(std::string_view text, const Vocab& vocab,
                                           TokenizerOptions options) {
  return WordpieceTokenizer(vocab, std::move(options)).tokenize(text);
}

}  // namespace distill_span
