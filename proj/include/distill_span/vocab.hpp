#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace distill_span {

// Surface forms of the special tokens. Position 0 of every window holds the
// no-answer token; BERT vocabularies call it [CLS].
struct SpecialTokens {
  std::string no_answer = "[CLS]";
  std::string sep = "[SEP]";
  std::string pad = "[PAD]";
  std::string unk = "[UNK]";
};

class Vocab {
 public:
  // Line number (0-based) is the id. Duplicate tokens are a ConfigError.
  static Vocab from_tokens(std::vector<std::string> tokens, SpecialTokens specials = {});
  static Vocab load(const std::filesystem::path& path, SpecialTokens specials = {});

  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  bool contains(std::string_view token) const;
  std::optional<std::int32_t> find(std::string_view token) const;
  const std::string& token(std::int32_t id) const;

  // Special-token ids; ConfigError when the vocabulary lacks the token.
  std::int32_t no_answer_id() const;
  std::int32_t sep_id() const;
  std::int32_t pad_id() const;
  std::int32_t unk_id() const;
  const SpecialTokens& specials() const noexcept { return specials_; }

  // ConfigError unless all four specials are present and distinct.
  void require_specials() const;

 private:
  std::int32_t special(const std::string& tok, const char* role) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
  SpecialTokens specials_;
};

}  // namespace distill_span
