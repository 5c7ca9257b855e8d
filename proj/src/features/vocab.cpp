#include "distill_span/vocab.hpp"

#include <fstream>
#include <set>

#include "distill_span/errors.hpp"

namespace distill_span {

Vocab Vocab::from_tokens(std::vector<std::string> tokens, SpecialTokens specials) {
  Vocab v;
  v.specials_ = std::move(specials);
  v.ids_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!v.ids_.emplace(tokens[i], static_cast<std::int32_t>(i)).second) {
      throw ConfigError("vocabulary token '" + tokens[i] + "' appears twice (line " +
                        std::to_string(i + 1) + ")");
    }
  }
  v.tokens_ = std::move(tokens);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path, SpecialTokens specials) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  // A trailing empty line is a file-format artifact, not a token.
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return from_tokens(std::move(tokens), std::move(specials));
}

bool Vocab::contains(std::string_view token) const { return find(token).has_value(); }

std::optional<std::int32_t> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary of " +
                    std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int32_t Vocab::special(const std::string& tok, const char* role) const {
  auto id = find(tok);
  if (!id) {
    throw ConfigError(std::string("vocabulary has no ") + role + " token '" + tok + "'");
  }
  return *id;
}

std::int32_t Vocab::no_answer_id() const { return special(specials_.no_answer, "no-answer"); }
std::int32_t Vocab::sep_id() const { return special(specials_.sep, "separator"); }
std::int32_t Vocab::pad_id() const { return special(specials_.pad, "padding"); }
std::int32_t Vocab::unk_id() const { return special(specials_.unk, "unknown"); }

void Vocab::require_specials() const {
  if (empty()) throw ConfigError("vocabulary is empty");
  std::set<std::int32_t> ids = {no_answer_id(), sep_id(), pad_id(), unk_id()};
  if (ids.size() != 4) throw ConfigError("special tokens must be distinct");
}

}  // namespace distill_span
