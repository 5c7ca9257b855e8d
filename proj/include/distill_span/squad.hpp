#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "distill_span/tokenizer.hpp"

namespace distill_span {

struct GoldAnswer {
  std::string text;
  std::size_t char_start = 0;  // code point offset, as stored in the file
  CharSpan bytes;              // UTF-8 byte range in the passage
};

struct QaRecord {
  std::string qa_id;
  std::string question;
  std::string context;
  std::vector<GoldAnswer> answers;
};

struct SquadLoadResult {
  std::vector<QaRecord> records;
  // Questions dropped because an answer lacked text/offset (or had none).
  std::size_t skipped_missing_offsets = 0;
  // Answers whose offset does not point at their text in the passage.
  std::size_t offset_mismatches = 0;
};

// SQuAD v1.1 layout: data -> paragraphs -> qas -> answers. One record per qa.
SquadLoadResult parse_squad_json(std::string_view json, const std::string& source = "<memory>");
SquadLoadResult load_squad_json(const std::filesystem::path& path);

}  // namespace distill_span
