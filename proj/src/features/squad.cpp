#include "distill_span/squad.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "distill_span/errors.hpp"

namespace distill_span {

using nlohmann::json;

SquadLoadResult parse_squad_json(std::string_view text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(source + ": malformed JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("data") || !doc["data"].is_array()) {
    throw FormatError(source + ": missing top-level \"data\" array");
  }

  SquadLoadResult out;
  try {
    for (const json& article : doc["data"]) {
      for (const json& para : article.value("paragraphs", json::array())) {
        const std::string context = para.at("context").get<std::string>();
        for (const json& qa : para.value("qas", json::array())) {
          QaRecord rec;
          rec.qa_id = qa.at("id").get<std::string>();
          rec.question = qa.at("question").get<std::string>();
          rec.context = context;
          bool complete = true;
          for (const json& ans : qa.value("answers", json::array())) {
            if (!ans.contains("answer_start") || !ans["answer_start"].is_number_integer() ||
                !ans.contains("text") || !ans["text"].is_string()) {
              complete = false;
              break;
            }
            GoldAnswer g;
            g.text = ans["text"].get<std::string>();
            g.char_start = ans["answer_start"].get<std::size_t>();
            g.bytes.begin = utf8_byte_offset(context, g.char_start);
            g.bytes.end = std::min(context.size(), g.bytes.begin + g.text.size());
            if (context.compare(g.bytes.begin, g.text.size(), g.text) != 0) {
              ++out.offset_mismatches;
            }
            rec.answers.push_back(std::move(g));
          }
          if (!complete || rec.answers.empty()) {
            ++out.skipped_missing_offsets;
            continue;
          }
          out.records.push_back(std::move(rec));
        }
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(source + ": unexpected SQuAD structure: " + e.what());
  }
  return out;
}

SquadLoadResult load_squad_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_squad_json(buf.str(), path.string());
}

}  // namespace distill_span
