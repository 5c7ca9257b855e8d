#include "distill_span/teacher.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "distill_span/errors.hpp"

namespace distill_span {

using nlohmann::json;

namespace {

std::string where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line);
}

std::vector<double> logits_field(const json& j, const char* key, std::size_t expected,
                                 const std::string& loc) {
  if (!j.contains(key) || !j[key].is_array()) {
    throw FormatError(loc + ": missing array \"" + key + "\"");
  }
  const json& arr = j[key];
  if (arr.size() != expected) {
    throw FormatError(loc + ": \"" + key + "\" has " + std::to_string(arr.size()) +
                      " values, expected " + std::to_string(expected));
  }
  std::vector<double> v;
  v.reserve(expected);
  for (const json& x : arr) {
    // NaN and infinity are written as null by most JSON emitters.
    if (x.is_null()) {
      v.push_back(std::nan(""));
    } else if (x.is_number()) {
      v.push_back(x.get<double>());
    } else {
      throw FormatError(loc + ": non-numeric entry in \"" + key + "\"");
    }
  }
  return v;
}

bool finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

TeacherLoadResult read_teacher_logits(std::istream& in, std::size_t expected_len,
                                      const std::string& source) {
  TeacherLoadResult out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string loc = where(source, lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(loc + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("feature_id") || !j["feature_id"].is_string()) {
      throw FormatError(loc + ": missing string \"feature_id\"");
    }
    TeacherTargets t;
    t.feature_id = j["feature_id"].get<std::string>();
    t.start_logits = logits_field(j, "start_logits", expected_len, loc);
    t.end_logits = logits_field(j, "end_logits", expected_len, loc);
    if (!finite(t.start_logits) || !finite(t.end_logits)) {
      ++out.rejected_lines;
      continue;
    }
    auto [it, inserted] = out.targets.try_emplace(t.feature_id);
    if (!inserted) ++out.duplicates;
    it->second = std::move(t);
  }
  return out;
}

TeacherLoadResult load_teacher_logits(const std::filesystem::path& path,
                                      std::size_t expected_len) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open teacher logits " + path.string());
  return read_teacher_logits(in, expected_len, path.string());
}

void write_teacher_line(std::ostream& out, const TeacherTargets& t) {
  json j;
  j["feature_id"] = t.feature_id;
  j["start_logits"] = t.start_logits;
  j["end_logits"] = t.end_logits;
  out << j.dump() << '\n';
}

}  // namespace distill_span
