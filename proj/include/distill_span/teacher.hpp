#pragma once

#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace distill_span {

struct TeacherTargets {
  std::string feature_id;
  std::vector<double> start_logits;
  std::vector<double> end_logits;
};

struct TeacherLoadResult {
  std::map<std::string, TeacherTargets> targets;
  std::size_t duplicates = 0;       // later line replaced an earlier one
  std::size_t rejected_lines = 0;   // non-finite logits
};

// JSON lines: {"feature_id": str, "start_logits": [n numbers], "end_logits": [n numbers]}.
// A vector of the wrong length is a FormatError naming the line.
TeacherLoadResult read_teacher_logits(std::istream& in, std::size_t expected_len = 384,
                                      const std::string& source = "<stream>");
TeacherLoadResult load_teacher_logits(const std::filesystem::path& path,
                                      std::size_t expected_len = 384);

void write_teacher_line(std::ostream& out, const TeacherTargets& t);

}  // namespace distill_span
