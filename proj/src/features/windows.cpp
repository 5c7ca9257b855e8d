#include "distill_span/windows.hpp"

#include <algorithm>
#include <exception>
#include <json.hpp>
#include <tuple>

#include "distill_span/errors.hpp"

namespace distill_span {

std::size_t WindowLayout::capacity(std::size_t q_len) const {
  if (q_len + 3 >= scorable) {
    throw ConfigError("question of " + std::to_string(q_len) + " tokens leaves no room for context");
  }
  return scorable - q_len - 3;
}

std::size_t WindowLayout::physical_index(std::size_t s, std::size_t q_len) const noexcept {
  return s <= q_len ? s : s + mid_pads;
}

std::optional<std::size_t> WindowLayout::scorable_index(std::size_t p,
                                                        std::size_t q_len) const noexcept {
  if (p <= q_len) return p;
  if (p < q_len + 1 + mid_pads) return std::nullopt;
  return p - mid_pads;
}

void WindowLayout::validate() const {
  if (stride == 0) throw ConfigError("window stride must be positive");
  if (max_question + 3 >= scorable) {
    throw ConfigError("question cap " + std::to_string(max_question) +
                      " does not fit a window of " + std::to_string(scorable));
  }
  if (stride > capacity(max_question)) {
    throw ConfigError("stride " + std::to_string(stride) + " exceeds the minimum context capacity " +
                      std::to_string(capacity(max_question)) + "; tokens would be skipped");
  }
}

std::vector<double> WindowFeature::start_one_hot(std::size_t scorable) const {
  std::vector<double> v(scorable, 0.0);
  v.at(label_start) = 1.0;
  return v;
}

std::vector<double> WindowFeature::end_one_hot(std::size_t scorable) const {
  std::vector<double> v(scorable, 0.0);
  v.at(label_end) = 1.0;
  return v;
}

std::vector<std::size_t> window_offsets(std::size_t ctx_len, std::size_t capacity,
                                        std::size_t stride) {
  std::vector<std::size_t> offsets;
  if (ctx_len == 0 || capacity == 0 || stride == 0) return offsets;
  for (std::size_t start = 0;; start += stride) {
    offsets.push_back(start);
    if (start + capacity >= ctx_len) break;
  }
  return offsets;
}

BuildResult build_windows(const std::string& qa_id, const std::vector<TokenPiece>& question,
                          const std::vector<TokenPiece>& context, const Vocab& vocab,
                          const WindowLayout& layout) {
  layout.validate();
  BuildResult result;
  if (question.size() > layout.max_question) {
    result.discarded = true;
    return result;
  }
  if (context.empty()) throw InvalidExampleError("example " + qa_id + " has an empty context");

  const std::size_t q = question.size();
  const std::size_t cap = layout.capacity(q);
  const std::size_t phys = layout.physical();
  const std::int32_t pad = vocab.pad_id(), sep = vocab.sep_id(), no_ans = vocab.no_answer_id();

  for (std::size_t offset : window_offsets(context.size(), cap, layout.stride)) {
    WindowFeature w;
    w.qa_id = qa_id;
    w.feature_id = qa_id + ":" + std::to_string(offset);
    w.question_len = q;
    w.doc_offset = offset;
    w.context_len = std::min(cap, context.size() - offset);
    w.token_ids.assign(phys, pad);
    w.segment_ids.assign(phys, 0);
    w.attention_mask.assign(phys, 0);

    std::size_t p = 0;
    w.token_ids[p] = no_ans;
    w.attention_mask[p++] = 1;
    for (const auto& tok : question) {
      w.token_ids[p] = tok.id;
      w.segment_ids[p] = 1;
      w.attention_mask[p++] = 1;
    }
    p += layout.mid_pads;
    w.token_ids[p] = sep;
    w.attention_mask[p++] = 1;
    for (std::size_t i = 0; i < w.context_len; ++i) {
      const auto& tok = context[offset + i];
      w.token_ids[p] = tok.id;
      w.segment_ids[p] = 2;
      w.attention_mask[p++] = 1;
      w.token_to_char.push_back(tok.span);
    }
    w.token_ids[p] = sep;
    w.attention_mask[p++] = 1;
    result.windows.push_back(std::move(w));
  }
  return result;
}

std::optional<TokenSpan> char_span_to_tokens(const std::vector<TokenPiece>& context,
                                             CharSpan answer) {
  std::optional<std::size_t> first, last;
  for (std::size_t i = 0; i < context.size(); ++i) {
    const CharSpan s = context[i].span;
    if (s.end > answer.begin && s.begin < answer.end) {
      if (!first) first = i;
      last = i;
    }
  }
  if (!first) return std::nullopt;
  TokenSpan ts{*first, *last, true};
  ts.aligned = context[*first].span.begin == answer.begin && context[*last].span.end == answer.end;
  return ts;
}

void assign_span_labels(WindowFeature& window, std::optional<TokenSpan> answer) {
  window.label_start = window.label_end = 0;
  if (!answer) return;
  const std::size_t lo = window.doc_offset, hi = window.doc_offset + window.context_len;
  if (answer->first < lo || answer->last >= hi) return;
  window.label_start = window.context_begin() + (answer->first - lo);
  window.label_end = window.context_begin() + (answer->last - lo);
}

namespace {

struct ExampleOutput {
  std::vector<WindowFeature> windows;
  bool discarded = false;
  bool unaligned = false;
  bool unlocatable = false;
  std::exception_ptr error;
};

}  // namespace

FeatureSet featurize(const std::vector<QaRecord>& records, const WordpieceTokenizer& tokenizer,
                     const WindowLayout& layout) {
  layout.validate();
  tokenizer.vocab().require_specials();
  std::vector<ExampleOutput> outs(records.size());

#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(records.size()); ++r) {
    auto& out = outs[r];
    try {
      const QaRecord& rec = records[r];
      const auto q = tokenizer.tokenize(rec.question);
      const auto c = tokenizer.tokenize(rec.context);
      auto built = build_windows(rec.qa_id, q, c, tokenizer.vocab(), layout);
      out.discarded = built.discarded;
      if (built.discarded) continue;
      std::optional<TokenSpan> span;
      if (!rec.answers.empty()) {
        span = char_span_to_tokens(c, rec.answers.front().bytes);
        out.unlocatable = !span;
        out.unaligned = span && !span->aligned;
      }
      for (auto& w : built.windows) assign_span_labels(w, span);
      out.windows = std::move(built.windows);
    } catch (...) {
      out.error = std::current_exception();
    }
  }

  FeatureSet set;
  set.stats.examples = records.size();
  for (auto& out : outs) {
    if (out.error) std::rethrow_exception(out.error);
    set.stats.discarded_long_questions += out.discarded;
    set.stats.unaligned_answers += out.unaligned;
    set.stats.unlocatable_answers += out.unlocatable;
    for (auto& w : out.windows) {
      set.stats.no_answer_windows += w.label_start == 0;
      set.features.push_back(std::move(w));
    }
  }
  set.stats.windows = set.features.size();
  std::stable_sort(set.features.begin(), set.features.end(),
                   [](const WindowFeature& a, const WindowFeature& b) {
                     return std::tie(a.qa_id, a.doc_offset) < std::tie(b.qa_id, b.doc_offset);
                   });
  return set;
}

void write_features_jsonl(std::ostream& out, const std::vector<WindowFeature>& features) {
  for (const auto& w : features) {
    nlohmann::json j;
    j["feature_id"] = w.feature_id;
    j["qa_id"] = w.qa_id;
    j["doc_offset"] = w.doc_offset;
    j["question_len"] = w.question_len;
    j["context_len"] = w.context_len;
    j["token_ids"] = w.token_ids;
    j["segment_ids"] = w.segment_ids;
    j["attention_mask"] = w.attention_mask;
    j["label_start"] = w.label_start;
    j["label_end"] = w.label_end;
    auto spans = nlohmann::json::array();
    for (const auto& s : w.token_to_char) spans.push_back({s.begin, s.end});
    j["token_to_char"] = std::move(spans);
    out << j.dump() << '\n';
  }
}

std::string feature_stats_json(const FeatureStats& s) {
  nlohmann::json j;
  j["examples"] = s.examples;
  j["windows"] = s.windows;
  j["discarded_long_questions"] = s.discarded_long_questions;
  j["no_answer_windows"] = s.no_answer_windows;
  j["unaligned_answers"] = s.unaligned_answers;
  j["unlocatable_answers"] = s.unlocatable_answers;
  const std::size_t kept = s.examples - s.discarded_long_questions;
  j["windows_per_question"] = kept == 0 ? 0.0 : static_cast<double>(s.windows) / kept;
  return j.dump();
}

}  // namespace distill_span
