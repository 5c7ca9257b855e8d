#include "distill_span/decoder.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "distill_span/errors.hpp"

namespace distill_span {

SpanChoice decode_span(std::span<const double> start, std::span<const double> end,
                       std::size_t begin, std::size_t end_pos, std::size_t max_len,
                       bool allow_no_answer) {
  if (start.size() != end.size() || end_pos > start.size() || begin > end_pos)
    throw DimensionError("decode_span: logits of length " + std::to_string(start.size()) +
                         "/" + std::to_string(end.size()) + " with region [" +
                         std::to_string(begin) + ", " + std::to_string(end_pos) + ")");
  SpanChoice best;
  best.score = -std::numeric_limits<double>::infinity();
  if (allow_no_answer && !start.empty()) {
    best.score = start[0] + end[0];
    best.no_answer = true;
  }
  for (std::size_t i = begin; i < end_pos; ++i) {
    const std::size_t last = std::min(end_pos, i + max_len);
    for (std::size_t j = i; j < last; ++j) {
      const double s = start[i] + end[j];
      if (s > best.score) best = {i, j, s, false};
    }
  }
  return best;
}

SpanChoice decode_window_span(const Tensor<double>& z, const WindowFeature& window,
                              std::size_t max_answer_len) {
  if (z.rank() != 2 || z.dim(1) != 2)
    throw DimensionError("decode_window_span: z must be [scorable x 2], got " +
                         shape_to_string(z.shape()));
  const std::size_t n = z.dim(0);
  std::vector<double> s(n), e(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = z.at(i, 0);
    e[i] = z.at(i, 1);
  }
  const std::size_t b = window.context_begin();
  return decode_span(s, e, b, b + window.context_len, max_answer_len, true);
}

std::size_t token_context(std::size_t token, std::size_t doc_offset, std::size_t context_len) {
  const std::size_t left = token - doc_offset;
  const std::size_t right = doc_offset + context_len - 1 - token;
  return std::min(left, right);
}

MergedScores merge_windows_max_context(std::span<const WindowLogits> windows) {
  std::size_t n = 0;
  for (const auto& w : windows) {
    if (w.start.size() != w.end.size() || w.context_begin + w.context_len > w.start.size())
      throw DimensionError("merge_windows_max_context: window at offset " +
                           std::to_string(w.doc_offset) + " has inconsistent logits");
    n = std::max(n, w.doc_offset + w.context_len);
  }
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  MergedScores out;
  out.start.assign(n, 0.0);
  out.end.assign(n, 0.0);
  out.source.assign(n, none);
  std::vector<std::size_t> best_ctx(n, 0);
  for (std::size_t wi = 0; wi < windows.size(); ++wi) {
    const auto& w = windows[wi];
    for (std::size_t t = w.doc_offset; t < w.doc_offset + w.context_len; ++t) {
      const std::size_t ctx = token_context(t, w.doc_offset, w.context_len);
      const std::size_t cur = out.source[t];
      const bool better =
          cur == none || ctx > best_ctx[t] ||
          (ctx == best_ctx[t] && w.doc_offset < windows[cur].doc_offset);
      if (!better) continue;
      best_ctx[t] = ctx;
      out.source[t] = wi;
      const std::size_t pos = w.context_begin + (t - w.doc_offset);
      out.start[t] = w.start[pos];
      out.end[t] = w.end[pos];
    }
  }
  for (std::size_t t = 0; t < n; ++t)
    if (out.source[t] == none)
      throw MappingError("merge_windows_max_context: passage token " + std::to_string(t) +
                         " is covered by no window");
  return out;
}

std::string extract_answer_text(std::size_t first, std::size_t last,
                                std::span<const CharSpan> token_to_char,
                                std::string_view passage) {
  if (first > last || last >= token_to_char.size())
    throw MappingError("extract_answer_text: token span [" + std::to_string(first) + ", " +
                       std::to_string(last) + "] outside " +
                       std::to_string(token_to_char.size()) + " tokens");
  const std::size_t b = token_to_char[first].begin, e = token_to_char[last].end;
  if (b > e || e > passage.size())
    throw MappingError("extract_answer_text: character range [" + std::to_string(b) + ", " +
                       std::to_string(e) + ") is invalid for a passage of " +
                       std::to_string(passage.size()) + " bytes");
  return std::string(passage.substr(b, e - b));
}

// ---- metrics ---------------------------------------------------------------------

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

std::string normalize_answer(std::string_view s) {
  std::string t;
  t.reserve(s.size());
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::ispunct(u)) continue;
    t.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
  }
  static const std::regex articles(R"(\b(a|an|the)\b)");
  t = std::regex_replace(t, articles, " ");
  std::string out;
  for (const auto& w : split_ws(t)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

double exact_match_score(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1.0 : 0.0;
}

double f1_score(std::string_view prediction, std::string_view gold) {
  const auto p = split_ws(normalize_answer(prediction));
  const auto g = split_ws(normalize_answer(gold));
  if (p.empty() || g.empty()) return p.empty() && g.empty() ? 1.0 : 0.0;
  std::map<std::string, long> counts;
  for (const auto& w : g) ++counts[w];
  long same = 0;
  for (const auto& w : p)
    if (auto it = counts.find(w); it != counts.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  if (same == 0) return 0.0;
  const double precision = static_cast<double>(same) / static_cast<double>(p.size());
  const double recall = static_cast<double>(same) / static_cast<double>(g.size());
  return 2 * precision * recall / (precision + recall);
}

SquadMetrics squad_metrics(const std::map<std::string, std::string>& predictions,
                           const std::vector<QaRecord>& gold) {
  SquadMetrics m;
  double em = 0, f1 = 0;
  for (const auto& rec : gold) {
    ++m.questions;
    auto it = predictions.find(rec.qa_id);
    if (it == predictions.end()) {
      ++m.missing_predictions;
      continue;
    }
    double best_em = 0, best_f1 = 0;
    for (const auto& a : rec.answers) {
      best_em = std::max(best_em, exact_match_score(it->second, a.text));
      best_f1 = std::max(best_f1, f1_score(it->second, a.text));
    }
    em += best_em;
    f1 += best_f1;
  }
  if (m.questions > 0) {
    m.exact_match = 100.0 * em / static_cast<double>(m.questions);
    m.f1 = 100.0 * f1 / static_cast<double>(m.questions);
  }
  return m;
}

// ---- end-to-end evaluation --------------------------------------------------------

EvalResult decode_predictions(const std::vector<WindowFeature>& features,
                              const std::vector<Tensor<double>>& logits,
                              const std::vector<QaRecord>& records,
                              std::size_t max_answer_len) {
  if (features.size() != logits.size())
    throw DimensionError("decode_predictions: " + std::to_string(features.size()) +
                         " windows but " + std::to_string(logits.size()) + " logit tables");
  std::map<std::string, std::vector<std::size_t>> by_qa;
  for (std::size_t i = 0; i < features.size(); ++i) by_qa[features[i].qa_id].push_back(i);
  std::map<std::string, const QaRecord*> record_of;
  for (const auto& r : records) record_of[r.qa_id] = &r;

  EvalResult result;
  std::vector<QaRecord> scored;
  for (const auto& [qa_id, idx] : by_qa) {
    auto rec = record_of.find(qa_id);
    if (rec == record_of.end())
      throw DataError("decode_predictions: window for unknown question " + qa_id);
    SpanPrediction pred;
    pred.qa_id = qa_id;
    pred.windows = idx.size();
    std::vector<WindowLogits> wl;
    std::size_t passage_tokens = 0;
    for (std::size_t i : idx) {
      const auto& f = features[i];
      const auto& z = logits[i];
      if (decode_window_span(z, f, max_answer_len).no_answer) ++pred.no_answer_windows;
      WindowLogits w{f.doc_offset, f.context_len, f.context_begin(), {}, {}};
      w.start.resize(z.dim(0));
      w.end.resize(z.dim(0));
      for (std::size_t p = 0; p < z.dim(0); ++p) {
        w.start[p] = z.at(p, 0);
        w.end[p] = z.at(p, 1);
      }
      wl.push_back(std::move(w));
      passage_tokens = std::max(passage_tokens, f.doc_offset + f.context_len);
    }
    std::vector<CharSpan> token_to_char(passage_tokens);
    for (std::size_t i : idx) {
      const auto& f = features[i];
      for (std::size_t t = 0; t < f.context_len; ++t)
        token_to_char[f.doc_offset + t] = f.token_to_char[t];
    }
    const auto merged = merge_windows_max_context(wl);
    const auto best =
        decode_span(merged.start, merged.end, 0, passage_tokens, max_answer_len, false);
    pred.fallback = pred.no_answer_windows == pred.windows;
    if (pred.fallback) ++result.fallbacks;
    pred.start_token = best.start;
    pred.end_token = best.end;
    pred.score = best.score;
    pred.answer_text =
        extract_answer_text(best.start, best.end, token_to_char, rec->second->context);
    result.predictions.push_back(std::move(pred));
    scored.push_back(*rec->second);
  }
  result.excluded_questions = records.size() - scored.size();
  result.metrics = squad_metrics(prediction_map(result), scored);
  return result;
}

template <typename T>
EvalResult evaluate(const SpanModel<T>& model, const std::vector<WindowFeature>& features,
                    const std::vector<QaRecord>& records, std::size_t batch_size,
                    std::size_t max_answer_len) {
  if (batch_size == 0) throw ParameterError("evaluate: batch_size must be positive");
  std::vector<Tensor<double>> logits;
  logits.reserve(features.size());
  for (std::size_t b = 0; b < features.size(); b += batch_size) {
    const std::size_t n = std::min(batch_size, features.size() - b);
    const auto batch = make_batch(std::span<const WindowFeature>(features).subspan(b, n));
    const Tensor<T> z = model.infer(batch);
    const std::size_t S = z.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor<double> zi({S, 2});
      for (std::size_t p = 0; p < S; ++p)
        for (std::size_t c = 0; c < 2; ++c) zi.at(p, c) = static_cast<double>(z.at(i, p, c));
      logits.push_back(std::move(zi));
    }
  }
  return decode_predictions(features, logits, records, max_answer_len);
}

template EvalResult evaluate<float>(const SpanModel<float>&, const std::vector<WindowFeature>&,
                                    const std::vector<QaRecord>&, std::size_t, std::size_t);
template EvalResult evaluate<double>(const SpanModel<double>&,
                                     const std::vector<WindowFeature>&,
                                     const std::vector<QaRecord>&, std::size_t, std::size_t);

std::map<std::string, std::string> prediction_map(const EvalResult& r) {
  std::map<std::string, std::string> out;
  for (const auto& p : r.predictions) out[p.qa_id] = p.answer_text;
  return out;
}

std::string predictions_json(const EvalResult& r) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& p : r.predictions) j[p.qa_id] = p.answer_text;
  return j.dump(2) + "\n";
}

std::string diagnostics_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["exact_match"] = r.metrics.exact_match;
  j["f1"] = r.metrics.f1;
  j["questions"] = r.metrics.questions;
  j["missing_predictions"] = r.metrics.missing_predictions;
  j["excluded_questions"] = r.excluded_questions;
  j["no_answer_fallbacks"] = r.fallbacks;
  auto& per = j["predictions"] = nlohmann::ordered_json::object();
  for (const auto& p : r.predictions)
    per[p.qa_id] = {{"start_token", p.start_token}, {"end_token", p.end_token},
                    {"score", p.score},             {"windows", p.windows},
                    {"no_answer_windows", p.no_answer_windows},
                    {"fallback", p.fallback}};
  return j.dump(2) + "\n";
}

}  // namespace distill_span
