#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <random>

#include <json.hpp>

#include "distill_span/decoder.hpp"
#include "distill_span/errors.hpp"
#include "distill_span/tokenizer.hpp"
#include "distill_span/vocab.hpp"

namespace distill_span {
namespace {

const std::string kData = DISTILL_SPAN_TEST_DATA;

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 2.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Every (i, j) pair in order, keeping the first strictly larger admissible score.
SpanChoice exhaustive(const std::vector<double>& s, const std::vector<double>& e, std::size_t b,
                      std::size_t end, std::size_t max_len) {
  SpanChoice best;
  best.score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool no_ans = i == 0 && j == 0;
      const bool inside = i >= b && j < end && i <= j && j - i < max_len;
      if (!no_ans && !inside) continue;
      if (s[i] + e[j] > best.score) best = {i, j, s[i] + e[j], no_ans};
    }
  return best;
}

TEST(DecodeSpan, ToyLengthFour) {
  const std::vector<double> s{0, 5, 1, 3}, e{0, 1, 4, 6};
  const auto r = decode_span(s, e, 1, 4, kMaxAnswerLen, true);
  EXPECT_EQ(r.start, 1u);
  EXPECT_EQ(r.end, 3u);
  EXPECT_EQ(r.score, 11.0);
  EXPECT_FALSE(r.no_answer);
}

TEST(DecodeSpan, SingleContextTokenOrNoAnswer) {
  EXPECT_FALSE(decode_span(std::vector<double>{0, 2}, std::vector<double>{0, 1}, 1, 2, 30, true).no_answer);
  const auto r = decode_span(std::vector<double>{3, 2}, std::vector<double>{0, 0}, 1, 2, 30, true);
  EXPECT_TRUE(r.no_answer);
  EXPECT_EQ(r.score, 3.0);
}

TEST(DecodeSpan, TiesKeepTheEarliestPair) {
  const std::vector<double> s(6, 1.0), e(6, 1.0);
  const auto r = decode_span(s, e, 2, 6, 30, true);
  EXPECT_TRUE(r.no_answer);
  const auto r2 = decode_span(s, e, 2, 6, 30, false);
  EXPECT_EQ(r2.start, 2u);
  EXPECT_EQ(r2.end, 2u);
}

TEST(DecodeSpan, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(17);
  for (std::size_t n : {4u, 50u, 384u})
    for (int draw = 0; draw < 200; ++draw) {
      const auto s = random_vec(n, rng), e = random_vec(n, rng);
      const std::size_t b = 1 + rng() % (n - 1);
      const std::size_t end = b + 1 + rng() % (n - b);
      const std::size_t max_len = n == 4 ? 2 : kMaxAnswerLen;
      const auto got = decode_span(s, e, b, end, max_len, true);
      const auto want = exhaustive(s, e, b, end, max_len);
      ASSERT_EQ(got.start, want.start) << n << " draw " << draw;
      ASSERT_EQ(got.end, want.end);
      ASSERT_EQ(got.no_answer, want.no_answer);
      ASSERT_EQ(got.score, want.score);
    }
}

TEST(DecodeSpan, ConstantShiftsDoNotMoveTheSpan) {
  std::mt19937_64 rng(3);
  for (int draw = 0; draw < 50; ++draw) {
    auto s = random_vec(60, rng), e = random_vec(60, rng);
    const auto a = decode_span(s, e, 5, 55, 30, true);
    for (auto& v : s) v += 7.25;
    for (auto& v : e) v -= 3.5;
    const auto b = decode_span(s, e, 5, 55, 30, true);
    EXPECT_EQ(a.start, b.start);
    EXPECT_EQ(a.end, b.end);
    EXPECT_NEAR(b.score, a.score + 3.75, 1e-12);
  }
}

TEST(DecodeSpan, MaxAnswerLengthAndRegionBounds) {
  std::vector<double> s(40, 0.0), e(40, 0.0);
  s[5] = e[38] = 10;
  const auto r = decode_span(s, e, 1, 40, 30, false);
  EXPECT_LT(r.end - r.start, 30u);
  EXPECT_THROW(decode_span(s, e, 5, 41, 30, true), DimensionError);
}

TEST(DecodeWindowSpan, RestrictedToContextRegion) {
  WindowFeature w;
  w.question_len = 3;
  w.context_len = 4;  // scorable 5..8
  Tensor<double> z({12, 2});
  z.at(1, 0) = z.at(2, 1) = 50;  // question positions are never candidates
  z.at(6, 0) = 2;
  z.at(7, 1) = 3;
  z.at(10, 1) = 40;  // beyond the context
  const auto r = decode_window_span(z, w);
  EXPECT_EQ(r.start, 6u);
  EXPECT_EQ(r.end, 7u);
  EXPECT_EQ(r.score, 5.0);
  z.at(0, 0) = 6;
  EXPECT_TRUE(decode_window_span(z, w).no_answer);
}

// ---- max-context merge ---------------------------------------------------------------

WindowLogits logits_window(std::size_t offset, std::size_t len, double tag) {
  WindowLogits w;
  w.doc_offset = offset;
  w.context_len = len;
  w.context_begin = 2;
  w.start.assign(len + 4, tag);
  w.end.assign(len + 4, -tag);
  return w;
}

TEST(MaxContext, HandExamples) {
  const std::vector<WindowLogits> ws{logits_window(0, 10, 1), logits_window(5, 10, 2)};
  EXPECT_EQ(token_context(8, 0, 10), 1u);
  EXPECT_EQ(token_context(8, 5, 10), 3u);
  EXPECT_EQ(token_context(7, 0, 10), 2u);
  EXPECT_EQ(token_context(7, 5, 10), 2u);
  const auto m = merge_windows_max_context(ws);
  ASSERT_EQ(m.start.size(), 15u);
  EXPECT_EQ(m.source[8], 1u);
  EXPECT_EQ(m.start[8], 2.0);
  EXPECT_EQ(m.source[7], 0u);
  EXPECT_EQ(m.source[2], 0u);   // only in A
  EXPECT_EQ(m.source[12], 1u);  // only in B
  EXPECT_EQ(m.end[12], -2.0);
}

TEST(MaxContext, MatchesBruteForceAndIgnoresOrder) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20 + rng() % 200, cap = 5 + rng() % 40, stride = 1 + rng() % cap;
    std::vector<WindowLogits> ws;
    for (std::size_t off : window_offsets(n, cap, stride)) {
      const std::size_t len = std::min(cap, n - off);
      WindowLogits w;
      w.doc_offset = off;
      w.context_len = len;
      w.context_begin = 3;
      w.start = random_vec(len + 5, rng);
      w.end = random_vec(len + 5, rng);
      ws.push_back(w);
    }
    const auto m = merge_windows_max_context(ws);
    for (std::size_t t = 0; t < n; ++t) {
      std::size_t best = 0;
      long best_ctx = -1;
      for (std::size_t k = 0; k < ws.size(); ++k) {
        const auto& w = ws[k];
        if (t < w.doc_offset || t >= w.doc_offset + w.context_len) continue;
        const long left = static_cast<long>(t - w.doc_offset);
        const long right = static_cast<long>(w.doc_offset + w.context_len - 1 - t);
        const long ctx = std::min(left, right);
        if (ctx > best_ctx) best_ctx = ctx, best = k;
      }
      ASSERT_EQ(m.source[t], best) << "trial " << trial << " token " << t;
    }
    auto shuffled = ws;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto m2 = merge_windows_max_context(shuffled);
    EXPECT_EQ(m.start, m2.start);
    EXPECT_EQ(m.end, m2.end);
  }
}

TEST(MaxContext, UncoveredTokenIsAnError) {
  const std::vector<WindowLogits> ws{logits_window(0, 4, 1), logits_window(6, 4, 2)};
  EXPECT_THROW(merge_windows_max_context(ws), MappingError);
}

// ---- answer text ------------------------------------------------------------------

TEST(ExtractAnswer, AbcPassageGoldSpan) {
  const Vocab v = Vocab::load(kData + "/abc_vocab.txt");
  const WordpieceTokenizer tok(v);
  const auto recs = load_squad_json(kData + "/abc_squad.json").records;
  const auto set = featurize(recs, tok);
  const auto& w = set.features.at(0);
  const std::size_t first = w.label_start - w.context_begin(),
                    last = w.label_end - w.context_begin();
  EXPECT_EQ(extract_answer_text(first, last, w.token_to_char, recs[0].context),
            "The Walt Disney Company");
  EXPECT_EQ(extract_answer_text(first, first, w.token_to_char, recs[0].context), "The");
}

TEST(ExtractAnswer, WhitespacePreservedAndInvertedRangeRejected) {
  const std::string passage = "alpha   beta\tgamma";
  const std::vector<CharSpan> map{{0, 5}, {8, 12}, {13, 18}};
  EXPECT_EQ(extract_answer_text(0, 2, map, passage), passage.substr(0, 18));
  EXPECT_EQ(extract_answer_text(1, 2, map, passage), "beta\tgamma");
  const std::vector<CharSpan> bad{{8, 12}, {0, 5}};
  EXPECT_THROW(extract_answer_text(0, 1, bad, passage), MappingError);
  EXPECT_THROW(extract_answer_text(2, 1, map, passage), MappingError);
  EXPECT_THROW(extract_answer_text(0, 3, map, passage), MappingError);
}

// ---- metrics -------------------------------------------------------------------------

QaRecord gold(const std::string& id, std::vector<std::string> answers) {
  QaRecord r;
  r.qa_id = id;
  for (auto& a : answers) r.answers.push_back({a, 0, {}});
  return r;
}

TEST(Metrics, Normalization) {
  EXPECT_EQ(normalize_answer("The  Walt, Disney-Company!"), "walt disneycompany");
  EXPECT_EQ(normalize_answer("an apple a day"), "apple day");
  EXPECT_EQ(normalize_answer("theater"), "theater");
}

TEST(Metrics, HandExamples) {
  EXPECT_EQ(f1_score("The Walt Disney Company", "the walt disney company."), 1.0);
  EXPECT_EQ(exact_match_score("Walt Disney", "The Walt Disney Company"), 0.0);
  // Articles go, leaving {walt, disney} against {walt, disney, company}.
  EXPECT_NEAR(f1_score("Walt Disney", "The Walt Disney Company"), 0.8, 1e-12);
  EXPECT_EQ(f1_score("red car", "blue boat"), 0.0);
}

TEST(Metrics, MaxOverGoldAndMissingPredictions) {
  const std::vector<QaRecord> g{gold("a", {"blue boat", "red car"}), gold("b", {"x"}),
                                gold("c", {"y"})};
  const std::map<std::string, std::string> p{{"a", "red car"}, {"b", "z"}};
  const auto m = squad_metrics(p, g);
  EXPECT_EQ(m.questions, 3u);
  EXPECT_EQ(m.missing_predictions, 1u);
  EXPECT_NEAR(m.exact_match, 100.0 / 3, 1e-12);
  EXPECT_NEAR(m.f1, 100.0 / 3, 1e-12);
}

TEST(Metrics, F1AtLeastExactMatchAndBounded) {
  std::mt19937_64 rng(4);
  const std::vector<std::string> words{"the", "a", "cat", "dog", "Red", "red", "blue", "x,", "y"};
  auto phrase = [&] {
    std::string s;
    for (std::size_t k = 0, n = 1 + rng() % 4; k < n; ++k) s += words[rng() % words.size()] + " ";
    return s;
  };
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<QaRecord> g;
    std::map<std::string, std::string> p;
    for (int q = 0; q < 20; ++q) {
      const std::string id = std::to_string(q);
      g.push_back(gold(id, {phrase(), phrase()}));
      if (rng() % 5) p[id] = phrase();
    }
    const auto m = squad_metrics(p, g);
    EXPECT_GE(m.f1, m.exact_match);
    EXPECT_GE(m.exact_match, 0.0);
    EXPECT_LE(m.f1, 100.0);
  }
}

// ---- end to end ---------------------------------------------------------------------

struct Fixture {
  std::vector<QaRecord> records;
  FeatureSet set;
};

Fixture multi_window_fixture() {
  std::vector<std::string> toks{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  for (int i = 0; i < 20; ++i) toks.push_back("w" + std::to_string(i));
  static const Vocab v = Vocab::from_tokens(toks);
  const WordpieceTokenizer tok(v);
  Fixture f;
  std::mt19937_64 rng(12);
  for (int i = 0; i < 6; ++i) {
    QaRecord r;
    r.qa_id = "id" + std::to_string(i);
    r.question = "w1 w2";
    std::vector<std::size_t> starts;
    for (int k = 0; k < 40; ++k) {
      starts.push_back(r.context.size());
      r.context += "w" + std::to_string(rng() % 20) + (k % 3 ? " " : "  ");
    }
    const std::size_t a = 5 + rng() % 30;
    const std::size_t b = starts[a], e = r.context.find(' ', starts[a + 2]);
    r.answers.push_back({r.context.substr(b, e - b), b, {b, e}});
    f.records.push_back(r);
  }
  f.set = featurize(f.records, tok, WindowLayout{16, 2, 4, 6});
  return f;
}

// Logits that favour the gold span in every window that holds it.
std::vector<Tensor<double>> oracle_logits(const Fixture& f, bool all_no_answer) {
  std::vector<Tensor<double>> out;
  for (const auto& w : f.set.features) {
    Tensor<double> z({16, 2});
    if (all_no_answer) {
      z.at(0, 0) = z.at(0, 1) = 100;
    }
    if (w.label_start != 0) {
      z.at(w.label_start, 0) = 10;
      z.at(w.label_end, 1) = 10;
    }
    out.push_back(std::move(z));
  }
  return out;
}

TEST(DecodePredictions, RecoversGoldAcrossWindows) {
  const auto f = multi_window_fixture();
  ASSERT_GT(f.set.features.size(), f.records.size());
  const auto r = decode_predictions(f.set.features, oracle_logits(f, false), f.records);
  ASSERT_EQ(r.predictions.size(), f.records.size());
  for (std::size_t i = 0; i < r.predictions.size(); ++i) {
    EXPECT_EQ(r.predictions[i].answer_text, f.records[i].answers[0].text);
    EXPECT_FALSE(r.predictions[i].fallback);
  }
  EXPECT_EQ(r.metrics.exact_match, 100.0);
  EXPECT_EQ(r.metrics.f1, 100.0);
  EXPECT_EQ(r.fallbacks, 0u);
}

TEST(DecodePredictions, AllNoAnswerFallsBackAndCounts) {
  const auto f = multi_window_fixture();
  const auto r = decode_predictions(f.set.features, oracle_logits(f, true), f.records);
  EXPECT_EQ(r.fallbacks, f.records.size());
  for (const auto& p : r.predictions) {
    EXPECT_TRUE(p.fallback);
    EXPECT_FALSE(p.answer_text.empty());
    EXPECT_EQ(p.no_answer_windows, p.windows);
  }
  EXPECT_EQ(r.metrics.exact_match, 100.0);
}

TEST(DecodePredictions, JsonOutputs) {
  const auto f = multi_window_fixture();
  const auto r = decode_predictions(f.set.features, oracle_logits(f, false), f.records);
  const auto p = nlohmann::json::parse(predictions_json(r));
  EXPECT_EQ(p.size(), f.records.size());
  EXPECT_EQ(p["id0"], f.records[0].answers[0].text);
  const auto d = nlohmann::json::parse(diagnostics_json(r));
  EXPECT_EQ(d["f1"], 100.0);
  EXPECT_EQ(d["no_answer_fallbacks"], 0);
  EXPECT_GE(d["predictions"]["id0"]["windows"].get<int>(), 1);
}

TEST(Evaluate, ModelOutputsFlowThroughTheDecoder) {
  const auto f = multi_window_fixture();
  ModelConfig c;
  c.vocab_size = 24;
  c.embed_dim = 6;
  c.conv_kernel_sizes = {3};
  c.conv_filters = 4;
  c.model_width = 4;
  c.heads = 2;
  c.ffn_inner = 8;
  c.seq_scorable = 16;
  c.mid_pads = 2;
  const SpanModel<double> m(c, 5);
  const auto r = evaluate(m, f.set.features, f.records, 5);
  ASSERT_EQ(r.predictions.size(), f.records.size());
  for (std::size_t i = 0; i < r.predictions.size(); ++i) {
    const auto& p = r.predictions[i];
    EXPECT_LE(p.start_token, p.end_token);
    EXPECT_NE(f.records[i].context.find(p.answer_text), std::string::npos);
  }
  EXPECT_GE(r.metrics.f1, r.metrics.exact_match);
}

}  // namespace
}  // namespace distill_span
