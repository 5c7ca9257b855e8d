#pragma once

// Small model configurations and hand-built windows for fast training tests.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "distill_span/model_config.hpp"
#include "distill_span/windows.hpp"

namespace distill_span::testing {

inline ModelConfig tiny_conv_config() {
  ModelConfig c;
  c.vocab_size = 20;
  c.embed_dim = 6;
  c.conv_kernel_sizes = {3, 5};
  c.conv_filters = 4;
  c.model_width = 8;
  c.heads = 2;
  c.ffn_inner = 12;
  c.encoder_layers = 1;
  c.seq_scorable = 10;
  c.mid_pads = 2;
  c.dropout_rate = 0.0;
  return c;
}

inline ModelConfig tiny_stack_config(std::size_t layers) {
  ModelConfig c = tiny_conv_config();
  c.architecture = Architecture::stack;
  c.conv_kernel_sizes.clear();
  c.conv_filters = 0;
  c.embed_dim = c.model_width = 8;
  c.encoder_layers = layers;
  return c;
}

// [NO_ANS][question][pads][SEP][context][SEP][pads] with ids 2 = NO_ANS, 3 = SEP.
// Labels are context token indices within the window, or -1 for NO_ANS.
inline WindowFeature toy_window(const ModelConfig& c, const std::string& qa_id,
                                std::size_t doc_offset, const std::vector<std::int32_t>& question,
                                const std::vector<std::int32_t>& context, int label_first,
                                int label_last) {
  WindowFeature w;
  w.qa_id = qa_id;
  w.feature_id = qa_id + ":" + std::to_string(doc_offset);
  w.question_len = question.size();
  w.doc_offset = doc_offset;
  w.context_len = context.size();
  const std::size_t L = c.physical_length();
  w.token_ids.assign(L, 0);
  w.segment_ids.assign(L, 0);
  w.attention_mask.assign(L, 0);
  std::size_t p = 0;
  auto put = [&](std::int32_t id, std::uint8_t seg) {
    w.token_ids[p] = id;
    w.segment_ids[p] = seg;
    w.attention_mask[p] = 1;
    ++p;
  };
  put(2, 0);
  for (auto id : question) put(id, 1);
  p += c.mid_pads;
  put(3, 0);
  for (auto id : context) put(id, 2);
  put(3, 0);
  for (std::size_t t = 0; t < context.size(); ++t) {
    const std::size_t at = 2 * (doc_offset + t);
    w.token_to_char.push_back({at, at + 1});
  }
  if (label_first >= 0) {
    w.label_start = w.context_begin() + static_cast<std::size_t>(label_first);
    w.label_end = w.context_begin() + static_cast<std::size_t>(label_last);
  }
  return w;
}

// Windows whose answer is the context token with id `marker`, so the task is learnable.
inline std::vector<WindowFeature> toy_dataset(const ModelConfig& c, std::size_t n,
                                              std::uint64_t seed, std::int32_t marker = 7) {
  std::mt19937_64 rng(seed);
  std::vector<WindowFeature> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::int32_t> ctx(4);
    for (auto& id : ctx) id = static_cast<std::int32_t>(8 + rng() % 12);
    const int at = static_cast<int>(rng() % 4);
    ctx[static_cast<std::size_t>(at)] = marker;
    out.push_back(toy_window(c, "q" + std::to_string(i), 0, {4, 5}, ctx, at, at));
  }
  return out;
}

}  // namespace distill_span::testing
