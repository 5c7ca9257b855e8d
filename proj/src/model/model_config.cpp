#include "distill_span/model_config.hpp"

#include <set>

#include "distill_span/errors.hpp"

namespace distill_span {

std::string to_string(Architecture a) { return a == Architecture::conv ? "conv" : "stack"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "conv") return Architecture::conv;
  if (s == "stack" || s == "small_stack") return Architecture::stack;
  throw ConfigError("unknown architecture '" + s + "' (expected conv or stack)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (embed_dim == 0 || model_width == 0 || ffn_inner == 0) fail("widths must be positive");
  if (heads == 0 || model_width % heads != 0) {
    fail("model_width " + std::to_string(model_width) + " not divisible by heads " +
         std::to_string(heads));
  }
  if (encoder_layers < 1) fail("encoder_layers must be at least 1");
  if (seq_scorable < 4) fail("seq_scorable too small");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
  if (architecture == Architecture::conv) {
    if (conv_kernel_sizes.empty()) fail("conv architecture needs at least one kernel size");
    for (std::size_t k : conv_kernel_sizes)
      if (k % 2 == 0) fail("kernel size " + std::to_string(k) + " is not odd");
    if (conv_filters * conv_kernel_sizes.size() != model_width) {
      fail("branch filters sum to " + std::to_string(conv_filters * conv_kernel_sizes.size()) +
           " but model_width is " + std::to_string(model_width));
    }
  } else if (embed_dim != model_width) {
    fail("stack architecture needs embed_dim == model_width");
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t de = embed_dim, d = model_width, f = ffn_inner;
  std::size_t n = vocab_size * de + physical_length() * de + 3 * de + 2 * de;
  if (architecture == Architecture::conv) {
    for (std::size_t k : conv_kernel_sizes) n += k * de + de * conv_filters + 3 * conv_filters;
  }
  const std::size_t layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
  n += encoder_layers * layer;
  n += 2 * d + 2;
  return n;
}

std::uint64_t ModelConfig::flops_per_sample() const { return flops_per_sample(physical_length()); }

std::uint64_t ModelConfig::flops_per_sample(std::size_t len) const {
  const std::uint64_t L = len, de = embed_dim, d = model_width, f = ffn_inner;
  std::uint64_t n = 0;
  if (architecture == Architecture::conv) {
    for (std::size_t k : conv_kernel_sizes) n += 2 * L * de * k + 2 * L * de * conv_filters;
  }
  const std::uint64_t layer = 2 * L * d * d * 4 + 2 * 2 * L * L * d + 2 * 2 * L * d * f;
  n += encoder_layers * layer;
  const std::uint64_t scored = len > mid_pads ? len - mid_pads : len;
  n += 2 * scored * d * 2;
  return n;
}

ModelConfig ModelConfig::conv_model(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::small_stack(std::size_t vocab_size) {
  ModelConfig c;
  c.architecture = Architecture::stack;
  c.vocab_size = vocab_size;
  c.embed_dim = c.model_width = 768;
  c.conv_kernel_sizes.clear();
  c.conv_filters = 0;
  c.heads = 12;
  c.ffn_inner = 3072;
  c.encoder_layers = 6;
  c.dropout_rate = 0.1;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"architecture", to_string(c.architecture)},
      {"vocab_size", c.vocab_size},
      {"embed_dim", c.embed_dim},
      {"conv_kernel_sizes", c.conv_kernel_sizes},
      {"conv_filters", c.conv_filters},
      {"model_width", c.model_width},
      {"heads", c.heads},
      {"ffn_inner", c.ffn_inner},
      {"encoder_layers", c.encoder_layers},
      {"seq_scorable", c.seq_scorable},
      {"mid_pads", c.mid_pads},
      {"dropout_rate", c.dropout_rate},
      {"leaky_alpha", c.leaky_alpha},
      {"attention_mask", c.attention_mask},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known{
      "architecture", "vocab_size", "embed_dim", "conv_kernel_sizes", "conv_filters",
      "model_width", "heads", "ffn_inner", "encoder_layers", "seq_scorable", "mid_pads",
      "dropout_rate", "leaky_alpha", "attention_mask"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("model config: unknown key '" + key + "'");
  ModelConfig c;
  try {
    if (j.contains("architecture"))
      c.architecture = architecture_from_string(j["architecture"].get<std::string>());
    if (c.architecture == Architecture::stack) c = ModelConfig::small_stack();
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("vocab_size", c.vocab_size);
    get("embed_dim", c.embed_dim);
    get("conv_kernel_sizes", c.conv_kernel_sizes);
    get("conv_filters", c.conv_filters);
    get("model_width", c.model_width);
    get("heads", c.heads);
    get("ffn_inner", c.ffn_inner);
    get("encoder_layers", c.encoder_layers);
    get("seq_scorable", c.seq_scorable);
    get("mid_pads", c.mid_pads);
    get("dropout_rate", c.dropout_rate);
    get("leaky_alpha", c.leaky_alpha);
    get("attention_mask", c.attention_mask);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

}  // namespace distill_span
