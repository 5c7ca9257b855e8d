#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

namespace distill_span {

enum class Architecture { conv, stack };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
  Architecture architecture = Architecture::conv;
  std::size_t vocab_size = 30522;
  std::size_t embed_dim = 768;               // d_e
  std::vector<std::size_t> conv_kernel_sizes{3, 7};
  std::size_t conv_filters = 64;             // per branch
  std::size_t model_width = 128;             // d_m
  std::size_t heads = 4;
  std::size_t ffn_inner = 256;
  std::size_t encoder_layers = 1;
  std::size_t seq_scorable = 384;
  std::size_t mid_pads = 10;
  double dropout_rate = 0.2;
  double leaky_alpha = 0.2;
  bool attention_mask = true;

  std::size_t physical_length() const noexcept { return seq_scorable + mid_pads; }

  // Throws ConfigError describing the first violated constraint.
  void validate() const;

  // Closed-form trainable parameter count (batch-norm running statistics excluded).
  std::size_t parameter_count() const;

  // GEMM and depthwise-convolution FLOPs for one window in inference.
  std::uint64_t flops_per_sample() const;
  std::uint64_t flops_per_sample(std::size_t physical_len) const;

  static ModelConfig conv_model(std::size_t vocab_size = 30522);
  // Six 768-wide layers with 12 heads, the distilled student stack.
  static ModelConfig small_stack(std::size_t vocab_size = 30522);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& c);
// Missing keys keep their defaults; unknown keys are a ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace distill_span
