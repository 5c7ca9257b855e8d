#pragma once

// Library entry points behind the command-line tool. Each returns normally on
// success and throws a distill_span::Error subclass on failure.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distill_span/decoder.hpp"
#include "distill_span/model_config.hpp"
#include "distill_span/trainer.hpp"

namespace distill_span {

// Caps OpenMP threads from DISTILL_SPAN_THREADS when set to a positive integer.
// Returns the cap applied, or 0.
int apply_thread_env();

// Throws DataError naming `what` and the path when it does not exist.
void require_file(const std::filesystem::path& path, const std::string& what);

// Flags shared by commands that build or check a model config.
struct ModelOverrides {
  bool no_attention_mask = false;
  std::optional<std::vector<std::size_t>> kernel_sizes;
  void apply(ModelConfig& c) const;
};

std::vector<std::size_t> parse_size_list(const std::string& text);

// ---- tokenize -----------------------------------------------------------------------

struct TokenizeOptions {
  std::filesystem::path dataset, vocab, out;  // out: directory for features.jsonl and stats.json
  std::optional<ModelConfig> model;            // window geometry; defaults otherwise
};

FeatureStats cmd_tokenize(const TokenizeOptions& opt, std::ostream& out);

// ---- train --------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dataset, vocab, teacher_logits, out, checkpoint;
  std::optional<std::size_t> batch_size;
  ModelOverrides model;
  bool hard_unit_temperature = false;
};

// Resolved configuration after applying command-line overrides.
TrainConfig resolve_train_config(const TrainOptions& opt);

TrainSummary cmd_train(const TrainOptions& opt, std::ostream& out);

// ---- eval ---------------------------------------------------------------------------

struct EvalOptions {
  std::filesystem::path checkpoint, dataset, vocab;
  std::optional<std::filesystem::path> out;  // directory for predictions.json and diagnostics.json
  std::optional<std::filesystem::path> config;  // when given, its model must match the checkpoint
  ModelOverrides model;
  std::size_t batch_size = 64;
  std::size_t max_answer_len = kMaxAnswerLen;
};

EvalResult cmd_eval(const EvalOptions& opt, std::ostream& out);

// ---- distill-init ---------------------------------------------------------------------

struct DistillInitOptions {
  std::filesystem::path teacher, out;
  std::size_t layers = 6;
};

void cmd_distill_init(const DistillInitOptions& opt, std::ostream& out);

// ---- bench --------------------------------------------------------------------------

struct BenchOptions {
  std::vector<std::string> architectures{"conv", "small_stack"};
  std::size_t batch_size = 100;
  std::size_t seq_len = 384;  // scorable positions; the physical length adds the mid pads
  std::size_t warmup_batches = 3;
  std::size_t measured_batches = 10;
  std::size_t repeats = 3;  // the median run is reported
  std::uint64_t seed = 0;
  ModelOverrides model;
};

struct BenchRow {
  std::string architecture;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;  // physical positions per sample
  std::size_t warmup_batches = 0;
  std::size_t measured_batches = 0;
  double samples_per_second = 0;
  std::vector<double> run_samples_per_second;
  std::uint64_t flops_per_sample = 0;       // at the measured length
  std::uint64_t flops_per_sample_full = 0;  // at 384 + 10 positions
  std::string note;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::string hardware;
};

// Model shapes for "conv" and "small_stack" at the given scorable length.
ModelConfig bench_model_config(const std::string& architecture, std::size_t seq_len);

BenchReport cmd_bench(const BenchOptions& opt);
std::string bench_table(const BenchReport& r);
nlohmann::json bench_json(const BenchReport& r);

}  // namespace distill_span
