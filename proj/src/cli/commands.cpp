#include "distill_span/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <new>
#include <random>
#include <sstream>

#include "distill_span/checkpoint.hpp"
#include "distill_span/errors.hpp"
#include "distill_span/kernels.hpp"
#include "distill_span/squad.hpp"
#include "distill_span/teacher.hpp"
#include "distill_span/tokenizer.hpp"
#include "distill_span/vocab.hpp"

namespace distill_span {

namespace fs = std::filesystem;
using nlohmann::json;

int apply_thread_env() {
  const char* env = std::getenv("DISTILL_SPAN_THREADS");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n <= 0)
    throw ConfigError(std::string("DISTILL_SPAN_THREADS must be a positive integer, got \"") + env + "\"");
  const int cap = static_cast<int>(std::min<long>(n, kernels::max_threads()));
  kernels::set_max_threads(cap);
  return cap;
}

void require_file(const fs::path& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is required");
  if (!fs::exists(path)) throw DataError(what + " not found: " + path.string());
}

void ModelOverrides::apply(ModelConfig& c) const {
  if (no_attention_mask) c.attention_mask = false;
  if (kernel_sizes) c.conv_kernel_sizes = *kernel_sizes;
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size())
      throw ConfigError("expected a comma-separated list of integers, got \"" + text + "\"");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

namespace {

WindowLayout layout_for(const ModelConfig& c) {
  WindowLayout l;
  l.scorable = c.seq_scorable;
  l.mid_pads = c.mid_pads;
  // Short test windows cannot hold a 128-token stride next to a long question.
  if (l.scorable > l.max_question + 3) l.stride = std::min(l.stride, l.capacity(l.max_question));
  return l;
}

FeatureSet load_features(const fs::path& dataset, const fs::path& vocab_path, const ModelConfig& c,
                         std::ostream& out) {
  require_file(dataset, "dataset");
  require_file(vocab_path, "vocab");
  const auto squad = load_squad_json(dataset);
  const Vocab vocab = Vocab::load(vocab_path);
  if (vocab.size() > c.vocab_size)
    throw ConfigError("vocab " + vocab_path.string() + " has " + std::to_string(vocab.size()) +
                      " tokens but the model embeds " + std::to_string(c.vocab_size));
  const WordpieceTokenizer tok(vocab);
  FeatureSet set = featurize(squad.records, tok, layout_for(c));
  out << "loaded " << squad.records.size() << " questions (" << squad.skipped_missing_offsets
      << " skipped without offsets, " << squad.offset_mismatches << " offset mismatches), "
      << set.features.size() << " windows\n";
  return set;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

}  // namespace

// ---- tokenize -----------------------------------------------------------------------

FeatureStats cmd_tokenize(const TokenizeOptions& opt, std::ostream& out) {
  const ModelConfig c = opt.model.value_or(ModelConfig{});
  const FeatureSet set = load_features(opt.dataset, opt.vocab, c, out);
  if (!opt.out.empty()) {
    fs::create_directories(opt.out);
    std::ofstream f(opt.out / "features.jsonl", std::ios::binary);
    if (!f) throw DataError("cannot write " + (opt.out / "features.jsonl").string());
    write_features_jsonl(f, set.features);
    write_text(opt.out / "stats.json", feature_stats_json(set.stats));
  }
  out << feature_stats_json(set.stats);
  return set.stats;
}

// ---- train --------------------------------------------------------------------------

TrainConfig resolve_train_config(const TrainOptions& opt) {
  require_file(opt.config, "config");
  TrainConfig c = load_train_config(opt.config);
  if (opt.seed) c.seed = *opt.seed;
  if (opt.dataset) c.dataset = *opt.dataset;
  if (opt.vocab) c.vocab = *opt.vocab;
  if (opt.teacher_logits) c.teacher_logits = *opt.teacher_logits;
  if (opt.out) c.out_dir = *opt.out;
  if (opt.batch_size) c.schedule.batch_size = *opt.batch_size;
  if (opt.hard_unit_temperature) c.distillation.hard_term = HardTermTemperature::unit_t;
  opt.model.apply(c.model);
  c.model.validate();
  c.distillation.validate();
  return c;
}

TrainSummary cmd_train(const TrainOptions& opt, std::ostream& out) {
  TrainConfig cfg = resolve_train_config(opt);
  const FeatureSet set = load_features(cfg.dataset, cfg.vocab, cfg.model, out);
  if (set.features.empty()) throw DataError("dataset " + cfg.dataset + " produced no windows");
  if (cfg.schedule.num_train_examples == 0) cfg.schedule.num_train_examples = set.features.size();

  std::optional<TeacherMap> teacher;
  if (!cfg.teacher_logits.empty()) {
    require_file(cfg.teacher_logits, "teacher logits");
    auto loaded = load_teacher_logits(cfg.teacher_logits, cfg.model.seq_scorable);
    out << "teacher logits: " << loaded.targets.size() << " windows (" << loaded.duplicates
        << " duplicates, " << loaded.rejected_lines << " rejected)\n";
    teacher = std::move(loaded.targets);
  }

  SpanModel<float> model(cfg.model, cfg.seed);
  if (opt.checkpoint) {
    require_file(*opt.checkpoint, "checkpoint");
    restore_model(model, load_checkpoint(*opt.checkpoint));
  }
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "config.json", to_json(cfg).dump(2) + "\n");
  }
  std::ofstream log_file;
  std::ostream* log = nullptr;
  if (!cfg.out_dir.empty()) {
    log_file.open(fs::path(cfg.out_dir) / "train_log.jsonl", std::ios::binary);
    log = &log_file;
  }
  out << "training " << cfg.schedule.num_train_step() << " steps\n";
  const TrainSummary s = train(model, set.features, teacher ? &*teacher : nullptr, cfg, log);
  out << "done: " << s.steps << " steps, final loss " << s.final_loss << ", " << s.clamped
      << " clamped log terms, " << s.missing_teacher << " windows without teacher logits\n";
  for (const auto& p : s.checkpoints) out << "checkpoint " << p.string() << "\n";
  return s;
}

// ---- eval ---------------------------------------------------------------------------

EvalResult cmd_eval(const EvalOptions& opt, std::ostream& out) {
  require_file(opt.checkpoint, "checkpoint");
  const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  ModelConfig expected = ckpt.config;
  if (opt.config) {
    require_file(*opt.config, "config");
    expected = load_train_config(*opt.config).model;
  }
  opt.model.apply(expected);
  if (!(expected == ckpt.config))
    throw FormatError("checkpoint " + opt.checkpoint.string() +
                      " was written for a different model config: " + to_json(ckpt.config).dump() +
                      " vs " + to_json(expected).dump());
  const SpanModel<float> model = model_from_checkpoint<float>(ckpt);
  const FeatureSet set = load_features(opt.dataset, opt.vocab, ckpt.config, out);
  const auto squad = load_squad_json(opt.dataset);
  const EvalResult r = evaluate(model, set.features, squad.records, opt.batch_size, opt.max_answer_len);
  if (opt.out) {
    write_text(*opt.out / "predictions.json", predictions_json(r));
    write_text(*opt.out / "diagnostics.json", diagnostics_json(r));
  }
  out << "questions " << r.metrics.questions << "  exact_match " << r.metrics.exact_match << "  f1 "
      << r.metrics.f1 << "  excluded " << r.excluded_questions << "  no_answer_fallbacks "
      << r.fallbacks << "\n";
  return r;
}

// ---- distill-init ---------------------------------------------------------------------

void cmd_distill_init(const DistillInitOptions& opt, std::ostream& out) {
  require_file(opt.teacher, "teacher checkpoint");
  if (opt.out.empty()) throw ConfigError("output path is required");
  const Checkpoint teacher = load_checkpoint(opt.teacher);
  const Checkpoint student = slice_teacher_layers(teacher, opt.layers);
  if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
  save_checkpoint(student, opt.out);
  out << "wrote " << opt.layers << "-layer student to " << opt.out.string() << "\n";
}

// ---- bench --------------------------------------------------------------------------

ModelConfig bench_model_config(const std::string& architecture, std::size_t seq_len) {
  ModelConfig c;
  if (architecture == "conv") {
    c = ModelConfig::conv_model();
  } else if (architecture == "small_stack") {
    c = ModelConfig::small_stack();
  } else {
    throw ConfigError("unknown bench architecture \"" + architecture + "\" (conv or small_stack)");
  }
  c.seq_scorable = seq_len;
  return c;
}

namespace {

// Question of 20 tokens, context filling the rest of the window.
Batch synthetic_batch(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t L = c.physical_length(), q = std::min<std::size_t>(20, c.seq_scorable / 4);
  Batch b;
  b.size = n;
  b.length = L;
  for (std::size_t w = 0; w < n; ++w) {
    b.question_len.push_back(q);
    for (std::size_t p = 0; p < L; ++p) {
      const bool pad = p > q && p <= q + c.mid_pads;
      const bool question = p >= 1 && p <= q;
      b.token_ids.push_back(pad ? 0 : static_cast<std::int32_t>(4 + rng() % (c.vocab_size - 4)));
      b.segment_ids.push_back(pad || p == 0 ? 0 : question ? 1 : 2);
      b.attention_mask.push_back(pad ? 0 : 1);
    }
  }
  return b;
}

double time_run(const SpanModel<float>& model, const Batch& batch, std::size_t warmup,
                std::size_t measured) {
  for (std::size_t i = 0; i < warmup; ++i) (void)model.infer(batch);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < measured; ++i) (void)model.infer(batch);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return static_cast<double>(measured * batch.size) / secs;
}

std::string hardware_note() {
  std::string cpu = "unknown CPU";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  return cpu + ", " + std::to_string(kernels::max_threads()) + " thread(s), float32";
}

}  // namespace

BenchReport cmd_bench(const BenchOptions& opt) {
  if (opt.batch_size == 0 || opt.measured_batches == 0 || opt.repeats == 0)
    throw ConfigError("bench: batch size, measured batches and repeats must be positive");
  BenchReport report;
  report.hardware = hardware_note();
  for (const auto& arch : opt.architectures) {
    ModelConfig c = bench_model_config(arch, opt.seq_len);
    opt.model.apply(c);
    c.validate();
    ModelConfig full = c;
    full.seq_scorable = 384;
    full.mid_pads = 10;

    BenchRow row;
    row.architecture = arch;
    row.seq_len = c.physical_length();
    row.warmup_batches = opt.warmup_batches;
    row.measured_batches = opt.measured_batches;
    row.flops_per_sample = c.flops_per_sample(c.physical_length());
    row.flops_per_sample_full = full.flops_per_sample(full.physical_length());
    const SpanModel<float> model(c, opt.seed);
    std::size_t batch = opt.batch_size;
    while (true) {
      try {
        const Batch b = synthetic_batch(c, batch, opt.seed);
        row.run_samples_per_second.clear();
        for (std::size_t r = 0; r < opt.repeats; ++r)
          row.run_samples_per_second.push_back(
              time_run(model, b, opt.warmup_batches, opt.measured_batches));
        break;
      } catch (const std::bad_alloc&) {
        if (batch == 1) throw;
        batch = std::max<std::size_t>(1, batch / 2);
        row.note = "batch reduced to " + std::to_string(batch) + " after allocation failure";
      }
    }
    row.batch_size = batch;
    auto sorted = row.run_samples_per_second;
    std::sort(sorted.begin(), sorted.end());
    row.samples_per_second = sorted[sorted.size() / 2];
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string bench_table(const BenchReport& r) {
  std::ostringstream o;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %6s %6s %8s %14s %16s %16s\n", "arch", "batch", "len",
                "timed", "samples/s", "GFLOP/sample", "GFLOP/sample@394");
  o << line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-12s %6zu %6zu %8zu %14.2f %16.4f %16.4f\n",
                  row.architecture.c_str(), row.batch_size, row.seq_len, row.measured_batches,
                  row.samples_per_second, static_cast<double>(row.flops_per_sample) * 1e-9,
                  static_cast<double>(row.flops_per_sample_full) * 1e-9);
    o << line;
    if (!row.note.empty()) o << "  note: " << row.note << "\n";
  }
  o << "hardware: " << r.hardware << "\n";
  return o.str();
}

json bench_json(const BenchReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"architecture", row.architecture},
                    {"batch_size", row.batch_size},
                    {"seq_len", row.seq_len},
                    {"warmup_batches", row.warmup_batches},
                    {"measured_batches", row.measured_batches},
                    {"samples_per_second", row.samples_per_second},
                    {"run_samples_per_second", row.run_samples_per_second},
                    {"flops_per_sample", row.flops_per_sample},
                    {"flops_per_sample_at_394", row.flops_per_sample_full},
                    {"note", row.note}});
  return {{"hardware", r.hardware}, {"rows", rows}};
}

}  // namespace distill_span
