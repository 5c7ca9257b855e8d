// distill-span: tokenize, train, eval, bench and distill-init.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "distill_span/commands.hpp"
#include "distill_span/errors.hpp"

namespace ds = distill_span;

namespace {

void add_model_flags(CLI::App* cmd, ds::ModelOverrides& m, std::string& kernels) {
  cmd->add_flag("--no-attention-mask", m.no_attention_mask, "Let every position attend to the pads");
  cmd->add_option("--kernel-sizes", kernels, "Comma-separated conv kernel sizes, e.g. 3,7");
}

void finish_model_flags(ds::ModelOverrides& m, const std::string& kernels) {
  if (!kernels.empty()) m.kernel_sizes = ds::parse_size_list(kernels);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Span-extraction QA with a convolutional student and knowledge distillation"};
  app.require_subcommand(1);

  std::string kernels;

  ds::TokenizeOptions tok;
  std::string tok_config;
  auto* tokenize = app.add_subcommand("tokenize", "Turn a SQuAD file into window features");
  tokenize->add_option("--dataset", tok.dataset, "SQuAD v1.1 JSON")->required();
  tokenize->add_option("--vocab", tok.vocab, "WordPiece vocabulary, one token per line")->required();
  tokenize->add_option("--out", tok.out, "Directory for features.jsonl and stats.json");
  tokenize->add_option("--config", tok_config, "Training config whose model sets the window geometry");

  ds::TrainOptions tr;
  std::uint64_t train_seed = 0;
  std::size_t train_batch = 0;
  std::string train_dataset, train_vocab, train_teacher, train_out, train_ckpt;
  auto* train = app.add_subcommand("train", "Train a model from a JSON config");
  train->add_option("--config", tr.config, "Training config JSON")->required();
  auto* seed_opt = train->add_option("--seed", train_seed, "Override the config seed");
  train->add_option("--dataset", train_dataset, "Override the training SQuAD file");
  train->add_option("--vocab", train_vocab, "Override the vocabulary");
  train->add_option("--teacher-logits", train_teacher, "Teacher logits, JSON lines");
  train->add_option("--out", train_out, "Output directory for checkpoints and the log");
  train->add_option("--checkpoint", train_ckpt, "Initial weights, e.g. from distill-init");
  auto* batch_opt = train->add_option("--batch-size", train_batch, "Override the batch size");
  train->add_flag("--hard-unit-temperature", tr.hard_unit_temperature,
                  "Hard-label term at temperature 1 instead of T");
  add_model_flags(train, tr.model, kernels);

  ds::EvalOptions ev;
  std::string eval_config, eval_out;
  auto* eval = app.add_subcommand("eval", "Predict answers and score them");
  eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  eval->add_option("--dataset", ev.dataset, "SQuAD v1.1 JSON")->required();
  eval->add_option("--vocab", ev.vocab, "WordPiece vocabulary")->required();
  eval->add_option("--out", eval_out, "Directory for predictions.json and diagnostics.json");
  eval->add_option("--config", eval_config, "Config whose model must match the checkpoint");
  eval->add_option("--batch-size", ev.batch_size, "Windows per forward pass")->check(CLI::PositiveNumber);
  eval->add_option("--max-answer-len", ev.max_answer_len, "Longest answer in tokens")
      ->check(CLI::PositiveNumber);
  add_model_flags(eval, ev.model, kernels);

  ds::BenchOptions bo;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench", "Inference throughput of conv vs small_stack");
  bench->add_option("--arch", bo.architectures, "conv and/or small_stack")->delimiter(',');
  bench->add_option("--batch-size", bo.batch_size, "Samples per batch")->check(CLI::PositiveNumber);
  bench->add_option("--seq-len", bo.seq_len, "Scorable positions per sample")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", bo.warmup_batches, "Untimed batches per run");
  bench->add_option("--batches", bo.measured_batches, "Timed batches per run")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", bo.repeats, "Runs; the median is reported")->check(CLI::PositiveNumber);
  bench->add_option("--seed", bo.seed, "Weight and input seed");
  bench->add_option("--out", bench_out, "Write the report as JSON");
  add_model_flags(bench, bo.model, kernels);

  ds::DistillInitOptions di;
  auto* init = app.add_subcommand("distill-init", "Slice a teacher's odd layers into a student");
  init->add_option("--checkpoint", di.teacher, "Teacher checkpoint")->required();
  init->add_option("--out", di.out, "Student checkpoint path")->required();
  init->add_option("--layers", di.layers, "Student encoder layers")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    ds::apply_thread_env();
    if (*tokenize) {
      if (!tok_config.empty()) tok.model = ds::load_train_config(tok_config).model;
      ds::cmd_tokenize(tok, std::cout);
    } else if (*train) {
      finish_model_flags(tr.model, kernels);
      if (*seed_opt) tr.seed = train_seed;
      if (*batch_opt) tr.batch_size = train_batch;
      if (!train_dataset.empty()) tr.dataset = train_dataset;
      if (!train_vocab.empty()) tr.vocab = train_vocab;
      if (!train_teacher.empty()) tr.teacher_logits = train_teacher;
      if (!train_out.empty()) tr.out = train_out;
      if (!train_ckpt.empty()) tr.checkpoint = train_ckpt;
      ds::cmd_train(tr, std::cout);
    } else if (*eval) {
      finish_model_flags(ev.model, kernels);
      if (!eval_out.empty()) ev.out = eval_out;
      if (!eval_config.empty()) ev.config = eval_config;
      ds::cmd_eval(ev, std::cout);
    } else if (*bench) {
      finish_model_flags(bo.model, kernels);
      const auto report = ds::cmd_bench(bo);
      std::cout << ds::bench_table(report);
      if (!bench_out.empty()) {
        std::ofstream f(bench_out);
        if (!f) throw ds::DataError("cannot write " + bench_out);
        f << ds::bench_json(report).dump(2) << "\n";
      }
    } else if (*init) {
      ds::cmd_distill_init(di, std::cout);
    }
  } catch (const ds::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
