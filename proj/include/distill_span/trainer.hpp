#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "distill_span/checkpoint.hpp"
#include "distill_span/model.hpp"
#include "distill_span/teacher.hpp"
#include "distill_span/windows.hpp"

namespace distill_span {

// ---- loss -----------------------------------------------------------------------

// softmax(z / T). Throws ParameterError unless T > 0.
std::vector<double> temperature_softmax(std::span<const double> z, double temperature);

enum class HardTermTemperature { same_t, unit_t };

struct DistillationConfig {
  double temperature = 3.5;
  double soft_weight = 0.9;
  double hard_weight = 0.1;
  HardTermTemperature hard_term = HardTermTemperature::same_t;

  void validate() const;
};

inline constexpr double kLogFloor = 1e-12;

struct LossResult {
  double loss = 0;
  Tensor<double> grad;       // d loss / d z, [scorable x 2]
  std::size_t clamped = 0;   // log terms that hit the floor
};

// z: [scorable x 2] student logits (start, end). With no teacher the loss is
// the hard-label cross-entropy alone at weight 1.
LossResult distillation_loss(const Tensor<double>& z, std::size_t label_start,
                             std::size_t label_end, const TeacherTargets* teacher,
                             const DistillationConfig& cfg);

// ---- schedule --------------------------------------------------------------------

enum class ScheduleVariant { conv, small };

struct ScheduleConfig {
  ScheduleVariant variant = ScheduleVariant::conv;
  std::size_t num_train_examples = 0;
  std::size_t total_epochs = 55;
  std::size_t batch_size = 60;

  std::size_t num_train_step() const;
  double num_warmup_steps() const;
};

// Linear warmup while step < warmup, then quadratic (conv) or linear (small) decay.
double learning_rate(std::size_t step, const ScheduleConfig& cfg);

// ---- optimizer -------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 0.01;  // added as lambda * w to decayed parameters' gradients
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One bias-corrected update of every trainable parameter.
  void step(const ParameterList<T>& params, double lr);

  std::size_t steps() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return cfg_; }

  // Moments are stored as checkpoint tensors "optimizer.m.<name>" / "optimizer.v.<name>".
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt, const ParameterList<T>& params);

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  AdamConfig cfg_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

// ---- training ---------------------------------------------------------------------

using TeacherMap = std::map<std::string, TeacherTargets>;

struct StepResult {
  double loss = 0;
  double lr = 0;
  std::size_t step = 0;  // step index the update used
  std::size_t clamped = 0;
  std::size_t missing_teacher = 0;
};

// Mean distillation loss and its gradient over a batch, without an update.
template <typename T>
struct BatchLoss {
  double loss = 0;
  Tensor<T> dz;
  std::size_t clamped = 0;
  std::size_t missing_teacher = 0;
};

template <typename T>
BatchLoss<T> batch_loss(const Tensor<T>& z, std::span<const WindowFeature* const> windows,
                        const TeacherMap* teacher, const DistillationConfig& cfg);

// Forward, loss, backward and one Adam update at learning_rate(optimizer.steps()).
// Throws ParameterError on an empty batch and NonFiniteLossError (before any
// update) when the loss is not finite.
template <typename T>
StepResult train_step(std::span<const WindowFeature* const> windows, const TeacherMap* teacher,
                      SpanModel<T>& model, Adam<T>& optimizer, const ScheduleConfig& schedule,
                      const DistillationConfig& cfg, Rng& rng);

struct TrainConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  DistillationConfig distillation;
  AdamConfig optimizer;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  bool save_optimizer_state = false;
  std::string dataset, vocab, teacher_logits, out_dir;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

struct TrainHooks {
  // Called after each step with its result.
  std::function<void(const StepResult&)> on_step;
  // Called after every pass over the data (1-based epoch).
  std::function<void(std::size_t epoch)> on_epoch;
};

struct TrainSummary {
  std::size_t steps = 0;
  double final_loss = 0;
  std::size_t clamped = 0;
  std::size_t missing_teacher = 0;
  std::vector<std::filesystem::path> checkpoints;
};

// Runs num_train_step updates over the shuffled features. Writes JSON-lines
// {step, lr, loss} to `log` when given and checkpoints into cfg.out_dir when it
// is non-empty. On a non-finite loss the pre-step model is saved as
// "last-good.ckpt" and NonFiniteLossError is rethrown.
template <typename T>
TrainSummary train(SpanModel<T>& model, const std::vector<WindowFeature>& features,
                   const TeacherMap* teacher, const TrainConfig& cfg, std::ostream* log = nullptr,
                   const TrainHooks& hooks = {});

}  // namespace distill_span
