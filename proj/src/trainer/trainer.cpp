#include "distill_span/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "distill_span/errors.hpp"

namespace distill_span {

using nlohmann::json;

// ---- loss -----------------------------------------------------------------------

namespace {

std::vector<double> log_softmax(std::span<const double> z, double t) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v / t);
  double sum = 0;
  for (double v : z) sum += std::exp(v / t - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / t - lse;
  return out;
}

struct ColumnLoss {
  double loss = 0;
  std::vector<double> grad;
  std::size_t clamped = 0;
};

// One column (start or end) of the loss.
ColumnLoss column_loss(std::span<const double> z, std::size_t label,
                       std::span<const double> teacher, const DistillationConfig& cfg) {
  const std::size_t n = z.size();
  if (label >= n) throw ParameterError("distillation loss: label " + std::to_string(label) + " out of range");
  const double T = cfg.temperature;
  const bool has_teacher = !teacher.empty();
  const double hw = has_teacher ? cfg.hard_weight : 1.0;
  const double sw = has_teacher ? cfg.soft_weight : 0.0;
  const double th = cfg.hard_term == HardTermTemperature::same_t ? T : 1.0;

  ColumnLoss out;
  out.grad.assign(n, 0.0);
  auto safe_log = [&](double logp) {
    if (std::exp(logp) == 0.0) {
      ++out.clamped;
      return std::log(kLogFloor);
    }
    return logp;
  };

  const std::vector<double> log_h = log_softmax(z, th);
  if (hw != 0.0) {
    out.loss -= hw * safe_log(log_h[label]);
    for (std::size_t i = 0; i < n; ++i)
      out.grad[i] += hw / th * (std::exp(log_h[i]) - (i == label ? 1.0 : 0.0));
  }
  if (sw != 0.0) {
    const std::vector<double> log_s = log_softmax(z, T);
    const std::vector<double> b = temperature_softmax(teacher, T);
    double soft = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (b[i] != 0.0) soft += b[i] * safe_log(log_s[i]);
    out.loss -= sw * T * T * soft;
    for (std::size_t i = 0; i < n; ++i) out.grad[i] += sw * T * (std::exp(log_s[i]) - b[i]);
  }
  return out;
}

}  // namespace

std::vector<double> temperature_softmax(std::span<const double> z, double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("temperature must be positive, got " + std::to_string(temperature));
  }
  std::vector<double> p = log_softmax(z, temperature);
  for (double& v : p) v = std::exp(v);
  return p;
}

void DistillationConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("distillation: temperature must be positive");
  if (soft_weight < 0.0 || hard_weight < 0.0) throw ConfigError("distillation: weights must be non-negative");
}

LossResult distillation_loss(const Tensor<double>& z, std::size_t label_start,
                             std::size_t label_end, const TeacherTargets* teacher,
                             const DistillationConfig& cfg) {
  if (z.rank() != 2 || z.dim(1) != 2) {
    throw DimensionError("distillation loss: logits " + shape_to_string(z.shape()) + ", expected [n x 2]");
  }
  if (!(cfg.temperature > 0.0)) throw ParameterError("distillation loss: temperature must be positive");
  const std::size_t n = z.dim(0);
  if (teacher && (teacher->start_logits.size() != n || teacher->end_logits.size() != n)) {
    throw DimensionError("distillation loss: teacher " + teacher->feature_id + " has " +
                         std::to_string(teacher->start_logits.size()) + " logits, student " +
                         std::to_string(n));
  }
  LossResult r;
  r.grad = Tensor<double>({n, 2});
  for (std::size_t col = 0; col < 2; ++col) {
    std::vector<double> zc(n);
    for (std::size_t i = 0; i < n; ++i) zc[i] = z.at(i, col);
    std::span<const double> tc;
    if (teacher) tc = col == 0 ? teacher->start_logits : teacher->end_logits;
    const ColumnLoss c = column_loss(zc, col == 0 ? label_start : label_end, tc, cfg);
    r.loss += 0.5 * c.loss;
    r.clamped += c.clamped;
    for (std::size_t i = 0; i < n; ++i) r.grad.at(i, col) = 0.5 * c.grad[i];
  }
  return r;
}

// ---- schedule --------------------------------------------------------------------

std::size_t ScheduleConfig::num_train_step() const {
  if (batch_size == 0) throw ConfigError("schedule: batch_size must be positive");
  return num_train_examples * total_epochs / batch_size;
}

double ScheduleConfig::num_warmup_steps() const { return 0.1 * static_cast<double>(num_train_step()); }

double learning_rate(std::size_t step, const ScheduleConfig& cfg) {
  const double total = static_cast<double>(cfg.num_train_step());
  const double warmup = cfg.num_warmup_steps();
  const double s = static_cast<double>(step);
  const double peak = cfg.variant == ScheduleVariant::conv ? 1e-3 : 3e-6;
  if (s < warmup) return s / warmup * peak;
  const double remaining = total > 0 ? 1.0 - s / total : 0.0;
  if (cfg.variant == ScheduleVariant::conv) return 9.999e-4 * remaining * remaining + 1e-7;
  return 3e-6 * remaining;
}

// ---- optimizer -------------------------------------------------------------------

template <typename T>
void Adam<T>::step(const ParameterList<T>& params, double lr) {
  if (!(lr >= 0.0)) throw ParameterError("adam: learning rate must be non-negative");
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(step_)), c2 = 1.0 - std::pow(b2, double(step_));
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    auto [it, fresh] = moments_.try_emplace(p->name);
    if (fresh) it->second = {Tensor<T>(p->value.shape()), Tensor<T>(p->value.shape())};
    Moments& mo = it->second;
    if (mo.m.shape() != p->value.shape()) {
      throw DimensionError("adam: moment shape mismatch for " + p->name);
    }
    const double decay = p->decay ? cfg_.weight_decay : 0.0;
    T* w = p->value.data();
    const T* g = p->grad.data();
    T* m = mo.m.data();
    T* v = mo.v.data();
    const auto n = static_cast<std::ptrdiff_t>(p->value.size());
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const double gi = double(g[i]) + decay * double(w[i]);
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(double(w[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.epsilon));
    }
  }
}

template <typename T>
void Adam<T>::save(Checkpoint& ckpt) const {
  constexpr DType dt = sizeof(T) == 4 ? DType::f32 : DType::f64;
  for (const auto& [name, mo] : moments_) {
    ckpt.put({"optimizer.m." + name, mo.m.shape(), dt, {mo.m.data(), mo.m.data() + mo.m.size()}, false});
    ckpt.put({"optimizer.v." + name, mo.v.shape(), dt, {mo.v.data(), mo.v.data() + mo.v.size()}, false});
  }
  ckpt.meta["optimizer_step"] = step_;
}

template <typename T>
void Adam<T>::load(const Checkpoint& ckpt, const ParameterList<T>& params) {
  moments_.clear();
  step_ = ckpt.meta.value("optimizer_step", std::size_t{0});
  for (const Parameter<T>* p : params) {
    const StoredTensor* m = ckpt.find("optimizer.m." + p->name);
    const StoredTensor* v = ckpt.find("optimizer.v." + p->name);
    if (!m || !v) continue;
    if (m->shape != p->value.shape() || v->shape != p->value.shape()) {
      throw FormatError("optimizer state for " + p->name + " has the wrong shape");
    }
    Moments mo{Tensor<T>(m->shape), Tensor<T>(v->shape)};
    for (std::size_t i = 0; i < m->values.size(); ++i) {
      mo.m[i] = static_cast<T>(m->values[i]);
      mo.v[i] = static_cast<T>(v->values[i]);
    }
    moments_[p->name] = std::move(mo);
  }
}

template class Adam<float>;
template class Adam<double>;

// ---- training step ----------------------------------------------------------------

template <typename T>
BatchLoss<T> batch_loss(const Tensor<T>& z, std::span<const WindowFeature* const> windows,
                        const TeacherMap* teacher, const DistillationConfig& cfg) {
  const std::size_t B = windows.size();
  if (B == 0) throw ParameterError("empty batch");
  if (z.rank() != 3 || z.dim(0) != B || z.dim(2) != 2) {
    throw DimensionError("batch loss: logits " + shape_to_string(z.shape()) + " for " +
                         std::to_string(B) + " windows");
  }
  const std::size_t S = z.dim(1);
  BatchLoss<T> out;
  out.dz = Tensor<T>(z.shape());
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<double> zb({S, 2});
    for (std::size_t i = 0; i < 2 * S; ++i) zb[i] = static_cast<double>(z[b * 2 * S + i]);
    const TeacherTargets* t = nullptr;
    if (teacher) {
      auto it = teacher->find(windows[b]->feature_id);
      if (it != teacher->end()) t = &it->second;
    }
    if (!t) ++out.missing_teacher;
    const LossResult r = distillation_loss(zb, windows[b]->label_start, windows[b]->label_end, t, cfg);
    out.loss += r.loss / double(B);
    out.clamped += r.clamped;
    for (std::size_t i = 0; i < 2 * S; ++i) out.dz[b * 2 * S + i] = static_cast<T>(r.grad[i] / double(B));
  }
  return out;
}

template <typename T>
StepResult train_step(std::span<const WindowFeature* const> windows, const TeacherMap* teacher,
                      SpanModel<T>& model, Adam<T>& optimizer, const ScheduleConfig& schedule,
                      const DistillationConfig& cfg, Rng& rng) {
  if (windows.empty()) throw ParameterError("train_step: empty batch");
  const Batch batch = make_batch(windows);
  ModelTape<T> tape;
  const Tensor<T> z = model.forward(batch, Mode::train, &rng, &tape);
  const BatchLoss<T> bl = batch_loss(z, windows, teacher, cfg);
  if (!std::isfinite(bl.loss)) {
    throw NonFiniteLossError("non-finite loss at step " + std::to_string(optimizer.steps()) +
                             " (first window " + windows.front()->feature_id + ")");
  }
  model.zero_grad();
  model.backward(tape, bl.dz);
  StepResult r;
  r.step = optimizer.steps();
  r.lr = learning_rate(r.step, schedule);
  r.loss = bl.loss;
  r.clamped = bl.clamped;
  r.missing_teacher = bl.missing_teacher;
  optimizer.step(model.parameters(), r.lr);
  return r;
}

// ---- config ----------------------------------------------------------------------

namespace {

std::string to_string(ScheduleVariant v) { return v == ScheduleVariant::conv ? "conv" : "small"; }

ScheduleVariant schedule_variant(const std::string& s) {
  if (s == "conv") return ScheduleVariant::conv;
  if (s == "small") return ScheduleVariant::small;
  throw ConfigError("unknown schedule variant '" + s + "'");
}

std::string to_string(HardTermTemperature h) { return h == HardTermTemperature::same_t ? "same_T" : "unit_T"; }

HardTermTemperature hard_term(const std::string& s) {
  if (s == "same_T") return HardTermTemperature::same_t;
  if (s == "unit_T") return HardTermTemperature::unit_t;
  throw ConfigError("unknown hard_term_temperature '" + s + "' (expected same_T or unit_T)");
}

}  // namespace

json to_json(const TrainConfig& c) {
  return {
      {"model", to_json(c.model)},
      {"schedule",
       {{"variant", to_string(c.schedule.variant)},
        {"num_train_examples", c.schedule.num_train_examples},
        {"total_epochs", c.schedule.total_epochs},
        {"batch_size", c.schedule.batch_size}}},
      {"distillation",
       {{"temperature", c.distillation.temperature},
        {"soft_weight", c.distillation.soft_weight},
        {"hard_weight", c.distillation.hard_weight},
        {"hard_term_temperature", to_string(c.distillation.hard_term)}}},
      {"optimizer",
       {{"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"seed", c.seed},
      {"checkpoint_every", c.checkpoint_every},
      {"save_optimizer_state", c.save_optimizer_state},
      {"dataset", c.dataset},
      {"vocab", c.vocab},
      {"teacher_logits", c.teacher_logits},
      {"out_dir", c.out_dir},
  };
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("training config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end())
      throw ConfigError("training config: unknown key \"" + key + "\" in " + where);
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  reject_unknown(j, {"model", "schedule", "distillation", "optimizer", "seed", "checkpoint_every",
                     "save_optimizer_state", "dataset", "vocab", "teacher_logits", "out_dir"},
                 "top level");
  if (j.contains("schedule"))
    reject_unknown(j["schedule"], {"variant", "num_train_examples", "total_epochs", "batch_size"}, "schedule");
  if (j.contains("distillation"))
    reject_unknown(j["distillation"], {"temperature", "soft_weight", "hard_weight", "hard_term_temperature"},
                   "distillation");
  if (j.contains("optimizer"))
    reject_unknown(j["optimizer"], {"beta1", "beta2", "epsilon", "weight_decay"}, "optimizer");
  try {
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("schedule")) {
      const json& s = j["schedule"];
      if (s.contains("variant")) c.schedule.variant = schedule_variant(s["variant"].get<std::string>());
      c.schedule.num_train_examples = s.value("num_train_examples", c.schedule.num_train_examples);
      c.schedule.total_epochs = s.value("total_epochs", c.schedule.total_epochs);
      c.schedule.batch_size = s.value("batch_size", c.schedule.batch_size);
    }
    if (j.contains("distillation")) {
      const json& d = j["distillation"];
      c.distillation.temperature = d.value("temperature", c.distillation.temperature);
      c.distillation.soft_weight = d.value("soft_weight", c.distillation.soft_weight);
      c.distillation.hard_weight = d.value("hard_weight", c.distillation.hard_weight);
      if (d.contains("hard_term_temperature"))
        c.distillation.hard_term = hard_term(d["hard_term_temperature"].get<std::string>());
    }
    if (j.contains("optimizer")) {
      const json& o = j["optimizer"];
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    }
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.save_optimizer_state = j.value("save_optimizer_state", c.save_optimizer_state);
    c.dataset = j.value("dataset", c.dataset);
    c.vocab = j.value("vocab", c.vocab);
    c.teacher_logits = j.value("teacher_logits", c.teacher_logits);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.distillation.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  TrainConfig c = train_config_from_json(j);
  // Relative paths in the file resolve against the file's directory.
  const auto base = path.parent_path();
  for (std::string* p : {&c.dataset, &c.vocab, &c.teacher_logits, &c.out_dir}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).string();
  }
  return c;
}

// ---- loop ---------------------------------------------------------------------------

namespace {

template <typename T>
std::filesystem::path write_checkpoint(const SpanModel<T>& model, const Adam<T>& opt,
                                       const TrainConfig& cfg, const std::string& name) {
  Checkpoint ck = capture_model(model);
  if (cfg.save_optimizer_state) opt.save(ck);
  ck.meta["step"] = opt.steps();
  ck.meta["seed"] = cfg.seed;
  const auto path = std::filesystem::path(cfg.out_dir) / name;
  save_checkpoint(ck, path);
  return path;
}

}  // namespace

template <typename T>
TrainSummary train(SpanModel<T>& model, const std::vector<WindowFeature>& features,
                   const TeacherMap* teacher, const TrainConfig& cfg, std::ostream* log,
                   const TrainHooks& hooks) {
  if (features.empty()) throw ParameterError("train: no training windows");
  cfg.distillation.validate();
  ScheduleConfig schedule = cfg.schedule;
  if (schedule.num_train_examples == 0) schedule.num_train_examples = features.size();
  const std::size_t total = schedule.num_train_step();
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  Adam<T> opt(cfg.optimizer);
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::size_t epoch = 0;

  TrainSummary summary;
  std::vector<const WindowFeature*> batch;
  while (opt.steps() < total) {
    batch.clear();
    while (batch.size() < schedule.batch_size) {
      if (cursor == order.size()) {
        if (epoch > 0 && hooks.on_epoch) hooks.on_epoch(epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
        ++epoch;
      }
      batch.push_back(&features[order[cursor++]]);
    }
    StepResult r;
    try {
      r = train_step<T>(batch, teacher, model, opt, schedule, cfg.distillation, dropout_rng);
    } catch (const NonFiniteLossError&) {
      if (!cfg.out_dir.empty()) summary.checkpoints.push_back(write_checkpoint(model, opt, cfg, "last-good.ckpt"));
      throw;
    }
    summary.steps = opt.steps();
    summary.final_loss = r.loss;
    summary.clamped += r.clamped;
    summary.missing_teacher += r.missing_teacher;
    if (log) {
      *log << json{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"epoch", epoch}}.dump() << '\n';
    }
    if (hooks.on_step) hooks.on_step(r);
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && opt.steps() % cfg.checkpoint_every == 0 &&
        opt.steps() < total) {
      summary.checkpoints.push_back(
          write_checkpoint(model, opt, cfg, "step-" + std::to_string(opt.steps()) + ".ckpt"));
    }
  }
  if (cursor == order.size() && hooks.on_epoch) hooks.on_epoch(epoch);
  if (!cfg.out_dir.empty()) summary.checkpoints.push_back(write_checkpoint(model, opt, cfg, "final.ckpt"));
  return summary;
}

#define DISTILL_SPAN_INSTANTIATE(T)                                                            \
  template BatchLoss<T> batch_loss(const Tensor<T>&, std::span<const WindowFeature* const>,    \
                                   const TeacherMap*, const DistillationConfig&);              \
  template StepResult train_step(std::span<const WindowFeature* const>, const TeacherMap*,     \
                                 SpanModel<T>&, Adam<T>&, const ScheduleConfig&,               \
                                 const DistillationConfig&, Rng&);                             \
  template TrainSummary train(SpanModel<T>&, const std::vector<WindowFeature>&,                \
                              const TeacherMap*, const TrainConfig&, std::ostream*,            \
                              const TrainHooks&);

DISTILL_SPAN_INSTANTIATE(float)
DISTILL_SPAN_INSTANTIATE(double)

#undef DISTILL_SPAN_INSTANTIATE

}  // namespace distill_span
