#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "distill_span/model.hpp"
#include "distill_span/model_config.hpp"

namespace distill_span {

// File layout: "CDST", version byte, uint64 LE header length, UTF-8 JSON
// header {config, meta, tensors: [{name, shape, dtype, offset, nbytes, trainable}]},
// then the raw little-endian buffers in index order.
inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'S', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class DType { f32, f64 };

struct StoredTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> values;  // exact for both dtypes
  bool trainable = true;
};

struct Checkpoint {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  // Replaces a tensor of the same name or appends.
  void put(StoredTensor t);
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes,
                                  const std::string& source = "<memory>");

// Writes to a temporary sibling and renames, so a crash never leaves a partial file.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters plus batch-norm running statistics.
template <typename T>
Checkpoint capture_model(const SpanModel<T>& model);

// Copies every parameter and statistic from the checkpoint. The checkpoint's
// config must equal the model's; FormatError otherwise.
template <typename T>
void restore_model(SpanModel<T>& model, const Checkpoint& ckpt);

template <typename T>
SpanModel<T> model_from_checkpoint(const Checkpoint& ckpt);

// Student layer i (1-based) takes teacher layer 2i-1; everything outside the
// encoder is copied verbatim. Optimizer state is dropped.
Checkpoint slice_teacher_layers(const Checkpoint& teacher, std::size_t student_layers);

}  // namespace distill_span
