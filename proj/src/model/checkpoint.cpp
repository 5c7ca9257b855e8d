#include "distill_span/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "distill_span/errors.hpp"

namespace distill_span {

using nlohmann::json;

namespace {

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }
const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename U>
void append_le(std::vector<std::uint8_t>& out, U value) {
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

template <typename U>
U read_le(const std::uint8_t* p) {
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U v;
  std::memcpy(&v, bytes, sizeof(U));
  return v;
}

std::string bn_name(std::size_t branch, const char* what) {
  return "conv." + std::to_string(branch) + ".bn." + what;
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void Checkpoint::put(StoredTensor t) {
  for (auto& existing : tensors) {
    if (existing.name == t.name) {
      existing = std::move(t);
      return;
    }
  }
  tensors.push_back(std::move(t));
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != shape_size(t.shape)) {
      throw DimensionError("checkpoint: tensor " + t.name + " has " +
                           std::to_string(t.values.size()) + " values for shape " +
                           shape_to_string(t.shape));
    }
    const std::uint64_t nbytes = t.values.size() * dtype_size(t.dtype);
    index.push_back({{"name", t.name},
                     {"shape", t.shape},
                     {"dtype", dtype_name(t.dtype)},
                     {"offset", offset},
                     {"nbytes", nbytes},
                     {"trainable", t.trainable}});
    offset += nbytes;
  }
  const json header = {{"config", to_json(ckpt.config)}, {"meta", ckpt.meta}, {"tensors", index}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  out.push_back(kCheckpointVersion);
  append_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& t : ckpt.tensors) {
    for (double v : t.values) {
      if (t.dtype == DType::f32) {
        append_le<float>(out, static_cast<float>(v));
      } else {
        append_le<double>(out, v);
      }
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(source + ": not a checkpoint (bad magic)");
  }
  if (bytes[4] != kCheckpointVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(bytes[4]));
  }
  if (bytes.size() < 13) throw CorruptionError(source + ": truncated header length");
  const std::uint64_t header_len = read_le<std::uint64_t>(bytes.data() + 5);
  if (header_len > bytes.size() - 13) throw CorruptionError(source + ": truncated header");
  const std::size_t data_begin = 13 + header_len;
  const std::span<const std::uint8_t> data = bytes.subspan(data_begin);

  Checkpoint ckpt;
  try {
    const json header = json::parse(bytes.begin() + 13, bytes.begin() + data_begin);
    ckpt.config = model_config_from_json(header.at("config"));
    ckpt.meta = header.value("meta", json::object());
    for (const json& e : header.at("tensors")) {
      StoredTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      const std::string dt = e.at("dtype").get<std::string>();
      if (dt == "f32") {
        t.dtype = DType::f32;
      } else if (dt == "f64") {
        t.dtype = DType::f64;
      } else {
        throw FormatError(source + ": tensor " + t.name + " has unknown dtype " + dt);
      }
      t.trainable = e.value("trainable", true);
      const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
      const std::uint64_t nbytes = e.at("nbytes").get<std::uint64_t>();
      const std::size_t count = shape_size(t.shape);
      if (nbytes != count * dtype_size(t.dtype)) {
        throw CorruptionError(source + ": tensor " + t.name + " declares " +
                              std::to_string(nbytes) + " bytes for shape " +
                              shape_to_string(t.shape));
      }
      if (offset > data.size() || nbytes > data.size() - offset) {
        throw CorruptionError(source + ": tensor " + t.name + " runs past the end of the file");
      }
      t.values.resize(count);
      const std::uint8_t* p = data.data() + offset;
      for (std::size_t i = 0; i < count; ++i) {
        t.values[i] = t.dtype == DType::f32 ? static_cast<double>(read_le<float>(p + 4 * i))
                                            : read_le<double>(p + 8 * i);
      }
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw CorruptionError(source + ": unreadable header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(source + ": " + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

template <typename T>
Checkpoint capture_model(const SpanModel<T>& model) {
  constexpr DType dt = sizeof(T) == 4 ? DType::f32 : DType::f64;
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const Parameter<T>* p : model.parameters()) {
    ckpt.tensors.push_back({p->name, p->value.shape(), dt,
                            std::vector<double>(p->value.data(), p->value.data() + p->value.size()),
                            p->trainable});
  }
  if (const auto* conv = model.conv()) {
    json init = json::array();
    for (std::size_t i = 0; i < conv->branches().size(); ++i) {
      const auto& st = conv->branches()[i].stats;
      const Shape shape{st.running_mean.size()};
      ckpt.tensors.push_back({bn_name(i, "running_mean"), shape, dt,
                              {st.running_mean.begin(), st.running_mean.end()}, false});
      ckpt.tensors.push_back({bn_name(i, "running_var"), shape, dt,
                              {st.running_var.begin(), st.running_var.end()}, false});
      init.push_back(st.initialized);
    }
    ckpt.meta["batch_norm_initialized"] = init;
  }
  return ckpt;
}

namespace {

template <typename T>
void copy_values(const StoredTensor& s, const Shape& expected, T* dst, const std::string& name) {
  if (s.shape != expected) {
    throw FormatError("checkpoint tensor " + name + " has shape " + shape_to_string(s.shape) +
                      ", model expects " + shape_to_string(expected));
  }
  for (std::size_t i = 0; i < s.values.size(); ++i) dst[i] = static_cast<T>(s.values[i]);
}

const StoredTensor& require(const Checkpoint& ckpt, const std::string& name) {
  const StoredTensor* t = ckpt.find(name);
  if (!t) throw FormatError("checkpoint lacks tensor " + name);
  return *t;
}

}  // namespace

template <typename T>
void restore_model(SpanModel<T>& model, const Checkpoint& ckpt) {
  if (!(ckpt.config == model.config())) {
    throw FormatError("checkpoint config " + to_json(ckpt.config).dump() +
                      " does not match model config " + to_json(model.config()).dump());
  }
  for (Parameter<T>* p : model.parameters()) {
    const StoredTensor& s = require(ckpt, p->name);
    copy_values(s, p->value.shape(), p->value.data(), p->name);
    p->trainable = s.trainable;
    p->zero_grad();
  }
  if (auto* conv = model.conv()) {
    const json init = ckpt.meta.value("batch_norm_initialized", json::array());
    for (std::size_t i = 0; i < conv->branches().size(); ++i) {
      auto& st = conv->branches()[i].stats;
      const Shape shape{st.running_mean.size()};
      copy_values(require(ckpt, bn_name(i, "running_mean")), shape, st.running_mean.data(),
                  bn_name(i, "running_mean"));
      copy_values(require(ckpt, bn_name(i, "running_var")), shape, st.running_var.data(),
                  bn_name(i, "running_var"));
      st.initialized = i < init.size() ? init[i].get<bool>() : true;
    }
  }
}

template <typename T>
SpanModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  SpanModel<T> model(ckpt.config, 0);
  restore_model(model, ckpt);
  return model;
}

Checkpoint slice_teacher_layers(const Checkpoint& teacher, std::size_t student_layers) {
  if (student_layers == 0) throw SlicingError("student needs at least one encoder layer");
  const std::size_t have = teacher.config.encoder_layers;
  if (have < 2 * student_layers - 1) {
    throw SlicingError("teacher has " + std::to_string(have) + " encoder layers; a " +
                       std::to_string(student_layers) + "-layer student needs " +
                       std::to_string(2 * student_layers - 1));
  }
  Checkpoint student;
  student.config = teacher.config;
  student.config.encoder_layers = student_layers;
  student.meta = teacher.meta;
  student.meta.erase("optimizer_step");
  student.meta["sliced_from_layers"] = have;

  const std::string enc = "encoder.";
  for (const auto& t : teacher.tensors) {
    if (t.name.rfind("optimizer.", 0) == 0) continue;
    if (t.name.rfind(enc, 0) != 0) {
      student.tensors.push_back(t);
      continue;
    }
    const std::size_t dot = t.name.find('.', enc.size());
    if (dot == std::string::npos) throw FormatError("malformed encoder tensor name " + t.name);
    const std::size_t layer = std::stoul(t.name.substr(enc.size(), dot - enc.size()));
    // 0-based teacher layer 2(i-1) is 1-based layer 2i-1.
    if (layer % 2 != 0 || layer / 2 >= student_layers) continue;
    StoredTensor copy = t;
    copy.name = enc + std::to_string(layer / 2) + t.name.substr(dot);
    student.tensors.push_back(std::move(copy));
  }
  return student;
}

template Checkpoint capture_model(const SpanModel<float>&);
template Checkpoint capture_model(const SpanModel<double>&);
template void restore_model(SpanModel<float>&, const Checkpoint&);
template void restore_model(SpanModel<double>&, const Checkpoint&);
template SpanModel<float> model_from_checkpoint(const Checkpoint&);
template SpanModel<double> model_from_checkpoint(const Checkpoint&);

}  // namespace distill_span
