// SPDX-License-Identifier: Apache-2.0
#include "cllm4rec/checkpoint.hpp"

#include <cstring>
#include <map>

#include "cllm4rec/binary_io.hpp"
#include "cllm4rec/errors.hpp"

namespace cllm4rec {

namespace {

enum DType : std::uint8_t { kF32 = 0, kF64 = 1, kBytes = 2, kU64 = 3 };

struct Record {
  std::vector<std::uint64_t> dims;
  DType dtype = kF32;
  std::vector<double> numbers;  // f32/f64 payload widened
  std::string bytes;
  std::uint64_t u64 = 0;
};

void put_header(ByteWriter& w, const std::string& name, std::span<const std::size_t> dims, DType dtype) {
  if (name.size() > 0xFFFF) throw ValidationError("checkpoint record name too long");
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name);
  w.put(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) w.put(static_cast<std::uint64_t>(d));
  w.put(static_cast<std::uint8_t>(dtype));
}

template <typename T>
void put_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    put_header(w, name, t.shape(), kF32);
    for (float v : t.values()) w.put_f32(v);
  } else {
    put_header(w, name, t.shape(), kF64);
    for (double v : t.values()) w.put_f64(v);
  }
}

void put_text(ByteWriter& w, const std::string& name, const std::string& text) {
  const std::size_t dims[] = {text.size()};
  put_header(w, name, dims, kBytes);
  w.put_bytes(text);
}

std::map<std::string, Record> parse(const std::filesystem::path& path) {
  ByteReader r = ByteReader::open(path);
  const std::string magic = r.remaining() >= 8 ? r.get_bytes(8) : std::string();
  if (magic != std::string(kCheckpointMagic, 8)) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  std::map<std::string, Record> out;
  while (!r.at_end()) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name = r.get_bytes(name_len);
    Record rec;
    const auto rank = r.get<std::uint8_t>();
    std::uint64_t count = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      rec.dims.push_back(r.get<std::uint64_t>());
      count *= rec.dims.back();
    }
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > kU64) throw FormatError(path.string() + ": record '" + name + "' has unknown dtype");
    rec.dtype = static_cast<DType>(dtype);
    switch (rec.dtype) {
      case kF32:
        r.need(count * 4);
        rec.numbers.resize(count);
        for (auto& v : rec.numbers) v = r.get_f32();
        break;
      case kF64:
        r.need(count * 8);
        rec.numbers.resize(count);
        for (auto& v : rec.numbers) v = r.get_f64();
        break;
      case kBytes:
        rec.bytes = r.get_bytes(count);
        break;
      case kU64:
        if (count != 1) throw FormatError(path.string() + ": record '" + name + "' must be a scalar");
        rec.u64 = r.get<std::uint64_t>();
        break;
    }
    if (!out.emplace(std::move(name), std::move(rec)).second) {
      throw FormatError(path.string() + ": duplicate record");
    }
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const Record& rec, const std::string& name, const Shape& expected) {
  Shape shape(rec.dims.begin(), rec.dims.end());
  if (shape != expected) {
    throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                      shape_str(expected));
  }
  if (rec.dtype != kF32 && rec.dtype != kF64) throw FormatError("checkpoint record '" + name + "' is not numeric");
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rec.numbers[i]);
  return t;
}

CheckpointMeta meta_of(const std::map<std::string, Record>& recs, const std::filesystem::path& path) {
  CheckpointMeta meta;
  auto text = [&](const char* key) -> const std::string* {
    auto it = recs.find(key);
    if (it == recs.end()) return nullptr;
    if (it->second.dtype != kBytes) throw FormatError(path.string() + ": record '" + key + "' is not text");
    return &it->second.bytes;
  };
  try {
    const std::string* cfg = text("__config__");
    if (!cfg) throw FormatError(path.string() + ": missing __config__ record");
    meta.config = nlohmann::json::parse(*cfg);
    if (const std::string* st = text("__train_state__")) meta.train_state = nlohmann::json::parse(*st);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": invalid metadata JSON (" + e.what() + ")");
  }
  if (!meta.config.contains("model")) throw FormatError(path.string() + ": __config__ lacks a model section");
  return meta;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const CheckpointMeta& meta) {
  ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 8));
  w.put(kCheckpointVersion);
  for (const auto* p : model.parameters()) {
    put_tensor(w, p->name, p->value);
    if (!p->state.first_moment.empty()) put_tensor(w, p->name + "#m", p->state.first_moment);
    if (!p->state.second_moment.empty()) put_tensor(w, p->name + "#v", p->state.second_moment);
    put_header(w, p->name + "#steps", {}, kU64);
    w.put(p->state.steps);
  }
  nlohmann::json config = meta.config.is_object() ? meta.config : nlohmann::json::object();
  config["model"] = model.config().to_json();
  put_text(w, "__config__", config.dump());
  put_text(w, "__train_state__", meta.train_state.dump());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  w.save(path);
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta_out) {
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  const auto recs = parse(path);
  CheckpointMeta meta = meta_of(recs, path);
  ModelConfig cfg = ModelConfig::from_json(meta.config["model"]);
  try {
    cfg.validate();
  } catch (const ValidationError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  Model<T> model(cfg, 0);
  for (auto* p : model.parameters()) {
    auto it = recs.find(p->name);
    if (it == recs.end()) throw FormatError(path.string() + ": missing tensor '" + p->name + "'");
    p->value = to_tensor<T>(it->second, p->name, p->value.shape());
    p->state.reset();
    if (auto m = recs.find(p->name + "#m"); m != recs.end())
      p->state.first_moment = to_tensor<T>(m->second, m->first, p->value.shape());
    if (auto v = recs.find(p->name + "#v"); v != recs.end())
      p->state.second_moment = to_tensor<T>(v->second, v->first, p->value.shape());
    if (auto s = recs.find(p->name + "#steps"); s != recs.end()) {
      if (s->second.dtype != kU64) throw FormatError(path.string() + ": '" + s->first + "' is not u64");
      p->state.steps = s->second.u64;
    }
  }
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("checkpoint not found: " + path.string());
  return meta_of(parse(path), path);
}

template void save_checkpoint<float>(const std::filesystem::path&, const Model<float>&, const CheckpointMeta&);
template void save_checkpoint<double>(const std::filesystem::path&, const Model<double>&, const CheckpointMeta&);
template Model<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointMeta*);
template Model<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointMeta*);

}  // namespace cllm4rec
