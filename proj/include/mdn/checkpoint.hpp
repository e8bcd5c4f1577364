#pragma once

// Binary checkpoint container.
//
// Layout (all integers little-endian):
//   "MDN1"
//   u64 step
//   u32 metadata length, UTF-8 JSON metadata (model config etc.)
//   u32 tensor count
//   per tensor: u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//               u8 rank, u64 dims[rank], raw row-major data

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdn/config.hpp"
#include "mdn/error.hpp"
#include "mdn/model.hpp"

namespace mdn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

// Values are held as double; an f32 tensor round-trips through double exactly.
struct TensorRecord {
  std::string name;
  Shape dims;
  DType dtype = DType::F32;
  std::vector<double> values;

  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  std::uint64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord& find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw DataError("checkpoint has no tensor " + name);
  }
};

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'N', '1'};

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  explicit Reader(std::string_view s) : s_(s) {}
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, s_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }
  std::string_view s_;
  std::size_t pos_ = 0;
};

inline void check_unique(const Checkpoint& c) {
  std::set<std::string> names;
  for (const auto& t : c.tensors) {
    if (!names.insert(t.name).second) throw DataError("duplicate tensor name " + t.name);
  }
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  detail::check_unique(c);
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint64_t>(out, c.step);
  const std::string meta = c.meta.dump();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (shape_numel(t.dims) != t.values.size()) throw ShapeError("checkpoint tensor " + t.name + " size mismatch");
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint64_t>(out, d);
    for (double v : t.values) {
      if (t.dtype == DType::F32) detail::put<float>(out, static_cast<float>(v));
      else detail::put<double>(out, v);
    }
  }
  return out;
}

inline Checkpoint deserialize(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw DataError("not a checkpoint (bad magic)");
  Checkpoint c;
  c.step = r.get<std::uint64_t>();
  const auto meta_len = r.get<std::uint32_t>();
  try {
    c.meta = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = std::string(r.bytes(r.get<std::uint32_t>()));
    const auto code = r.get<std::uint8_t>();
    if (code > 1) throw DataError("checkpoint tensor " + t.name + ": unknown dtype");
    t.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(t.dims);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      t.values[k] = t.dtype == DType::F32 ? static_cast<double>(r.get<float>()) : r.get<double>();
    }
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint");
  detail::check_unique(c);
  return c;
}

// Written to a sibling temp file first, then renamed over `path`.
inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string bytes = serialize(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

// Elementwise mean (accumulated in double) over checkpoints with identical
// tensor names, order and shapes. Step and metadata come from the last one.
inline Checkpoint checkpoint_average(const std::vector<Checkpoint>& cks) {
  if (cks.empty()) throw DataError("checkpoint_average: no checkpoints");
  Checkpoint out = cks.back();
  for (const auto& c : cks) {
    if (c.tensors.size() != out.tensors.size()) throw DataError("checkpoint_average: tensor counts differ");
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      if (c.tensors[i].name != out.tensors[i].name || c.tensors[i].dims != out.tensors[i].dims) {
        throw DataError("checkpoint_average: tensor " + c.tensors[i].name + " does not match " +
                        out.tensors[i].name + " " + shape_str(out.tensors[i].dims));
      }
    }
  }
  for (std::size_t i = 0; i < out.tensors.size(); ++i) {
    auto& vals = out.tensors[i].values;
    for (std::size_t k = 0; k < vals.size(); ++k) {
      double s = 0;
      for (const auto& c : cks) s += c.tensors[i].values[k];
      double mean = s / static_cast<double>(cks.size());
      if (out.tensors[i].dtype == DType::F32) mean = static_cast<double>(static_cast<float>(mean));
      vals[k] = mean;
    }
  }
  return out;
}

inline Checkpoint checkpoint_average(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> cks;
  for (const auto& p : paths) cks.push_back(load_checkpoint(p));
  return checkpoint_average(cks);
}

// ---- model <-> checkpoint --------------------------------------------------------

template <typename T>
Checkpoint to_checkpoint(const Transformer<T>& model, std::uint64_t step, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.step = step;
  c.meta = std::move(meta);
  c.meta["model"] = model.config();
  for (const auto& [name, t] : model.named_parameters()) {
    TensorRecord r;
    r.name = name;
    r.dims = t.dims();
    r.dtype = std::is_same_v<T, double> ? DType::F64 : DType::F32;
    r.values.assign(t.data().begin(), t.data().end());
    c.tensors.push_back(std::move(r));
  }
  return c;
}

inline ModelConfig checkpoint_model_config(const Checkpoint& c) {
  if (!c.meta.contains("model")) throw DataError("checkpoint has no model config");
  return c.meta.at("model").get<ModelConfig>();
}

// Copies checkpoint values into an existing model; names and shapes must match exactly.
template <typename T>
void load_into(Transformer<T>& model, const Checkpoint& c) {
  const auto params = model.named_parameters();
  if (params.size() != c.tensors.size()) {
    throw DataError("checkpoint has " + std::to_string(c.tensors.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (auto [name, t] : params) {
    const auto& r = c.find(name);
    if (r.dims != t.dims()) throw DataError("checkpoint tensor " + name + " has shape " + shape_str(r.dims));
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
  }
}

template <typename T>
Transformer<T> model_from_checkpoint(const Checkpoint& c) {
  Transformer<T> m(checkpoint_model_config(c), 0);
  load_into(m, c);
  return m;
}

}  // namespace mdn
