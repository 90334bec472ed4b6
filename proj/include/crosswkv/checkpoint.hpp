#pragma once

// Binary checkpoint I/O. A checkpoint is a fixed little-endian header followed
// by named tensor records; the record stream is generic and reused by other
// model files. A JSON sidecar mirrors the header for humans and scripts.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crosswkv/layer.hpp"
#include "crosswkv/tensor.hpp"
#include "json.hpp"

namespace cwkv {

inline constexpr char kCheckpointMagic[5] = {'C', 'W', 'K', 'V', '1'};

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw io_error("checkpoint: write failed");
}

inline void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, b, 4);
}

inline void write_i32le(std::ostream& os, std::int32_t v) {
  write_u32le(os, static_cast<std::uint32_t>(v));
}

inline void write_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  write_bytes(os, b, 8);
}

// Reads return false on clean EOF at a record boundary; inside a record any
// short read is a truncation error naming `what`.
inline bool read_bytes(std::istream& is, void* p, std::size_t n, const std::string& what,
                       bool eof_ok = false) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() == static_cast<std::streamsize>(n)) return true;
  if (eof_ok && is.gcount() == 0 && is.eof()) return false;
  throw io_error("checkpoint: truncated while reading " + what);
}

inline std::uint32_t read_u32le(std::istream& is, const std::string& what) {
  unsigned char b[4];
  read_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::int32_t read_i32le(std::istream& is, const std::string& what) {
  return static_cast<std::int32_t>(read_u32le(is, what));
}

inline std::uint64_t read_u64le(std::istream& is, const std::string& what) {
  unsigned char b[8];
  read_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <class T>
void write_scalars_le(std::ostream& os, const T* p, i64 n) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  for (i64 i = 0; i < n; ++i) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits;
      std::memcpy(&bits, p + i, 4);
      write_u32le(os, bits);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, p + i, 8);
      write_u64le(os, bits);
    }
  }
}

template <class T>
void read_scalars_le(std::istream& is, T* p, i64 n, const std::string& what) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  for (i64 i = 0; i < n; ++i) {
    if constexpr (sizeof(T) == 4) {
      std::uint32_t bits = read_u32le(is, what);
      std::memcpy(p + i, &bits, 4);
    } else {
      std::uint64_t bits = read_u64le(is, what);
      std::memcpy(p + i, &bits, 8);
    }
  }
}

}  // namespace detail

// Record layout: u32 name length, name bytes, u32 rank, u64 dims, raw scalars.
template <class T>
void write_tensor_record(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  detail::write_u32le(os, static_cast<std::uint32_t>(name.size()));
  detail::write_bytes(os, name.data(), name.size());
  detail::write_u32le(os, static_cast<std::uint32_t>(t.rank()));
  for (i64 i = 0; i < t.rank(); ++i)
    detail::write_u64le(os, static_cast<std::uint64_t>(t.dim(i)));
  detail::write_scalars_le(os, t.data(), t.numel());
}

// False on clean EOF at a record boundary.
template <class T>
bool read_tensor_record(std::istream& is, std::string& name, Tensor<T>& out) {
  unsigned char lenb[4];
  if (!detail::read_bytes(is, lenb, 4, "record header", /*eof_ok=*/true)) return false;
  std::uint32_t name_len = 0;
  for (int i = 0; i < 4; ++i) name_len |= static_cast<std::uint32_t>(lenb[i]) << (8 * i);
  if (name_len > 4096) throw io_error("checkpoint: implausible record name length");
  name.resize(name_len);
  detail::read_bytes(is, name.data(), name_len, "record name");
  std::uint32_t rank = detail::read_u32le(is, "record '" + name + "' rank");
  if (rank > 8) throw io_error("checkpoint: implausible rank in record '" + name + "'");
  Shape shape(rank);
  i64 numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<i64>(detail::read_u64le(is, "record '" + name + "' dims"));
    numel *= shape[i];
  }
  if (numel < 0 || numel > (i64(1) << 33))
    throw io_error("checkpoint: implausible size in record '" + name + "'");
  out = Tensor<T>(shape);
  detail::read_scalars_le(is, out.data(), out.numel(), "record '" + name + "' data");
  return true;
}

template <class T>
void save_checkpoint(const std::string& path, const LayerConfig& cfg,
                     const CrossWKVParams<T>& params) {
  validate_params(cfg, params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("checkpoint: cannot open '" + path + "' for writing");
  detail::write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
  unsigned char dtype = static_cast<unsigned char>(dtype_of<T>());
  detail::write_bytes(os, &dtype, 1);
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.d));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.d_q));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.d_v));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.h));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.n()));
  detail::write_i32le(os, static_cast<std::int32_t>(cfg.chunk));
  unsigned char mode = static_cast<unsigned char>(cfg.mode);
  detail::write_bytes(os, &mode, 1);
  unsigned char first = cfg.is_first_layer ? 1 : 0;
  detail::write_bytes(os, &first, 1);
  for_each_param(params, [&](const char* name, const Tensor<T>& t) {
    write_tensor_record(os, name, t);
  });
  os.flush();
  if (!os) throw io_error("checkpoint: write failed for '" + path + "'");

  nlohmann::json j;
  j["D"] = cfg.d;
  j["D_q"] = cfg.d_q;
  j["D_v"] = cfg.d_v;
  j["H"] = cfg.h;
  j["N"] = cfg.n();
  j["chunk"] = cfg.chunk;
  j["mode"] = mode_name(cfg.mode);
  j["is_first_layer"] = cfg.is_first_layer;
  j["dtype"] = dtype_of<T>() == Dtype::f64 ? "f64" : "f32";
  std::ofstream js(path + ".json", std::ios::trunc);
  if (!js) throw io_error("checkpoint: cannot open '" + path + ".json' for writing");
  js << j.dump(2) << "\n";
}

template <class T>
std::pair<LayerConfig, CrossWKVParams<T>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("checkpoint: cannot open '" + path + "'");
  char magic[sizeof(kCheckpointMagic)];
  detail::read_bytes(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw io_error("checkpoint: bad magic in '" + path + "'");
  unsigned char dtype = 0;
  detail::read_bytes(is, &dtype, 1, "dtype");
  if (dtype != static_cast<unsigned char>(dtype_of<T>()))
    throw io_error("checkpoint: dtype mismatch in '" + path + "' (file has " +
                   (dtype == 1 ? std::string("f64") : std::string("f32")) + ")");
  LayerConfig cfg;
  cfg.d = detail::read_i32le(is, "header D");
  cfg.d_q = detail::read_i32le(is, "header D_q");
  cfg.d_v = detail::read_i32le(is, "header D_v");
  cfg.h = detail::read_i32le(is, "header H");
  std::int32_t n = detail::read_i32le(is, "header N");
  cfg.chunk = detail::read_i32le(is, "header chunk");
  unsigned char mode = 0, first = 0;
  detail::read_bytes(is, &mode, 1, "header mode");
  detail::read_bytes(is, &first, 1, "header flags");
  if (mode > 2) throw io_error("checkpoint: invalid mode byte in '" + path + "'");
  cfg.mode = static_cast<Mode>(mode);
  cfg.is_first_layer = first != 0;
  if (cfg.h <= 0 || cfg.d <= 0 || n != cfg.d / cfg.h)
    throw io_error("checkpoint: inconsistent header dims in '" + path + "'");

  std::map<std::string, Tensor<T>> records;
  std::string name;
  Tensor<T> t;
  while (read_tensor_record(is, name, t)) {
    if (!records.emplace(name, std::move(t)).second)
      throw io_error("checkpoint: duplicate record '" + name + "'");
  }

  // Low-rank sizes live only in the record shapes.
  auto rank_of = [&](const std::string& rec) -> i64 {
    auto it = records.find(rec);
    if (it == records.end()) throw io_error("checkpoint: missing record '" + rec + "'");
    if (it->second.rank() != 2)
      throw shape_error("checkpoint: record '" + rec + "' has shape " +
                        shape_str(it->second.shape()) + ", expected a matrix");
    return it->second.dim(1);
  };
  cfg.rank_w = rank_of("lora_w.down");
  cfg.rank_a = rank_of("lora_a.down");
  cfg.rank_v = rank_of("lora_v.down");
  cfg.rank_g = rank_of("lora_g.down");
  cfg.validate();

  CrossWKVParams<T> params;
  for_each_param(params, [&](const char* pname, Tensor<T>& dst) {
    auto it = records.find(pname);
    if (it == records.end())
      throw io_error("checkpoint: missing record '" + std::string(pname) + "'");
    Shape want = param_shape(cfg, pname);
    if (it->second.shape() != want)
      throw shape_error("checkpoint: record '" + std::string(pname) + "' has shape " +
                        shape_str(it->second.shape()) + ", expected " + shape_str(want));
    dst = std::move(it->second);
    records.erase(it);
  });
  if (!records.empty())
    throw io_error("checkpoint: unexpected record '" + records.begin()->first + "'");
  return {cfg, std::move(params)};
}

}  // namespace cwkv
