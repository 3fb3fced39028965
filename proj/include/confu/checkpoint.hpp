#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "confu/error.hpp"
#include "confu/param_store.hpp"

namespace confu {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

// Chunked little-endian container:
//   8-byte magic | u32 version | records
// record: u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 payload
// Metadata (training step, config echo) rides along as scalar tensors under
// the reserved "meta." prefix.
constexpr char kCheckpointMagic[9] = "CONFUCP1";
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::map<std::string, TensorF64> tensors;
  std::map<std::string, double> meta;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 8);
  detail::write_pod<std::uint32_t>(out, ckpt.version);

  auto write_record = [&](const std::string& name, const TensorF64& t) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  };
  for (const auto& [name, value] : ckpt.meta) write_record("meta." + name, TensorF64({1}, {value}));
  for (const auto& [name, t] : ckpt.tensors) write_record(name, t);
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("checkpoint: bad magic in " + path);
  Checkpoint ckpt;
  ckpt.version = detail::read_pod<std::uint32_t>(in);
  if (ckpt.version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version");
  while (true) {
    std::uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (in.eof()) break;
    if (!in) throw FormatError("checkpoint: truncated record header");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t rank = detail::read_pod<std::uint32_t>(in);
    std::vector<std::size_t> shape;
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      auto d = detail::read_pod<std::uint64_t>(in);
      shape.push_back(static_cast<std::size_t>(d));
      numel *= static_cast<std::size_t>(d);
    }
    std::vector<double> data(numel);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) throw FormatError("checkpoint: truncated payload for " + name);
    if (name.rfind("meta.", 0) == 0 && numel == 1)
      ckpt.meta[name.substr(5)] = data[0];
    else
      ckpt.tensors[name] = TensorF64(std::move(shape), std::move(data));
  }
  return ckpt;
}

// ---- ParamStore bridging ----------------------------------------------------

inline Checkpoint checkpoint_from_store(const ParamStore& store,
                                        std::map<std::string, double> meta = {}) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  for (const auto& [name, group] : store) ckpt.tensors[name] = group.tensor;
  return ckpt;
}

// Loads tensors into a store, adding groups as needed. Trainability is the
// caller's business (stages freeze/unfreeze by prefix).
inline void load_into_store(const Checkpoint& ckpt, ParamStore& store) {
  for (const auto& [name, t] : ckpt.tensors) {
    if (store.has(name))
      store.tensor(name) = t;
    else
      store.add(name, t);
  }
}

}  // namespace confu
