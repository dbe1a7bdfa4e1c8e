#pragma once

#include <cstring>
#include <fstream>

#include "mdnet/config.hpp"
#include "mdnet/params.hpp"

namespace mdnet {

// Checkpoint archive: a flat container of named tensors plus a JSON manifest
// recording the config preset and format version.
//
//   magic "MDNTCKPT" | u32 version | u64 manifest_len | manifest (JSON, UTF-8)
//   u64 tensor_count | entries...
//   entry: u32 name_len | name | u8 dtype (0 = float64) | u8 kind
//          | u32 ndim | i64 dims[] | u64 byte_len | raw little-endian data
//   kind: 0 = parameter, 1 = buffer, 2 = extra (optimizer/loop state)
//
// Values are written in host byte order; the format is little-endian and the
// loader rejects archives written on big-endian hosts via the magic check.

struct ImportError : std::runtime_error {
  explicit ImportError(const std::string& m) : std::runtime_error(m) {}
};

struct Checkpoint {
  json manifest;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  std::map<std::string, Tensor> extra;
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'M', 'D', 'N', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("corrupt checkpoint archive: truncated while reading " + what);
  return v;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Tensor& t, uint8_t kind) {
  put<uint32_t>(os, uint32_t(name.size()));
  os.write(name.data(), std::streamsize(name.size()));
  put<uint8_t>(os, 0);  // float64
  put<uint8_t>(os, kind);
  put<uint32_t>(os, uint32_t(t.shape().size()));
  for (int64_t d : t.shape()) put<int64_t>(os, d);
  const uint64_t bytes = uint64_t(t.numel()) * sizeof(real);
  put<uint64_t>(os, bytes);
  os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(bytes));
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const json& manifest,
                            const std::map<std::string, Tensor>& extra = {}) {
  using namespace ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  put<uint32_t>(os, kVersion);
  const std::string mtxt = manifest.dump();
  put<uint64_t>(os, mtxt.size());
  os.write(mtxt.data(), std::streamsize(mtxt.size()));
  put<uint64_t>(os, store.params.size() + store.buffers.size() + extra.size());
  for (const auto& [name, t] : store.params) put_tensor(os, name, t, 0);
  for (const auto& [name, t] : store.buffers) put_tensor(os, name, t, 1);
  for (const auto& [name, t] : extra) put_tensor(os, name, t, 2);
  if (!os) throw IoError("write failure on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not a checkpoint archive (bad magic): " + path);
  const uint32_t version = get<uint32_t>(is, "version");
  if (version != kVersion)
    throw IoError("checkpoint format version " + std::to_string(version) +
                  " not supported (expected " + std::to_string(kVersion) + "): " + path);
  const uint64_t mlen = get<uint64_t>(is, "manifest length");
  std::string mtxt(mlen, '\0');
  is.read(mtxt.data(), std::streamsize(mlen));
  if (!is) throw IoError("corrupt checkpoint archive: truncated manifest in " + path);
  Checkpoint ck;
  try {
    ck.manifest = json::parse(mtxt);
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + path + ": " + e.what());
  }
  const uint64_t count = get<uint64_t>(is, "tensor count");
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t nlen = get<uint32_t>(is, "name length");
    std::string name(nlen, '\0');
    is.read(name.data(), std::streamsize(nlen));
    if (!is) throw IoError("corrupt checkpoint archive: truncated name in " + path);
    const uint8_t dtype = get<uint8_t>(is, "dtype");
    if (dtype != 0) throw IoError("unsupported dtype tag " + std::to_string(dtype) + " in " + path);
    const uint8_t kind = get<uint8_t>(is, "kind");
    const uint32_t ndim = get<uint32_t>(is, "rank");
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = get<int64_t>(is, "dim");
    const uint64_t bytes = get<uint64_t>(is, "byte length");
    if (bytes != uint64_t(numel(shape)) * sizeof(real))
      throw IoError("corrupt checkpoint archive: size mismatch for tensor " + name);
    std::vector<real> data(bytes / sizeof(real));
    is.read(reinterpret_cast<char*>(data.data()), std::streamsize(bytes));
    if (!is) throw IoError("corrupt checkpoint archive: truncated tensor " + name + " in " + path);
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    if (kind == 0)
      ck.params.emplace(name, std::move(t));
    else if (kind == 1)
      ck.buffers.emplace(name, std::move(t));
    else
      ck.extra.emplace(name, std::move(t));
  }
  return ck;
}

// Loads archive tensors into an existing (architecture-shaped) store. Every
// name must match and every shape must agree; offending tensors are listed.
inline void import_weights(ParamStore& store, const Checkpoint& ck) {
  std::vector<std::string> missing, extra_names, mismatched;
  for (const auto& [name, t] : store.params) {
    auto it = ck.params.find(name);
    if (it == ck.params.end())
      missing.push_back(name);
    else if (it->second.shape() != t.shape())
      mismatched.push_back(name + " (archive " + shape_str(it->second.shape()) + ", model " +
                           shape_str(t.shape()) + ")");
  }
  for (const auto& [name, t] : ck.params)
    if (!store.params.count(name)) extra_names.push_back(name);
  if (!missing.empty() || !extra_names.empty() || !mismatched.empty()) {
    std::string msg = "weight import failed:";
    auto join = [&msg](const char* label, const std::vector<std::string>& v) {
      if (v.empty()) return;
      msg += std::string(" ") + label + ":";
      for (const auto& n : v) msg += " " + n;
      msg += ";";
    };
    join("missing", missing);
    join("unexpected", extra_names);
    join("shape mismatch", mismatched);
    throw ImportError(msg);
  }
  for (auto& [name, t] : store.params) t.vec() = ck.params.at(name).vec();
  for (auto& [name, t] : store.buffers) {
    auto it = ck.buffers.find(name);
    if (it != ck.buffers.end() && it->second.shape() == t.shape()) t.vec() = it->second.vec();
  }
}

}  // namespace mdnet
