#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainpred/nets.hpp"
#include "chainpred/tensor.hpp"

namespace chainpred {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Serialized tensor values are float32; training stays float64.
struct StoredTensor {
  std::vector<int> dims;
  std::vector<double> values;  // already re-widened from float32
};

inline void ck_write(std::ofstream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p),
            static_cast<std::streamsize>(n));
}

template <typename T>
inline void ck_put(std::ofstream& out, T v) {
  ck_write(out, &v, sizeof v);
}

template <typename T>
inline T ck_get(std::ifstream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in)
    throw CheckpointError(std::string("checkpoint truncated reading ") + what);
  return v;
}

inline void write_stored(std::ofstream& out, const std::string& name,
                         const std::vector<int>& dims,
                         const std::vector<double>& values) {
  if (name.size() > 0xffff)
    throw CheckpointError("tensor name too long: " + name);
  ck_put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  ck_write(out, name.data(), name.size());
  ck_put<std::uint8_t>(out, static_cast<std::uint8_t>(dims.size()));
  for (int d : dims) ck_put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : values) ck_put<float>(out, static_cast<float>(v));
}

// All tensors a model run persists: trainable parameters, running stats,
// and (optionally) optimizer velocities keyed off the parameter names.
inline std::vector<std::pair<std::string, TensorPtr>> persisted_tensors(
    const ParamRegistry& reg) {
  std::vector<std::pair<std::string, TensorPtr>> out = reg.trainable;
  out.insert(out.end(), reg.state.begin(), reg.state.end());
  return out;
}

}  // namespace detail

// Binary checkpoint: magic "CHNP", u32 version, u64 step_count, u32 config
// hash, u32 tensor count; per tensor u16 name length + name, u8 rank,
// u32 dims, float32 little-endian row-major values.
inline void save_checkpoint(const ParamRegistry& reg,
                            const OptimizerState* opt,
                            std::uint64_t step_count,
                            std::uint32_t config_hash,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for write: " + path);
  auto tensors = detail::persisted_tensors(reg);
  std::uint32_t count = static_cast<std::uint32_t>(tensors.size());
  bool with_velocity =
      opt && opt->velocity.size() == reg.trainable.size() &&
      !opt->velocity.empty();
  if (with_velocity) count += static_cast<std::uint32_t>(reg.trainable.size());

  detail::ck_write(out, "CHNP", 4);
  detail::ck_put<std::uint32_t>(out, 1u);
  detail::ck_put<std::uint64_t>(out, step_count);
  detail::ck_put<std::uint32_t>(out, config_hash);
  detail::ck_put<std::uint32_t>(out, count);

  for (auto& [name, t] : tensors)
    detail::write_stored(out, name, t->dims, t->data);
  if (with_velocity)
    for (std::size_t i = 0; i < reg.trainable.size(); ++i)
      detail::write_stored(out, "opt.velocity/" + reg.trainable[i].first,
                           {static_cast<int>(opt->velocity[i].size())},
                           opt->velocity[i]);
  if (!out) throw CheckpointError("checkpoint write failed: " + path);
}

struct CheckpointFile {
  std::uint64_t step_count = 0;
  std::uint32_t config_hash = 0;
  std::map<std::string, detail::StoredTensor> tensors;
};

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CHNP", 4) != 0)
    throw CheckpointError("bad checkpoint magic in " + path);
  auto version = detail::ck_get<std::uint32_t>(in, "version");
  if (version != 1)
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  CheckpointFile file;
  file.step_count = detail::ck_get<std::uint64_t>(in, "step count");
  file.config_hash = detail::ck_get<std::uint32_t>(in, "config hash");
  auto count = detail::ck_get<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = detail::ck_get<std::uint16_t>(in, "name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw CheckpointError("checkpoint truncated reading a name");
    auto rank = detail::ck_get<std::uint8_t>(in, "rank");
    detail::StoredTensor st;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      auto dim = detail::ck_get<std::uint32_t>(in, "dimension");
      st.dims.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    st.values.resize(numel);
    for (std::size_t k = 0; k < numel; ++k)
      st.values[k] =
          static_cast<double>(detail::ck_get<float>(in, name.c_str()));
    if (!file.tensors.emplace(name, std::move(st)).second)
      throw CheckpointError("duplicate tensor in checkpoint: " + name);
  }
  char extra;
  if (in.read(&extra, 1))
    throw CheckpointError("trailing bytes after checkpoint payload");
  return file;
}

// Restores parameters (and optimizer velocities when present) into an
// already-built model. Architecture mismatches are reported by tensor name.
inline std::uint64_t load_checkpoint(const ParamRegistry& reg,
                                     OptimizerState* opt,
                                     const std::string& path,
                                     std::uint32_t expected_hash,
                                     bool force = false) {
  auto file = read_checkpoint(path);
  if (!force && file.config_hash != expected_hash)
    throw CheckpointError(
        "config hash mismatch for " + path +
        " (pass force to load anyway)");
  for (auto& [name, t] : detail::persisted_tensors(reg)) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end())
      throw CheckpointError("checkpoint missing tensor '" + name + "'");
    if (it->second.dims != t->dims)
      throw ShapeError("checkpoint tensor '" + name +
                       "' has mismatched shape");
    t->data = it->second.values;
  }
  if (opt) {
    opt->velocity.assign(reg.trainable.size(), {});
    opt->step_count = static_cast<std::int64_t>(file.step_count);
    for (std::size_t i = 0; i < reg.trainable.size(); ++i) {
      auto it = file.tensors.find("opt.velocity/" + reg.trainable[i].first);
      if (it == file.tensors.end()) {
        opt->velocity.clear();  // checkpoint saved without optimizer state
        break;
      }
      if (it->second.values.size() != reg.trainable[i].second->numel())
        throw ShapeError("checkpoint velocity for '" +
                         reg.trainable[i].first + "' has mismatched size");
      opt->velocity[i] = it->second.values;
    }
  }
  return file.step_count;
}

}  // namespace chainpred
