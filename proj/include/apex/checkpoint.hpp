#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "apex/config.hpp"
#include "apex/nn.hpp"

// Single-file checkpoint: magic, format version, config snapshot, iteration
// counter, and every named parameter with its optimiser state.

namespace apex {

inline constexpr char kCkptMagic[8] = {'A', 'P', 'E', 'X', 'C', 'K', 'P', '1'};
inline constexpr int32_t kCkptVersion = 1;

namespace detail {

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_pod(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
  const uint32_t n = read_pod<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace detail

struct CheckpointMeta {
  ApexConfig config;
  int64_t iteration = 0;
  int64_t adam_steps = 0;
};

template <typename T>
void save_checkpoint(const std::string& path, ApexConfig config, const ParamStore<T>& params,
                     int64_t iteration, int64_t adam_steps) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kCkptMagic, 8);
  detail::write_pod(os, kCkptVersion);
  detail::write_pod(os, static_cast<int32_t>(sizeof(T)));
  detail::write_pod(os, iteration);
  detail::write_pod(os, adam_steps);
  detail::write_str(os, config.serialize());
  detail::write_pod(os, static_cast<int32_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    const auto& e = params[i];
    detail::write_str(os, e.name);
    detail::write_pod(os, static_cast<int32_t>(e.value.shape.rank));
    for (int d = 0; d < e.value.shape.rank; ++d)
      detail::write_pod(os, static_cast<int32_t>(e.value.shape[d]));
    auto blob = [&](const Tensor<T>& t) {
      os.write(reinterpret_cast<const char*>(t.ptr()),
               static_cast<std::streamsize>(t.numel() * sizeof(T)));
    };
    blob(e.value);
    blob(e.m);
    blob(e.v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

// reads header + config only (to build a net before loading weights)
inline CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const int32_t version = detail::read_pod<int32_t>(is);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  detail::read_pod<int32_t>(is);  // scalar size, checked on load
  CheckpointMeta meta;
  meta.iteration = detail::read_pod<int64_t>(is);
  meta.adam_steps = detail::read_pod<int64_t>(is);
  const std::string cfg_text = detail::read_str(is);
  std::istringstream cs(cfg_text);
  std::string line;
  while (std::getline(cs, line)) {
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r\n");
      const auto b = s.find_last_not_of(" \t\r\n");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    meta.config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return meta;
}

template <typename T>
CheckpointMeta load_checkpoint(const std::string& path, ParamStore<T>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const int32_t version = detail::read_pod<int32_t>(is);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const int32_t ss = detail::read_pod<int32_t>(is);
  if (ss != static_cast<int32_t>(sizeof(T)))
    throw std::runtime_error("checkpoint: scalar width mismatch");
  CheckpointMeta meta;
  meta.iteration = detail::read_pod<int64_t>(is);
  meta.adam_steps = detail::read_pod<int64_t>(is);
  const std::string cfg_text = detail::read_str(is);
  {
    std::istringstream cs(cfg_text);
    std::string line;
    while (std::getline(cs, line)) {
      const size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        const auto b = s.find_last_not_of(" \t\r\n");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      meta.config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
  const int32_t count = detail::read_pod<int32_t>(is);
  for (int i = 0; i < count; ++i) {
    const std::string name = detail::read_str(is);
    const int32_t rank = detail::read_pod<int32_t>(is);
    Shape s;
    s.rank = rank;
    for (int d = 0; d < rank; ++d) s.dim[d] = detail::read_pod<int32_t>(is);
    const int idx = params.find(name);
    if (idx < 0) throw std::runtime_error("checkpoint: unknown parameter " + name);
    auto& e = params[idx];
    if (e.value.shape != s)
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " + s.str() +
                               " vs model " + e.value.shape.str());
    auto blob = [&](Tensor<T>& t) {
      is.read(reinterpret_cast<char*>(t.ptr()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
    };
    blob(e.value);
    blob(e.m);
    blob(e.v);
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data for " + name);
  }
  return meta;
}

}  // namespace apex
