// Copyright 2026 The cdsm-fusion Authors
// SPDX-License-Identifier: Apache-2.0
//
// Parameter checkpoint file, all integers and doubles little-endian:
//
//   magic    8 bytes  "CDSMCKPT"
//   version  u32      (currently 1)
//   count    u32      number of arrays
//   count x {
//     name_len u32, name bytes (UTF-8, no terminator)
//     rank     u32, rank x u64 dims
//     values   prod(dims) x f64 (IEEE-754), row-major
//   }
//
// Arrays appear in ParamStore order, so identical stores serialize to
// identical bytes.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "cdsm/nn/params.hpp"

namespace cdsm::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'C', 'D', 'S', 'M', 'C', 'K', 'P', 'T'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> b{};
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(b.begin(), b.end());
  }
  os.write(b.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
  std::array<char, sizeof(T)> b{};
  if (!is.read(b.data(), sizeof(T))) {
    throw CheckpointError("checkpoint truncated while reading " + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(b.begin(), b.end());
  }
  T v;
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  }
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
  for (const Param& p : store) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
    for (Index d : p.value.shape()) {
      detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    }
    for (double v : p.value.values()) {
      detail::write_le<double>(os, v);
    }
  }
  if (!os) {
    throw CheckpointError("failed writing checkpoint: " + path.string());
  }
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw CheckpointError("cannot open checkpoint: " + path.string());
  }
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = detail::read_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint32_t>(is, "count");
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint32_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) {
      throw CheckpointError("checkpoint truncated in name of array " + std::to_string(i));
    }
    const auto rank = detail::read_le<std::uint32_t>(is, "rank of " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      d = static_cast<Index>(detail::read_le<std::uint64_t>(is, "dims of " + name));
    }
    Tensor t(shape);
    for (double& v : t.values()) {
      v = detail::read_le<double>(is, "values of " + name);
    }
    store.add(std::move(name), std::move(t));
  }
  return store;
}

}  // namespace cdsm::nn
