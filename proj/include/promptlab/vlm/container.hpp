#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "promptlab/core/tensor.hpp"

namespace promptlab::vlm {

// Shared binary tensor container used by model checkpoints (magic "VLMC")
// and persisted prompt parameters (magic "PRMT").
//
// Layout, all little-endian:
//   magic (4 bytes), u32 version, u64 seed, u8 flag, u32 tensor count,
//   per tensor: u16 name length, name bytes, u8 rank, u64 dims...,
//               f64 payload, u64 FNV-1a checksum of the payload bytes,
//   trailing words, each u16 length + UTF-8 bytes, until end of file.

inline constexpr uint32_t kContainerVersion = 1;

uint64_t fnv1a(const void* data, size_t len);

struct Container {
  std::string magic;  // 4 chars
  uint32_t version = kContainerVersion;
  uint64_t seed = 0;
  uint8_t flag = 0;
  std::vector<std::pair<std::string, core::Tensor>> tensors;
  std::vector<std::string> words;
};

void write_container(const std::string& path, const Container& c);

// Verifies magic/version and every per-tensor checksum; FormatError on any
// mismatch or truncation.
Container read_container(const std::string& path,
                         const std::string& expected_magic);

}  // namespace promptlab::vlm
