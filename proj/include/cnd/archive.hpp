#pragma once

// Versioned single-file container of named double matrices plus string
// metadata. Used for checkpoints and for externally converted encoder
// weights.
//
// Layout (all integers little-endian):
//   "CNDARCH1"            8-byte magic
//   u32 version
//   u32 meta_count,   { u32 len, key bytes, u32 len, value bytes } ...
//   u32 tensor_count, { u32 len, name bytes, u64 rows, u64 cols, rows*cols f64 row-major } ...
//   u64 FNV-1a of every preceding byte

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cnd/autograd.hpp"

namespace cnd {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct TensorArchive {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Mat>> tensors;

  const Mat* find(const std::string& name) const;
};

std::string serialize_archive(const TensorArchive& archive);
/// Throws IoError on bad magic, unknown version, truncation or checksum mismatch.
TensorArchive parse_archive(const std::string& bytes);

/// Writes via a temporary file and rename so readers never see a partial file.
void write_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace cnd
