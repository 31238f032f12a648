#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

namespace lmdis {

/// Self-describing tensor container.
///
/// Layout: 8-byte magic "LMDISAR1", little-endian uint64 header length, a
/// JSON header {"format_version", "meta", "tensors": [{name, dtype, shape,
/// offset, nbytes}]}, then the raw little-endian tensor bytes. Readable
/// without libtorch.
struct TensorArchive {
  static constexpr int kFormatVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;

  /// Writes to a temporary sibling and renames it into place.
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

  const torch::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

/// FNV-1a 64-bit digest of a file, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

}  // namespace lmdis
