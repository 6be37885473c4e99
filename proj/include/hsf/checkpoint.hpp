#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "hsf/netblocks.hpp"

namespace hsf {

/// Binary checkpoint:
///
///   bytes 0..7    magic "HSFCKPT\0"
///   bytes 8..11   format version, uint32 little-endian
///   bytes 12..19  manifest length L, uint64 little-endian
///   next L bytes  UTF-8 JSON manifest (metadata plus one entry per blob with
///                 name, dtype, shape, byte offset and byte length)
///   remainder     blob payloads, little-endian, in manifest order
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  torch::OrderedDict<std::string, torch::Tensor> blobs;

  void add(const std::string& name, const torch::Tensor& t);
  /// Throws FormatError when the blob is absent.
  const torch::Tensor& blob(const std::string& name) const;
  bool has(const std::string& name) const { return blobs.contains(name); }

  void save(const std::filesystem::path& path) const;
  /// Throws NotFound, or FormatError on bad magic, unknown version or a
  /// truncated payload.
  static Checkpoint load(const std::filesystem::path& path);
};

/// Stores every tensor of `params` under `prefix/name`.
void store_params(Checkpoint& ckpt, const std::string& prefix, const net::ParamSet& params);
/// Copies blobs `prefix/name` into the existing tensors of `params`, checking
/// shapes. Throws FormatError on missing or mismatched blobs.
void restore_params(const Checkpoint& ckpt, const std::string& prefix, net::ParamSet& params);

/// FNV-1a over parameter names, shapes and raw bytes.
std::uint64_t fingerprint(const net::ParamSet& params);

}  // namespace hsf
