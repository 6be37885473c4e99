#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hsf/errors.hpp"

namespace hsf {

/// Class names and the subset of class ids that are treated as heat-emitting
/// foreground by the infrared mask.
struct LabelPalette {
  std::vector<std::string> names;
  std::vector<int> thermal_ids;

  int size() const { return static_cast<int>(names.size()); }
  bool is_thermal(int id) const;
  /// Throws ConfigError when a thermal id falls outside [0, size()).
  void validate() const;

  /// The 14-class road-scene palette with thermal ids {4,8,9,10,11,12}.
  static LabelPalette fmb();
};

/// A registered infrared/visible pair. Images are CHW float32 in [0,1].
struct ImagePair {
  std::string id;
  torch::Tensor ir;                    // [1,H,W]
  torch::Tensor vis;                   // [3,H,W]
  std::optional<torch::Tensor> label;  // [H,W] int64

  std::int64_t height() const { return ir.size(1); }
  std::int64_t width() const { return ir.size(2); }
};

/// Per-pixel class scores, [N,n,H,W].
struct SegMap {
  torch::Tensor scores;
  bool normalized = false;

  std::int64_t classes() const { return scores.size(1); }
};

enum class SplitRole { Train, Test };

/// One split of a dataset laid out as <root>/<split>/{Infrared,Visible,Label}/<id>.png.
struct DatasetSplit {
  std::filesystem::path dir;
  std::vector<std::string> ids;
  SplitRole role = SplitRole::Train;

  std::filesystem::path ir_path(const std::string& id) const;
  std::filesystem::path vis_path(const std::string& id) const;
  std::filesystem::path label_path(const std::string& id) const;

  /// Scans <root>/<split>/Infrared and returns ids sorted lexicographically.
  /// Train splits require a label file for every id.
  static DatasetSplit discover(const std::filesystem::path& root, const std::string& split,
                               SplitRole role);
};

struct Raster8;
/// 8-bit interleaved raster -> CHW float32 in [0,1].
torch::Tensor raster_to_tensor(const Raster8& r);
/// CHW tensor in [0,1] -> 8-bit raster, rounding to nearest.
Raster8 tensor_to_raster(const torch::Tensor& chw);

ImagePair load_pair(const DatasetSplit& split, const std::string& id, const LabelPalette& palette);

/// Writes the pair under `split_dir` using the same layout load_pair reads.
void save_pair(const std::filesystem::path& split_dir, const ImagePair& pair);

/// [0,1] -> [-1,1]. Throws RangeError for inputs outside [0,1].
torch::Tensor to_signed(const torch::Tensor& x);
/// [-1,1] -> [0,1]. Throws RangeError for inputs outside [-1,1].
torch::Tensor from_signed(const torch::Tensor& x);

/// One-hot encodes an [H,W] or [N,H,W] label map into an [N,n,H,W] SegMap.
SegMap onehot(const torch::Tensor& label, int n);

/// Index of the largest channel per pixel, lowest index on ties. Returns [N,H,W] int64.
torch::Tensor argmax_decode(const SegMap& seg);

/// BT.601 full-range conversions on [3,H,W] or [N,3,H,W] tensors in [0,1].
torch::Tensor rgb_to_ycbcr(const torch::Tensor& rgb);
torch::Tensor ycbcr_to_rgb(const torch::Tensor& ycbcr);
/// Luminance plane of an RGB tensor, keeping the channel dimension.
torch::Tensor luminance(const torch::Tensor& rgb);

/// Stacks the pairs of a batch: ir [N,1,H,W], vis [N,3,H,W], label [N,H,W] if all present.
struct Batch {
  torch::Tensor ir;
  torch::Tensor vis;
  std::optional<torch::Tensor> label;
};
Batch collate(const std::vector<const ImagePair*>& pairs);

/// Deterministic synthetic road scene. Thermal classes are bright in infrared
/// and dim in the visible image; everything else is flat in infrared and
/// textured in the visible image. Throws SizeError when `height` or `width`
/// is not a multiple of `stride`.
ImagePair synth_scene(std::uint64_t seed, std::int64_t height, std::int64_t width,
                      const LabelPalette& palette, std::int64_t stride = 8);

}  // namespace hsf
