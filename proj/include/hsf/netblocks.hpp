#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hsf/errors.hpp"

// Network architectures described as small layer graphs. A graph is a plain
// description (layer specs, skip links, tap points); parameters live in a
// separate ParamSet so the same graph can be evaluated with float or double
// weights and serialized by name.
namespace hsf::net {

enum class Op { Conv, ConvTranspose, InstanceNorm, ReLU, LeakyReLU, Tanh, Concat, Add };
enum class Padding { Zeros, Reflect };

/// Index that refers to the graph input in LayerSpec::inputs.
inline constexpr int kGraphInput = -1;

struct Shape {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;

  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

struct LayerSpec {
  Op op = Op::Conv;
  std::string name;           // parameter prefix, Conv/ConvTranspose only
  std::vector<int> inputs;    // producers; empty means "previous layer"
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t output_padding = 0;
  Padding pad_mode = Padding::Zeros;
  bool bias = true;
  double slope = 0.2;         // LeakyReLU
  std::string tap;            // non-empty marks this layer's output as a tap
};

struct ParamDecl {
  std::string name;
  std::vector<std::int64_t> shape;
};

class LayerGraph {
public:
  std::string name;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  /// Input height and width must be multiples of this value.
  std::int64_t size_multiple = 1;
  std::vector<LayerSpec> layers;

  /// Appends a layer and returns its index. An empty input list links the
  /// layer to its predecessor (or to the graph input for the first layer).
  int add(LayerSpec spec);

  std::vector<std::string> tap_names() const;
  std::vector<ParamDecl> parameters() const;
  std::int64_t parameter_count() const;

  /// Output shape of every layer for a given input shape. Throws SizeError
  /// when a dimension collapses, a skip link joins unequal shapes, or the
  /// input violates size_multiple.
  std::vector<Shape> trace(const Shape& input) const;
  std::map<std::string, Shape> tap_shapes(const Shape& input) const;
  Shape output_shape(const Shape& input) const;

  /// Checks structural consistency (backward links, unique taps, channel
  /// agreement). Throws ContractError.
  void validate() const;
};

using ParamSet = torch::OrderedDict<std::string, torch::Tensor>;

/// Conv weights ~ N(0, 0.02), biases zero. Tensors are leaves with
/// requires_grad set.
ParamSet init_params(const LayerGraph& graph, std::uint64_t seed,
                     torch::Dtype dtype = torch::kFloat32, double init_std = 0.02);

/// Deep copy with fresh storage.
ParamSet clone_params(const ParamSet& params);

struct TapOutput {
  std::string name;
  torch::Tensor value;  // [N,c,h,w]
};

struct ForwardResult {
  torch::Tensor output;
  std::vector<TapOutput> taps;
};

/// Evaluates `graph` on an [N,C,H,W] batch. Taps are returned in layer order
/// when requested. Throws SizeError on shape mismatch.
ForwardResult forward(const LayerGraph& graph, const torch::Tensor& x, const ParamSet& params,
                      bool want_taps = false);

/// U-net generator: `depth` stride-2 4x4 down convs (channels base, 2base, ...
/// capped at 8base) mirrored by 4x4 transposed convs with skip concatenation,
/// tanh output.
LayerGraph build_unet_G(std::int64_t in_ch, std::int64_t out_ch, std::int64_t depth = 7,
                        std::int64_t base_ch = 64);

/// ResNet generator with taps tap1..tap5 at the two down stages, the residual
/// stack output and the two up stages.
LayerGraph build_resnet_F(std::int64_t in_ch, std::int64_t out_ch, std::int64_t n_blocks = 7,
                          std::int64_t base_ch = 64);

/// 1x1 conv stack, stride 1, no normalization.
LayerGraph build_pixel_D(std::int64_t in_ch, std::int64_t base_ch = 64);

/// PatchGAN discriminator with 4x4 kernels.
LayerGraph build_nlayer_D(std::int64_t in_ch, std::int64_t n_layers = 3, std::int64_t base_ch = 64);

/// Feature refinement block: 1x1 reduction to in_ch/reduction channels and a
/// residual block at that width. Throws ConfigError on indivisible widths.
LayerGraph build_frb(std::int64_t in_ch, std::int64_t reduction = 64);

/// 3x3 projection conv applied after the refinement block.
LayerGraph build_projection(std::int64_t in_ch, std::int64_t out_ch = 1);

}  // namespace hsf::net
