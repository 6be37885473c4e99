#include "hsf/netblocks.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace hsf::net {

namespace {

std::string describe(const LayerGraph& g, std::size_t i) {
  std::ostringstream os;
  os << g.name << " layer " << i;
  if (!g.layers[i].name.empty()) os << " (" << g.layers[i].name << ")";
  return os.str();
}

bool has_params(Op op) { return op == Op::Conv || op == Op::ConvTranspose; }

std::int64_t conv_extent(std::int64_t in, const LayerSpec& s) {
  const std::int64_t span = in + 2 * s.padding - s.kernel;
  if (span < 0) return 0;
  return span / s.stride + 1;
}

}  // namespace

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.height << "x" << s.width << "x" << s.channels;
  return os.str();
}

int LayerGraph::add(LayerSpec spec) {
  if (spec.inputs.empty()) spec.inputs.push_back(static_cast<int>(layers.size()) - 1);
  layers.push_back(std::move(spec));
  return static_cast<int>(layers.size()) - 1;
}

std::vector<std::string> LayerGraph::tap_names() const {
  std::vector<std::string> names;
  for (const auto& l : layers)
    if (!l.tap.empty()) names.push_back(l.tap);
  return names;
}

std::vector<ParamDecl> LayerGraph::parameters() const {
  std::vector<ParamDecl> decls;
  for (const auto& l : layers) {
    if (l.op == Op::Conv) {
      decls.push_back({l.name + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel}});
    } else if (l.op == Op::ConvTranspose) {
      decls.push_back({l.name + ".weight", {l.in_channels, l.out_channels, l.kernel, l.kernel}});
    } else {
      continue;
    }
    if (l.bias) decls.push_back({l.name + ".bias", {l.out_channels}});
  }
  return decls;
}

std::int64_t LayerGraph::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& d : parameters()) {
    std::int64_t n = 1;
    for (auto v : d.shape) n *= v;
    total += n;
  }
  return total;
}

void LayerGraph::validate() const {
  std::set<std::string> taps;
  std::set<std::string> names;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.inputs.empty()) throw ContractError(describe(*this, i) + ": no inputs");
    for (int src : l.inputs)
      if (src < kGraphInput || src >= static_cast<int>(i))
        throw ContractError(describe(*this, i) + ": input link does not point backwards");
    if ((l.op == Op::Concat || l.op == Op::Add) && l.inputs.size() < 2)
      throw ContractError(describe(*this, i) + ": join needs at least two inputs");
    if (!l.tap.empty() && !taps.insert(l.tap).second)
      throw ContractError(name + ": duplicate tap name " + l.tap);
    if (has_params(l.op)) {
      if (l.name.empty() || !names.insert(l.name).second)
        throw ContractError(describe(*this, i) + ": parameterized layers need unique names");
      if (l.kernel < 1 || l.stride < 1 || l.in_channels < 1 || l.out_channels < 1)
        throw ContractError(describe(*this, i) + ": invalid conv geometry");
    }
  }
}

std::vector<Shape> LayerGraph::trace(const Shape& input) const {
  if (input.channels != in_channels)
    throw SizeError(name + ": expected " + std::to_string(in_channels) + " input channels, got " +
                    std::to_string(input.channels));
  if (input.height <= 0 || input.width <= 0)
    throw SizeError(name + ": empty input " + to_string(input));
  if (input.height % size_multiple != 0 || input.width % size_multiple != 0)
    throw SizeError(name + ": input " + to_string(input) + " is not a multiple of " +
                    std::to_string(size_multiple));

  std::vector<Shape> shapes(layers.size());
  auto shape_of = [&](int src) { return src == kGraphInput ? input : shapes[src]; };

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const Shape in = shape_of(l.inputs.front());
    Shape out = in;
    switch (l.op) {
      case Op::Conv: {
        if (in.channels != l.in_channels)
          throw SizeError(describe(*this, i) + ": channel mismatch");
        if (l.pad_mode == Padding::Reflect && (l.padding >= in.height || l.padding >= in.width))
          throw SizeError(describe(*this, i) + ": reflect padding exceeds input " + to_string(in));
        out = {l.out_channels, conv_extent(in.height, l), conv_extent(in.width, l)};
        break;
      }
      case Op::ConvTranspose: {
        if (in.channels != l.in_channels)
          throw SizeError(describe(*this, i) + ": channel mismatch");
        auto extent = [&](std::int64_t v) {
          return (v - 1) * l.stride - 2 * l.padding + l.kernel + l.output_padding;
        };
        out = {l.out_channels, extent(in.height), extent(in.width)};
        break;
      }
      case Op::Concat: {
        out.channels = 0;
        for (int src : l.inputs) {
          const Shape s = shape_of(src);
          if (s.height != in.height || s.width != in.width)
            throw SizeError(describe(*this, i) + ": skip link joins " + to_string(s) + " with " +
                            to_string(in));
          out.channels += s.channels;
        }
        break;
      }
      case Op::Add: {
        for (int src : l.inputs)
          if (!(shape_of(src) == in))
            throw SizeError(describe(*this, i) + ": residual link joins unequal shapes");
        break;
      }
      default:
        break;
    }
    if (out.height <= 0 || out.width <= 0)
      throw SizeError(describe(*this, i) + ": input " + to_string(input) +
                      " collapses below 1x1");
    shapes[i] = out;
  }
  return shapes;
}

std::map<std::string, Shape> LayerGraph::tap_shapes(const Shape& input) const {
  const auto shapes = trace(input);
  std::map<std::string, Shape> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (!layers[i].tap.empty()) out[layers[i].tap] = shapes[i];
  return out;
}

Shape LayerGraph::output_shape(const Shape& input) const { return trace(input).back(); }

ParamSet init_params(const LayerGraph& graph, std::uint64_t seed, torch::Dtype dtype,
                     double init_std) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  ParamSet params;
  for (const auto& decl : graph.parameters()) {
    torch::Tensor t;
    const bool is_bias = decl.name.size() > 5 && decl.name.ends_with(".bias");
    if (is_bias) {
      t = torch::zeros(decl.shape, torch::TensorOptions().dtype(dtype));
    } else {
      // Sample in double so float and double instances share the same draw.
      t = torch::empty(decl.shape, torch::TensorOptions().dtype(torch::kFloat64))
              .normal_(0.0, init_std, gen)
              .to(dtype);
    }
    t.set_requires_grad(true);
    params.insert(decl.name, t);
  }
  return params;
}

ParamSet clone_params(const ParamSet& params) {
  ParamSet out;
  for (const auto& item : params) {
    auto t = item.value().detach().clone();
    t.set_requires_grad(item.value().requires_grad());
    out.insert(item.key(), t);
  }
  return out;
}

namespace {

const torch::Tensor& lookup(const ParamSet& params, const std::string& key) {
  const torch::Tensor* t = params.find(key);
  if (t == nullptr) throw ContractError("missing parameter " + key);
  return *t;
}

std::vector<std::int64_t> pair(std::int64_t v) { return {v, v}; }

}  // namespace

ForwardResult forward(const LayerGraph& graph, const torch::Tensor& x, const ParamSet& params,
                      bool want_taps) {
  if (x.dim() != 4)
    throw SizeError(graph.name + ": expected an [N,C,H,W] input, got rank " +
                    std::to_string(x.dim()));
  graph.trace({x.size(1), x.size(2), x.size(3)});

  const auto n = graph.layers.size();
  // Release intermediates after their last consumer.
  std::vector<std::size_t> last_use(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (int src : graph.layers[i].inputs)
      if (src >= 0) last_use[src] = std::max(last_use[src], i);
  last_use[n - 1] = n;

  std::vector<torch::Tensor> outs(n);
  ForwardResult result;
  auto input_of = [&](int src) -> const torch::Tensor& { return src == kGraphInput ? x : outs[src]; };

  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = graph.layers[i];
    const torch::Tensor& in = input_of(l.inputs.front());
    torch::Tensor out;
    switch (l.op) {
      case Op::Conv: {
        const auto& w = lookup(params, l.name + ".weight");
        torch::Tensor b = l.bias ? lookup(params, l.name + ".bias") : torch::Tensor();
        if (w.scalar_type() != in.scalar_type())
          throw ContractError(graph.name + ": parameter dtype differs from input dtype");
        if (l.pad_mode == Padding::Reflect && l.padding > 0) {
          auto padded = torch::reflection_pad2d(in, {l.padding, l.padding, l.padding, l.padding});
          out = torch::conv2d(padded, w, b, pair(l.stride), pair(0));
        } else {
          out = torch::conv2d(in, w, b, pair(l.stride), pair(l.padding));
        }
        break;
      }
      case Op::ConvTranspose: {
        const auto& w = lookup(params, l.name + ".weight");
        torch::Tensor b = l.bias ? lookup(params, l.name + ".bias") : torch::Tensor();
        out = torch::conv_transpose2d(in, w, b, pair(l.stride), pair(l.padding), pair(l.output_padding));
        break;
      }
      case Op::InstanceNorm:
        out = torch::instance_norm(in, {}, {}, {}, {}, /*use_input_stats=*/true, 0.1, 1e-5, false);
        break;
      case Op::ReLU:
        out = torch::relu(in);
        break;
      case Op::LeakyReLU:
        out = torch::leaky_relu(in, l.slope);
        break;
      case Op::Tanh:
        out = torch::tanh(in);
        break;
      case Op::Concat: {
        std::vector<torch::Tensor> parts;
        for (int src : l.inputs) parts.push_back(input_of(src));
        out = torch::cat(parts, 1);
        break;
      }
      case Op::Add: {
        out = input_of(l.inputs[0]);
        for (std::size_t k = 1; k < l.inputs.size(); ++k) out = out + input_of(l.inputs[k]);
        break;
      }
    }
    outs[i] = out;
    if (want_taps && !l.tap.empty()) result.taps.push_back({l.tap, out});
    for (int src : l.inputs)
      if (src >= 0 && last_use[src] == i) outs[src] = torch::Tensor();
  }
  result.output = outs[n - 1];
  return result;
}

namespace {

LayerSpec conv(std::string name, std::int64_t in, std::int64_t out, std::int64_t k,
               std::int64_t stride, std::int64_t pad, Padding mode = Padding::Zeros) {
  LayerSpec s;
  s.op = Op::Conv;
  s.name = std::move(name);
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = k;
  s.stride = stride;
  s.padding = pad;
  s.pad_mode = mode;
  return s;
}

LayerSpec conv_t(std::string name, std::int64_t in, std::int64_t out, std::int64_t k,
                 std::int64_t stride, std::int64_t pad, std::int64_t out_pad) {
  LayerSpec s = conv(std::move(name), in, out, k, stride, pad);
  s.op = Op::ConvTranspose;
  s.output_padding = out_pad;
  return s;
}

LayerSpec unary(Op op, std::string tap = {}) {
  LayerSpec s;
  s.op = op;
  s.tap = std::move(tap);
  return s;
}

LayerSpec join(Op op, std::vector<int> inputs) {
  LayerSpec s;
  s.op = op;
  s.inputs = std::move(inputs);
  return s;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

LayerGraph build_unet_G(std::int64_t in_ch, std::int64_t out_ch, std::int64_t depth,
                        std::int64_t base_ch) {
  require(depth >= 1, "unet depth must be >= 1");
  require(in_ch >= 1 && out_ch >= 1 && base_ch >= 1, "unet channel counts must be positive");
  LayerGraph g;
  g.name = "unet_G";
  g.in_channels = in_ch;
  g.out_channels = out_ch;
  g.size_multiple = std::int64_t{1} << depth;

  auto width = [&](std::int64_t level) {
    return std::min(base_ch << std::min<std::int64_t>(level, 30), 8 * base_ch);
  };

  std::vector<int> enc(depth);
  enc[0] = g.add(conv("down1", in_ch, width(0), 4, 2, 1));
  for (std::int64_t i = 1; i < depth; ++i) {
    g.add(unary(Op::LeakyReLU));
    enc[i] = g.add(conv("down" + std::to_string(i + 1), width(i - 1), width(i), 4, 2, 1));
    if (i < depth - 1) enc[i] = g.add(unary(Op::InstanceNorm));
  }
  g.layers[enc[depth - 1]].tap = "bottleneck";

  for (std::int64_t i = depth - 1; i >= 1; --i) {
    const std::int64_t in = (i == depth - 1) ? width(i) : 2 * width(i);
    g.add(unary(Op::ReLU));
    g.add(conv_t("up" + std::to_string(i + 1), in, width(i - 1), 4, 2, 1, 0));
    const int normed = g.add(unary(Op::InstanceNorm));
    g.add(join(Op::Concat, {normed, enc[i - 1]}));
  }
  g.add(unary(Op::ReLU));
  g.add(conv_t("up1", depth == 1 ? width(0) : 2 * width(0), out_ch, 4, 2, 1, 0));
  g.add(unary(Op::Tanh));
  g.validate();
  return g;
}

LayerGraph build_resnet_F(std::int64_t in_ch, std::int64_t out_ch, std::int64_t n_blocks,
                          std::int64_t base_ch) {
  require(n_blocks >= 1, "resnet generator needs at least one residual block");
  require(in_ch >= 1 && out_ch >= 1 && base_ch >= 1, "resnet channel counts must be positive");
  LayerGraph g;
  g.name = "resnet_F";
  g.in_channels = in_ch;
  g.out_channels = out_ch;
  g.size_multiple = 4;

  const std::int64_t b = base_ch;
  g.add(conv("stem", in_ch, b, 7, 1, 3, Padding::Reflect));
  g.add(unary(Op::InstanceNorm));
  g.add(unary(Op::ReLU));
  g.add(conv("down1", b, 2 * b, 3, 2, 1));
  g.add(unary(Op::InstanceNorm));
  g.add(unary(Op::ReLU, "tap1"));
  g.add(conv("down2", 2 * b, 4 * b, 3, 2, 1));
  g.add(unary(Op::InstanceNorm));
  int block_in = g.add(unary(Op::ReLU, "tap2"));

  for (std::int64_t k = 0; k < n_blocks; ++k) {
    const std::string prefix = "res" + std::to_string(k + 1);
    g.add(conv(prefix + ".conv1", 4 * b, 4 * b, 3, 1, 1, Padding::Reflect));
    g.add(unary(Op::InstanceNorm));
    g.add(unary(Op::ReLU));
    g.add(conv(prefix + ".conv2", 4 * b, 4 * b, 3, 1, 1, Padding::Reflect));
    const int branch = g.add(unary(Op::InstanceNorm));
    block_in = g.add(join(Op::Add, {block_in, branch}));
  }
  g.layers[block_in].tap = "tap3";

  g.add(conv_t("up1", 4 * b, 2 * b, 3, 2, 1, 1));
  g.add(unary(Op::InstanceNorm));
  g.add(unary(Op::ReLU, "tap4"));
  g.add(conv_t("up2", 2 * b, b, 3, 2, 1, 1));
  g.add(unary(Op::InstanceNorm));
  g.add(unary(Op::ReLU, "tap5"));
  g.add(conv("out", b, out_ch, 7, 1, 3, Padding::Reflect));
  g.add(unary(Op::Tanh));
  g.validate();
  return g;
}

LayerGraph build_pixel_D(std::int64_t in_ch, std::int64_t base_ch) {
  require(in_ch >= 1 && base_ch >= 1, "pixel discriminator channel counts must be positive");
  LayerGraph g;
  g.name = "pixel_D";
  g.in_channels = in_ch;
  g.out_channels = 1;
  g.add(conv("conv1", in_ch, base_ch, 1, 1, 0));
  g.add(unary(Op::LeakyReLU));
  g.add(conv("conv2", base_ch, 2 * base_ch, 1, 1, 0));
  g.add(unary(Op::LeakyReLU));
  g.add(conv("conv3", 2 * base_ch, 1, 1, 1, 0));
  g.validate();
  return g;
}

LayerGraph build_nlayer_D(std::int64_t in_ch, std::int64_t n_layers, std::int64_t base_ch) {
  require(n_layers >= 1, "n-layer discriminator needs n_layers >= 1");
  require(in_ch >= 1 && base_ch >= 1, "n-layer discriminator channel counts must be positive");
  LayerGraph g;
  g.name = "nlayer_D";
  g.in_channels = in_ch;
  g.out_channels = 1;

  g.add(conv("conv1", in_ch, base_ch, 4, 2, 1));
  g.add(unary(Op::LeakyReLU));
  std::int64_t mult = 1;
  for (std::int64_t n = 1; n < n_layers; ++n) {
    const std::int64_t prev = mult;
    mult = std::min<std::int64_t>(std::int64_t{1} << std::min<std::int64_t>(n, 3), 8);
    g.add(conv("conv" + std::to_string(n + 1), base_ch * prev, base_ch * mult, 4, 2, 1));
    g.add(unary(Op::InstanceNorm));
    g.add(unary(Op::LeakyReLU));
  }
  const std::int64_t prev = mult;
  mult = std::min<std::int64_t>(std::int64_t{1} << std::min<std::int64_t>(n_layers, 3), 8);
  g.add(conv("conv" + std::to_string(n_layers + 1), base_ch * prev, base_ch * mult, 4, 1, 1));
  g.add(unary(Op::InstanceNorm));
  g.add(unary(Op::LeakyReLU));
  g.add(conv("head", base_ch * mult, 1, 4, 1, 1));
  g.validate();
  return g;
}

LayerGraph build_frb(std::int64_t in_ch, std::int64_t reduction) {
  if (reduction < 1 || in_ch < reduction || in_ch % reduction != 0)
    throw ConfigError("FRB input width " + std::to_string(in_ch) + " is not divisible by " +
                      std::to_string(reduction));
  const std::int64_t w = in_ch / reduction;
  LayerGraph g;
  g.name = "frb";
  g.in_channels = in_ch;
  g.out_channels = w;
  g.add(conv("reduce", in_ch, w, 1, 1, 0));
  const int reduced = g.add(unary(Op::LeakyReLU));
  g.add(conv("res.conv1", w, w, 3, 1, 1));
  g.add(unary(Op::LeakyReLU));
  const int branch = g.add(conv("res.conv2", w, w, 3, 1, 1));
  g.add(join(Op::Add, {reduced, branch}));
  g.add(unary(Op::LeakyReLU));
  g.validate();
  return g;
}

LayerGraph build_projection(std::int64_t in_ch, std::int64_t out_ch) {
  require(in_ch >= 1 && out_ch >= 1, "projection channel counts must be positive");
  LayerGraph g;
  g.name = "projection";
  g.in_channels = in_ch;
  g.out_channels = out_ch;
  g.add(conv("conv", in_ch, out_ch, 3, 1, 1));
  g.validate();
  return g;
}

}  // namespace hsf::net
