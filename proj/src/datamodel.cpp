#include "hsf/datamodel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "hsf/png_io.hpp"

namespace hsf {

bool LabelPalette::is_thermal(int id) const {
  return std::find(thermal_ids.begin(), thermal_ids.end(), id) != thermal_ids.end();
}

void LabelPalette::validate() const {
  if (names.empty()) throw ConfigError("palette has no classes");
  for (int id : thermal_ids)
    if (id < 0 || id >= size())
      throw ConfigError("thermal id " + std::to_string(id) + " outside palette of " +
                        std::to_string(size()) + " classes");
}

LabelPalette LabelPalette::fmb() {
  return {{"unlabelled", "road", "sidewalk", "building", "lamp", "sign", "vegetation", "sky",
           "person", "car", "truck", "bus", "motorcycle", "pole"},
          {4, 8, 9, 10, 11, 12}};
}

std::filesystem::path DatasetSplit::ir_path(const std::string& id) const {
  return dir / "Infrared" / (id + ".png");
}
std::filesystem::path DatasetSplit::vis_path(const std::string& id) const {
  return dir / "Visible" / (id + ".png");
}
std::filesystem::path DatasetSplit::label_path(const std::string& id) const {
  return dir / "Label" / (id + ".png");
}

DatasetSplit DatasetSplit::discover(const std::filesystem::path& root, const std::string& split,
                                    SplitRole role) {
  DatasetSplit s;
  s.dir = split.empty() ? root : root / split;
  s.role = role;
  const auto ir_dir = s.dir / "Infrared";
  if (!std::filesystem::is_directory(ir_dir)) throw NotFound("no Infrared directory in " + s.dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(ir_dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
    s.ids.push_back(entry.path().stem().string());
  }
  std::sort(s.ids.begin(), s.ids.end());
  for (const auto& id : s.ids) {
    if (!std::filesystem::exists(s.vis_path(id))) throw NotFound("missing visible image for " + id);
    if (role == SplitRole::Train && !std::filesystem::exists(s.label_path(id)))
      throw NotFound("missing label for " + id);
  }
  return s;
}

torch::Tensor raster_to_tensor(const Raster8& r) {
  auto t = torch::from_blob(const_cast<std::uint8_t*>(r.pixels.data()),
                            {r.height, r.width, r.channels}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

Raster8 tensor_to_raster(const torch::Tensor& chw) {
  auto q = chw.detach().to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8);
  q = q.permute({1, 2, 0}).contiguous();
  Raster8 r;
  r.channels = static_cast<int>(chw.size(0));
  r.height = static_cast<int>(chw.size(1));
  r.width = static_cast<int>(chw.size(2));
  r.pixels.assign(q.data_ptr<std::uint8_t>(), q.data_ptr<std::uint8_t>() + q.numel());
  return r;
}

namespace {

void check_labels(const torch::Tensor& label, int n, const std::string& where) {
  if (label.numel() == 0) return;
  const auto lo = label.min().item<std::int64_t>();
  const auto hi = label.max().item<std::int64_t>();
  if (lo < 0 || hi >= n)
    throw LabelRangeError(where + ": label value " + std::to_string(hi >= n ? hi : lo) +
                          " outside [0, " + std::to_string(n) + ")");
}

}  // namespace

ImagePair load_pair(const DatasetSplit& split, const std::string& id, const LabelPalette& palette) {
  if (std::find(split.ids.begin(), split.ids.end(), id) == split.ids.end())
    throw NotFound("id " + id + " is not part of " + split.dir.string());
  const Raster8 ir = read_png(split.ir_path(id));
  const Raster8 vis = read_png(split.vis_path(id));
  if (ir.channels != 1)
    throw FormatError(split.ir_path(id).string() + ": infrared image must have 1 channel");
  if (vis.channels != 3)
    throw FormatError(split.vis_path(id).string() + ": visible image must have 3 channels");
  if (ir.width != vis.width || ir.height != vis.height)
    throw FormatError(id + ": infrared and visible images differ in size");

  ImagePair pair;
  pair.id = id;
  pair.ir = raster_to_tensor(ir);
  pair.vis = raster_to_tensor(vis);

  const auto label_file = split.label_path(id);
  if (std::filesystem::exists(label_file)) {
    const Raster8 lab = read_png(label_file);
    if (lab.channels != 1) throw FormatError(label_file.string() + ": label must be grayscale");
    if (lab.width != ir.width || lab.height != ir.height)
      throw FormatError(id + ": label size differs from image size");
    auto t = torch::from_blob(const_cast<std::uint8_t*>(lab.pixels.data()), {lab.height, lab.width},
                              torch::kUInt8)
                 .to(torch::kInt64);
    check_labels(t, palette.size(), label_file.string());
    pair.label = t;
  } else if (split.role == SplitRole::Train) {
    throw NotFound("missing label for " + id);
  }
  return pair;
}

void save_pair(const std::filesystem::path& split_dir, const ImagePair& pair) {
  write_png(split_dir / "Infrared" / (pair.id + ".png"), tensor_to_raster(pair.ir));
  write_png(split_dir / "Visible" / (pair.id + ".png"), tensor_to_raster(pair.vis));
  if (pair.label) {
    auto lab = pair.label->to(torch::kInt64);
    if (lab.min().item<std::int64_t>() < 0 || lab.max().item<std::int64_t>() > 255)
      throw LabelRangeError("label values do not fit in 8 bits");
    auto q = lab.to(torch::kUInt8).contiguous();
    Raster8 r;
    r.channels = 1;
    r.height = static_cast<int>(q.size(0));
    r.width = static_cast<int>(q.size(1));
    r.pixels.assign(q.data_ptr<std::uint8_t>(), q.data_ptr<std::uint8_t>() + q.numel());
    write_png(split_dir / "Label" / (pair.id + ".png"), r);
  }
}

torch::Tensor to_signed(const torch::Tensor& x) {
  if (x.numel() > 0 && (x.min().item<double>() < 0.0 || x.max().item<double>() > 1.0))
    throw RangeError("to_signed expects values in [0,1]");
  return x * 2.0 - 1.0;
}

torch::Tensor from_signed(const torch::Tensor& x) {
  if (x.numel() > 0 && (x.min().item<double>() < -1.0 || x.max().item<double>() > 1.0))
    throw RangeError("from_signed expects values in [-1,1]");
  return (x + 1.0) * 0.5;
}

SegMap onehot(const torch::Tensor& label, int n) {
  auto lab = label.to(torch::kInt64);
  if (lab.dim() == 2) lab = lab.unsqueeze(0);
  if (lab.dim() != 3) throw SizeError("onehot expects an [H,W] or [N,H,W] label map");
  check_labels(lab, n, "onehot");
  auto scores = torch::one_hot(lab, n).permute({0, 3, 1, 2}).to(torch::kFloat32).contiguous();
  return {scores, true};
}

torch::Tensor argmax_decode(const SegMap& seg) {
  const auto& s = seg.scores;
  if (s.dim() != 4 || s.size(1) < 1) throw SizeError("argmax_decode expects [N,n,H,W] scores");
  auto best = s.select(1, 0).clone();
  auto index = torch::zeros_like(best, torch::kInt64);
  for (std::int64_t c = 1; c < s.size(1); ++c) {
    auto channel = s.select(1, c);
    auto better = channel > best;
    index.masked_fill_(better, c);
    best = torch::where(better, channel, best);
  }
  return index;
}

namespace {

torch::Tensor channel_first(const torch::Tensor& t) {
  if (t.dim() == 3) return t.unsqueeze(0);
  if (t.dim() == 4) return t;
  throw SizeError("expected a [3,H,W] or [N,3,H,W] tensor");
}

torch::Tensor restore_rank(const torch::Tensor& t, std::int64_t rank) {
  return rank == 3 ? t.squeeze(0) : t;
}

}  // namespace

// BT.601 full range, written so that the two directions invert exactly.
constexpr double kCbScale = 2.0 * (1.0 - 0.114);
constexpr double kCrScale = 2.0 * (1.0 - 0.299);

torch::Tensor rgb_to_ycbcr(const torch::Tensor& rgb) {
  auto x = channel_first(rgb);
  if (x.size(1) != 3) throw SizeError("rgb_to_ycbcr expects 3 channels");
  auto r = x.select(1, 0), g = x.select(1, 1), b = x.select(1, 2);
  auto y = 0.299 * r + 0.587 * g + 0.114 * b;
  auto cb = 0.5 + (b - y) / kCbScale;
  auto cr = 0.5 + (r - y) / kCrScale;
  return restore_rank(torch::stack({y, cb, cr}, 1), rgb.dim());
}

torch::Tensor ycbcr_to_rgb(const torch::Tensor& ycbcr) {
  auto x = channel_first(ycbcr);
  if (x.size(1) != 3) throw SizeError("ycbcr_to_rgb expects 3 channels");
  auto y = x.select(1, 0), cb = x.select(1, 1) - 0.5, cr = x.select(1, 2) - 0.5;
  auto r = y + kCrScale * cr;
  auto b = y + kCbScale * cb;
  auto g = (y - 0.299 * r - 0.114 * b) / 0.587;
  return restore_rank(torch::stack({r, g, b}, 1), ycbcr.dim());
}

torch::Tensor luminance(const torch::Tensor& rgb) {
  auto x = channel_first(rgb);
  if (x.size(1) != 3) throw SizeError("luminance expects 3 channels");
  auto y = (0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2)).unsqueeze(1);
  return restore_rank(y, rgb.dim());
}

Batch collate(const std::vector<const ImagePair*>& pairs) {
  if (pairs.empty()) throw ContractError("collate needs at least one pair");
  std::vector<torch::Tensor> ir, vis, lab;
  bool all_labels = true;
  for (const auto* p : pairs) {
    if (p->height() != pairs.front()->height() || p->width() != pairs.front()->width())
      throw SizeError("batch mixes image sizes (" + p->id + ")");
    ir.push_back(p->ir);
    vis.push_back(p->vis);
    if (p->label) lab.push_back(*p->label);
    else all_labels = false;
  }
  Batch b{torch::stack(ir), torch::stack(vis), std::nullopt};
  if (all_labels) b.label = torch::stack(lab);
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

struct ClassLook {
  std::array<double, 3> rgb;  // visible colour when not thermal
  double ir_cool;             // flat infrared level when not thermal
  double ir_hot;              // infrared level when thermal
  double stripe_period;       // visible texture period in pixels
};

// Indexed by class id. Levels are spaced so each class stays separable by
// intensity in the infrared image alone.
constexpr std::array<ClassLook, 14> kLooks{{
    {{0.50, 0.50, 0.50}, 0.20, 0.60, 7.0},   // unlabelled
    {{0.42, 0.42, 0.45}, 0.28, 0.62, 9.0},   // road
    {{0.72, 0.62, 0.48}, 0.36, 0.66, 5.0},   // sidewalk
    {{0.66, 0.34, 0.28}, 0.21, 0.70, 6.0},   // building
    {{0.95, 0.90, 0.55}, 0.44, 0.74, 4.0},   // lamp
    {{0.20, 0.35, 0.80}, 0.10, 0.76, 4.0},   // sign
    {{0.22, 0.58, 0.22}, 0.13, 0.64, 3.0},   // vegetation
    {{0.55, 0.75, 0.95}, 0.04, 0.58, 16.0},  // sky
    {{0.85, 0.60, 0.50}, 0.32, 0.95, 5.0},   // person
    {{0.30, 0.40, 0.85}, 0.17, 0.84, 8.0},   // car
    {{0.80, 0.70, 0.20}, 0.25, 0.68, 6.0},   // truck
    {{0.85, 0.25, 0.25}, 0.30, 0.79, 7.0},   // bus
    {{0.45, 0.20, 0.55}, 0.40, 0.90, 4.0},   // motorcycle
    {{0.60, 0.60, 0.30}, 0.47, 0.72, 3.0},   // pole
}};

constexpr double kStripeAmplitude = 0.03;
constexpr double kNoiseAmplitude = 0.015;
constexpr double kThermalDimming = 0.3;

class SceneRng {
public:
  explicit SceneRng(std::uint64_t seed) : engine_(seed ^ 0x9E3779B97F4A7C15ULL) {}
  // 53-bit mantissa mapping; independent of the standard library's distributions.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {  // inclusive
    return lo + static_cast<std::int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }

private:
  std::mt19937_64 engine_;
};

struct Canvas {
  std::int64_t h, w;
  std::vector<std::int64_t> label;

  void rect(std::int64_t top, std::int64_t left, std::int64_t bottom, std::int64_t right, int id) {
    top = std::clamp<std::int64_t>(top, 0, h);
    bottom = std::clamp<std::int64_t>(bottom, 0, h);
    left = std::clamp<std::int64_t>(left, 0, w);
    right = std::clamp<std::int64_t>(right, 0, w);
    for (std::int64_t r = top; r < bottom; ++r)
      for (std::int64_t c = left; c < right; ++c) label[r * w + c] = id;
  }

  void ellipse(double cy, double cx, double ry, double rx, int id) {
    for (std::int64_t r = 0; r < h; ++r)
      for (std::int64_t c = 0; c < w; ++c) {
        const double dy = (r + 0.5 - cy) / ry, dx = (c + 0.5 - cx) / rx;
        if (dy * dy + dx * dx <= 1.0) label[r * w + c] = id;
      }
  }
};

// Matches what an 8-bit PNG round trip yields, so scenes survive save/load bitwise.
float quantize(double v) {
  return static_cast<float>(std::round(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
}

}  // namespace

ImagePair synth_scene(std::uint64_t seed, std::int64_t height, std::int64_t width,
                      const LabelPalette& palette, std::int64_t stride) {
  if (stride < 1 || height < stride || width < stride || height % stride != 0 ||
      width % stride != 0)
    throw SizeError("synthetic scene size " + std::to_string(height) + "x" + std::to_string(width) +
                    " is not a multiple of " + std::to_string(stride));
  palette.validate();
  if (palette.size() < static_cast<int>(kLooks.size()))
    throw ConfigError("synthetic scenes use the 14-class road palette");

  SceneRng rng(seed);
  Canvas canvas{height, width, std::vector<std::int64_t>(height * width, 7)};
  const double H = static_cast<double>(height), W = static_cast<double>(width);

  const auto horizon = static_cast<std::int64_t>(H * rng.uniform(0.35, 0.48));
  const auto kerb = horizon + static_cast<std::int64_t>(H * rng.uniform(0.08, 0.14));
  canvas.rect(horizon, 0, kerb, width, 2);
  canvas.rect(kerb, 0, height, width, 1);

  const auto buildings = rng.integer(1, 3);
  for (std::int64_t k = 0; k < buildings; ++k) {
    const auto bw = static_cast<std::int64_t>(W * rng.uniform(0.15, 0.3));
    const auto left = static_cast<std::int64_t>(rng.uniform() * (W - bw));
    const auto top = static_cast<std::int64_t>(H * rng.uniform(0.08, 0.28));
    canvas.rect(top, left, horizon, left + bw, 3);
  }
  const auto trees = rng.integer(1, 2);
  for (std::int64_t k = 0; k < trees; ++k) {
    canvas.ellipse(horizon - H * rng.uniform(0.0, 0.06), W * rng.uniform(0.1, 0.9),
                   H * rng.uniform(0.06, 0.1), W * rng.uniform(0.06, 0.11), 6);
  }

  // Heat-emitting objects: always at least one so every scene has a foreground.
  const auto objects = rng.integer(1, 3);
  for (std::int64_t k = 0; k < objects; ++k) {
    const auto kind = rng.integer(0, 2);
    if (kind == 0) {  // person standing on the sidewalk
      const double ph = H * rng.uniform(0.16, 0.24), pw = W * rng.uniform(0.06, 0.09);
      const double cx = W * rng.uniform(0.08, 0.92);
      const double foot = static_cast<double>(kerb) + H * rng.uniform(0.0, 0.05);
      canvas.ellipse(foot - ph / 2, cx, ph / 2, pw / 2, 8);
    } else {  // car or truck on the road
      const int id = kind == 1 ? 9 : 10;
      const double vh = H * (id == 9 ? rng.uniform(0.1, 0.14) : rng.uniform(0.15, 0.2));
      const double vw = W * (id == 9 ? rng.uniform(0.18, 0.26) : rng.uniform(0.24, 0.34));
      const auto left = static_cast<std::int64_t>(rng.uniform() * (W - vw));
      const auto bottom =
          static_cast<std::int64_t>(static_cast<double>(kerb) + vh + rng.uniform() * (H - kerb - vh));
      canvas.rect(bottom - static_cast<std::int64_t>(vh), left, bottom,
                  left + static_cast<std::int64_t>(vw), id);
    }
  }

  std::array<double, 14> phase{};
  for (auto& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const bool vertical_stripes = rng.uniform() < 0.5;

  auto ir = torch::empty({1, height, width}, torch::kFloat32);
  auto vis = torch::empty({3, height, width}, torch::kFloat32);
  auto label = torch::empty({height, width}, torch::kInt64);
  auto ir_a = ir.accessor<float, 3>();
  auto vis_a = vis.accessor<float, 3>();
  auto lab_a = label.accessor<std::int64_t, 2>();

  for (std::int64_t r = 0; r < height; ++r) {
    for (std::int64_t c = 0; c < width; ++c) {
      const int id = static_cast<int>(canvas.label[r * width + c]);
      const ClassLook& look = kLooks[id];
      const bool hot = palette.is_thermal(id);
      const double coord = static_cast<double>(vertical_stripes ? c : r);
      const double texture =
          kStripeAmplitude * std::sin(2.0 * std::numbers::pi * coord / look.stripe_period + phase[id]) +
          kNoiseAmplitude * (2.0 * rng.uniform() - 1.0);
      const double scale = hot ? kThermalDimming : 1.0;
      for (int ch = 0; ch < 3; ++ch)
        vis_a[ch][r][c] = quantize(look.rgb[ch] * scale + texture * scale);
      ir_a[0][r][c] = quantize(hot ? look.ir_hot : look.ir_cool);
      lab_a[r][c] = id;
    }
  }

  ImagePair pair;
  pair.id = "synth_" + std::to_string(seed);
  pair.ir = ir;
  pair.vis = vis;
  pair.label = label;
  return pair;
}

}  // namespace hsf
