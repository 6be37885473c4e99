#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsf/errors.hpp"

// Fusion and segmentation quality measures on plain double planes. Nothing in
// here depends on the training stack.
namespace hsf::metrics {

/// Row-major single-channel image.
struct Plane {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(std::int64_t h, std::int64_t w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h * w), fill) {}

  double& at(std::int64_t r, std::int64_t c) { return values[r * width + c]; }
  double at(std::int64_t r, std::int64_t c) const { return values[r * width + c]; }
  std::size_t size() const { return values.size(); }
};

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean SSIM over every fully covered Gaussian window position. Throws
/// SizeError for mismatched shapes or images smaller than the window.
double ssim(const Plane& a, const Plane& b, const SsimOptions& opts = {});

/// ssim(fused, ir) + ssim(fused, vis_y).
double ssimx(const Plane& fused, const Plane& ir, const Plane& vis_y, const SsimOptions& opts = {});

/// Pearson correlation. Throws DegenerateInput when either input is constant.
double pearson(const Plane& a, const Plane& b);

/// Mean of pearson(fused, ir) and pearson(fused, vis_y).
double cc(const Plane& fused, const Plane& ir, const Plane& vis_y);

double mse(const Plane& a, const Plane& b);

/// Largest value psnr() reports; reached when both errors vanish.
inline constexpr double kPsnrCapDb = 100.0;

/// 10 log10(1 / MSE_avg) with MSE_avg the mean of the errors against both
/// sources, capped at kPsnrCapDb.
double psnr(const Plane& fused, const Plane& ir, const Plane& vis_y);

/// Constants of the sigmoidal edge-preservation model. Defaults are the
/// values commonly used with the gradient-transfer fusion measures.
struct NabfOptions {
  double gamma_g = 0.9994;
  double kappa_g = -15.0;
  double sigma_g = 0.5;
  double gamma_a = 0.9879;
  double kappa_a = -22.0;
  double sigma_a = 0.8;
  double weight_exponent = 1.0;
};

/// Fusion artifact measure: source-weighted loss of edge information at
/// pixels where the fused gradient exceeds both source gradients, normalized
/// by the total source gradient strength. Evaluated on interior pixels (the
/// 3x3 Sobel support). Throws DegenerateInput when both sources are flat.
double nabf(const Plane& fused, const Plane& ir, const Plane& vis_y, const NabfOptions& opts = {});

struct IouResult {
  std::vector<std::optional<double>> per_class;  // nullopt when a class is absent
  double miou = 0.0;
};

/// Accumulates a dense n x n confusion matrix (rows: truth, cols: prediction).
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(int classes);

  void add(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth);
  std::uint64_t count(int truth, int pred) const { return counts_[truth * n_ + pred]; }
  int classes() const { return n_; }
  IouResult iou() const;

private:
  int n_;
  std::vector<std::uint64_t> counts_;
};

/// Per-class IoU for every class with a non-empty union and their mean.
IouResult miou(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth, int classes);

struct MetricReport {
  std::string id;
  double ssimx = 0.0;
  std::optional<double> cc;  // undefined for constant inputs
  double psnr = 0.0;
  std::optional<double> nabf;
};

MetricReport evaluate_fusion(std::string id, const Plane& fused, const Plane& ir, const Plane& vis_y);

/// Column means over rows, skipping undefined entries.
MetricReport summarize(const std::vector<MetricReport>& rows);

/// Fixed column order of the per-image report.
inline constexpr const char* kReportHeader = "id,ssimx,cc,psnr,nabf";
std::string format_row(const MetricReport& r);

}  // namespace hsf::metrics
