#include "hsf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace hsf::metrics {

namespace {

void require_same_shape(const Plane& a, const Plane& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.size() != b.values.size())
    throw SizeError(std::string(what) + ": input shapes differ");
  if (a.size() == 0) throw SizeError(std::string(what) + ": empty input");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double centre = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - centre;
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable correlation keeping only fully covered positions.
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
  const auto n = static_cast<std::int64_t>(k.size());
  const std::int64_t oh = in.height - n + 1, ow = in.width - n + 1;
  Plane rows(in.height, ow);
  for (std::int64_t r = 0; r < in.height; ++r)
    for (std::int64_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) acc += k[i] * in.at(r, c + i);
      rows.at(r, c) = acc;
    }
  Plane out(oh, ow);
  for (std::int64_t r = 0; r < oh; ++r)
    for (std::int64_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) acc += k[i] * rows.at(r + i, c);
      out.at(r, c) = acc;
    }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out(a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = a.values[i] * b.values[i];
  return out;
}

double mean_of(const Plane& p) {
  double s = 0.0;
  for (double v : p.values) s += v;
  return s / static_cast<double>(p.size());
}

}  // namespace

double ssim(const Plane& a, const Plane& b, const SsimOptions& opts) {
  require_same_shape(a, b, "ssim");
  if (a.height < opts.window || a.width < opts.window)
    throw SizeError("ssim: image smaller than the " + std::to_string(opts.window) + "px window");
  const auto k = gaussian_kernel(opts.window, opts.sigma);
  const double c1 = std::pow(opts.k1 * opts.dynamic_range, 2);
  const double c2 = std::pow(opts.k2 * opts.dynamic_range, 2);

  const Plane mu_a = filter_valid(a, k);
  const Plane mu_b = filter_valid(b, k);
  const Plane e_aa = filter_valid(product(a, a), k);
  const Plane e_bb = filter_valid(product(b, b), k);
  const Plane e_ab = filter_valid(product(a, b), k);

  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a.values[i], mb = mu_b.values[i];
    const double va = e_aa.values[i] - ma * ma;
    const double vb = e_bb.values[i] - mb * mb;
    const double cov = e_ab.values[i] - ma * mb;
    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
             ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

double ssimx(const Plane& fused, const Plane& ir, const Plane& vis_y, const SsimOptions& opts) {
  return ssim(fused, ir, opts) + ssim(fused, vis_y, opts);
}

double pearson(const Plane& a, const Plane& b) {
  require_same_shape(a, b, "pearson");
  auto constant = [](const Plane& p) {
    return std::all_of(p.values.begin(), p.values.end(), [&](double v) { return v == p.values.front(); });
  };
  if (a.values.empty() || constant(a) || constant(b))
    throw DegenerateInput("correlation of a constant image is undefined");
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a.values[i] - ma, db = b.values[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateInput("correlation of a constant image is undefined");
  return sab / std::sqrt(saa * sbb);
}

double cc(const Plane& fused, const Plane& ir, const Plane& vis_y) {
  return 0.5 * (pearson(fused, ir) + pearson(fused, vis_y));
}

double mse(const Plane& a, const Plane& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(const Plane& fused, const Plane& ir, const Plane& vis_y) {
  const double err = 0.5 * (mse(fused, ir) + mse(fused, vis_y));
  if (err <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(1.0 / err));
}

// ---------------------------------------------------------------------------

namespace {

struct EdgeField {
  Plane strength;
  Plane orientation;
};

// Sobel magnitude and orientation on interior pixels.
EdgeField sobel_edges(const Plane& p) {
  const std::int64_t h = p.height - 2, w = p.width - 2;
  EdgeField f{Plane(h, w), Plane(h, w)};
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      auto v = [&](int dr, int dc) { return p.at(r + 1 + dr, c + 1 + dc); };
      const double gx = (v(-1, 1) + 2 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2 * v(0, -1) + v(1, -1));
      const double gy = (v(1, -1) + 2 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2 * v(-1, 0) + v(-1, 1));
      f.strength.at(r, c) = std::sqrt(gx * gx + gy * gy);
      f.orientation.at(r, c) = gx == 0.0 ? std::numbers::pi / 2 : std::atan(gy / gx);
    }
  return f;
}

// Edge preservation Q^{SF} of a source S in the fused image at one pixel.
double preservation(double g_src, double a_src, double g_fused, double a_fused,
                    const NabfOptions& o) {
  double g_ratio = 0.0;
  if (g_src > 0.0 && g_fused > 0.0) g_ratio = g_src > g_fused ? g_fused / g_src : g_src / g_fused;
  const double a_ratio = 1.0 - std::abs(a_src - a_fused) / (std::numbers::pi / 2);
  const double qg = o.gamma_g / (1.0 + std::exp(o.kappa_g * (g_ratio - o.sigma_g)));
  const double qa = o.gamma_a / (1.0 + std::exp(o.kappa_a * (a_ratio - o.sigma_a)));
  return qg * qa;
}

}  // namespace

double nabf(const Plane& fused, const Plane& ir, const Plane& vis_y, const NabfOptions& opts) {
  require_same_shape(fused, ir, "nabf");
  require_same_shape(fused, vis_y, "nabf");
  if (fused.height < 3 || fused.width < 3) throw SizeError("nabf: image smaller than 3x3");
  const EdgeField ef = sobel_edges(fused), ea = sobel_edges(ir), eb = sobel_edges(vis_y);

  double artifacts = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < ef.strength.size(); ++i) {
    const double gf = ef.strength.values[i], ga = ea.strength.values[i], gb = eb.strength.values[i];
    const double wa = std::pow(ga, opts.weight_exponent);
    const double wb = std::pow(gb, opts.weight_exponent);
    norm += wa + wb;
    if (gf > ga && gf > gb) {
      const double qa = preservation(ga, ea.orientation.values[i], gf, ef.orientation.values[i], opts);
      const double qb = preservation(gb, eb.orientation.values[i], gf, ef.orientation.values[i], opts);
      artifacts += (1.0 - qa) * wa + (1.0 - qb) * wb;
    }
  }
  if (norm == 0.0) throw DegenerateInput("nabf: both sources are flat");
  return artifacts / norm;
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int classes)
    : n_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {
  if (classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth) {
  if (pred.size() != truth.size()) throw SizeError("miou: prediction and truth sizes differ");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_ || truth[i] < 0 || truth[i] >= n_)
      throw LabelRangeError("miou: label outside [0, " + std::to_string(n_) + ")");
    ++counts_[truth[i] * n_ + pred[i]];
  }
}

IouResult ConfusionMatrix::iou() const {
  IouResult out;
  out.per_class.resize(n_);
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_; ++c) {
    std::uint64_t inter = count(c, c), row = 0, col = 0;
    for (int k = 0; k < n_; ++k) {
      row += count(c, k);
      col += count(k, c);
    }
    const std::uint64_t uni = row + col - inter;
    if (uni == 0) continue;
    const double v = static_cast<double>(inter) / static_cast<double>(uni);
    out.per_class[c] = v;
    sum += v;
    ++present;
  }
  out.miou = present > 0 ? sum / present : 0.0;
  return out;
}

IouResult miou(std::span<const std::int64_t> pred, std::span<const std::int64_t> truth, int classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred, truth);
  return cm.iou();
}

// ---------------------------------------------------------------------------

MetricReport evaluate_fusion(std::string id, const Plane& fused, const Plane& ir, const Plane& vis_y) {
  MetricReport r;
  r.id = std::move(id);
  r.ssimx = ssimx(fused, ir, vis_y);
  try {
    r.cc = cc(fused, ir, vis_y);
  } catch (const DegenerateInput&) {
  }
  r.psnr = psnr(fused, ir, vis_y);
  try {
    r.nabf = nabf(fused, ir, vis_y);
  } catch (const DegenerateInput&) {
  }
  return r;
}

MetricReport summarize(const std::vector<MetricReport>& rows) {
  MetricReport s;
  s.id = "mean";
  if (rows.empty()) return s;
  double cc_sum = 0.0, nabf_sum = 0.0;
  int cc_n = 0, nabf_n = 0;
  for (const auto& r : rows) {
    s.ssimx += r.ssimx;
    s.psnr += r.psnr;
    if (r.cc) cc_sum += *r.cc, ++cc_n;
    if (r.nabf) nabf_sum += *r.nabf, ++nabf_n;
  }
  s.ssimx /= static_cast<double>(rows.size());
  s.psnr /= static_cast<double>(rows.size());
  if (cc_n > 0) s.cc = cc_sum / cc_n;
  if (nabf_n > 0) s.nabf = nabf_sum / nabf_n;
  return s;
}

std::string format_row(const MetricReport& r) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string("nan");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  return r.id + "," + num(r.ssimx) + "," + num(r.cc) + "," + num(r.psnr) + "," + num(r.nabf);
}

}  // namespace hsf::metrics
