#include "hsf/losses.hpp"

#include <cmath>

#include "hsf/errors.hpp"

namespace hsf::loss {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

torch::Tensor gaussian_window(torch::Dtype dtype) {
  auto coords = torch::arange(kWindow, torch::TensorOptions().dtype(torch::kFloat64)) - (kWindow - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * kSigma * kSigma));
  g = g / g.sum();
  return torch::outer(g, g).to(dtype).view({1, 1, kWindow, kWindow});
}

// Depthwise correlation with a single-channel kernel.
torch::Tensor depthwise(const torch::Tensor& x, const torch::Tensor& k) {
  const auto c = x.size(1);
  const std::vector<std::int64_t> one{1, 1}, zero{0, 0};
  return torch::conv2d(x, k.expand({c, 1, k.size(2), k.size(3)}), torch::Tensor(), one, zero, one, c);
}

}  // namespace

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes() || a.dim() != 4) throw SizeError("ssim: inputs must be equal [N,C,H,W]");
  if (a.size(2) < kWindow || a.size(3) < kWindow) throw SizeError("ssim: image smaller than window");
  const auto w = gaussian_window(a.scalar_type());
  auto mu_a = depthwise(a, w), mu_b = depthwise(b, w);
  auto var_a = depthwise(a * a, w) - mu_a * mu_a;
  auto var_b = depthwise(b * b, w) - mu_b * mu_b;
  auto cov = depthwise(a * b, w) - mu_a * mu_b;
  auto map = ((2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2)) /
             ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
  return map.mean();
}

torch::Tensor sobel_magnitude(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(2) < 3 || x.size(3) < 3) throw SizeError("sobel: need [N,C,H>=3,W>=3]");
  auto opts = torch::TensorOptions().dtype(x.scalar_type());
  auto kx = torch::tensor({-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0}, opts).view({1, 1, 3, 3});
  auto ky = kx.transpose(2, 3).contiguous();
  return depthwise(x, kx).abs() + depthwise(x, ky).abs();
}

torch::Tensor mse(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).pow(2).mean(); }

torch::Tensor l1(const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().mean(); }

}  // namespace hsf::loss
