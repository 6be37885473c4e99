#pragma once

#include <torch/torch.h>

// Differentiable image losses shared by both training stages. Inputs are
// [N,C,H,W] batches in [0,1].
namespace hsf::loss {

/// Mean SSIM over batch, channels and valid 11x11 Gaussian window positions
/// (sigma 1.5, C1 = 0.01^2, C2 = 0.03^2).
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b);

/// |Gx| + |Gy| of the 3x3 Sobel operator per channel, interior pixels only.
torch::Tensor sobel_magnitude(const torch::Tensor& x);

torch::Tensor mse(const torch::Tensor& a, const torch::Tensor& b);
torch::Tensor l1(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace hsf::loss
