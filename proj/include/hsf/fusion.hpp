#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "hsf/cgfe.hpp"
#include "hsf/datamodel.hpp"
#include "hsf/netblocks.hpp"
#include "hsf/optim.hpp"

// Fusion stage: reconstruction-tap features from two frozen CGFEs are
// refined per modality into a luminance plane and blended with two learned
// weights, one for the infrared-derived thermal region and one for the rest.
namespace hsf::fusion {

using cgfe::Modality;

/// Pixel values are 0 on thermal foreground and 255 elsewhere. [N,H,W] uint8.
struct ThermalMask {
  torch::Tensor m;

  /// 1.0 on thermal pixels, 0.0 elsewhere, [N,1,H,W] in `dtype`.
  torch::Tensor foreground(torch::Dtype dtype = torch::kFloat32) const;
};

struct FusionConfig {
  std::int64_t reduction = 64;
  double mu = 100.0;
  double rho = 50.0;
  double eta = 40.0;
  double omega0 = 0.5;
  double gamma0 = 0.5;
  AdamSettings adam{};
};

struct FusionModel {
  FusionConfig config;
  std::int64_t feature_channels = 0;
  net::LayerGraph frb_graph, proj_graph;
  net::ParamSet frb_ir, frb_vi, proj_ir, proj_vi;
  torch::Tensor omega;  // scalar, unconstrained
  torch::Tensor gamma;  // scalar, unconstrained

  static FusionModel create(std::int64_t feature_channels, const FusionConfig& config,
                            std::uint64_t seed, torch::Dtype dtype = torch::kFloat32);

  /// Every trainable tensor in a fixed order.
  std::vector<torch::Tensor> trainable() const;
  std::vector<std::pair<std::string, const net::ParamSet*>> networks() const;
  std::vector<std::pair<std::string, net::ParamSet*>> networks();
};

/// Total channel count of the five reconstruction taps for a given F width.
std::int64_t tap_channels(std::int64_t base_ch);

/// Bilinearly resizes each tap to (height, width) and concatenates them in
/// order. Throws ContractError unless exactly five taps are given.
torch::Tensor collect_features(const std::vector<net::TapOutput>& taps, std::int64_t height,
                               std::int64_t width);

/// Refinement block followed by the projection conv; [N,1,H,W].
torch::Tensor refine(const FusionModel& fm, const torch::Tensor& f_rec, Modality modality);

/// 0 where the decoded class is thermal, 255 elsewhere.
ThermalMask isdm_mask(const SegMap& seg_ir, const LabelPalette& palette);

/// Region-weighted blend of the two refined planes.
torch::Tensor adaptive_fuse(const torch::Tensor& f_ir, const torch::Tensor& f_vi,
                            const ThermalMask& mask, const torch::Tensor& omega,
                            const torch::Tensor& gamma);

struct GeoLoss {
  torch::Tensor ssim_term;     // 1 - SSIM(I_f, vis_y)
  torch::Tensor mse_vis_term;  // MSE(I_f, vis_y)
  torch::Tensor mse_ir_term;   // MSE(I_f, ir)
  torch::Tensor total;
};

GeoLoss loss_geo(const torch::Tensor& fused, const torch::Tensor& vis_y, const torch::Tensor& ir,
                 double mu, double rho, double eta);

struct GeoLossRecord {
  double ssim_term = 0, mse_vis_term = 0, mse_ir_term = 0;
  double total = 0;  // mu * ssim_term + rho * mse_vis_term + eta * mse_ir_term
  double mu = 0, rho = 0, eta = 0;
  double sigma_omega = 0, sigma_gamma = 0;
};

/// Frozen-backbone outputs for one batch.
struct Backbone {
  torch::Tensor features_ir;  // [N,C,H,W]
  torch::Tensor features_vi;
  ThermalMask mask;
};

/// Runs both CGFEs without gradients: taps from F(G(img)) and the mask from
/// the infrared segmentation.
Backbone extract(const cgfe::CgfeModel& cgfe_ir, const cgfe::CgfeModel& cgfe_vi, const Batch& batch);

/// Fused luminance for one batch, [N,1,H,W].
torch::Tensor fuse_luminance(const FusionModel& fm, const Backbone& bb);

/// One update of the fusion parameters; the CGFEs are only read.
GeoLossRecord train_step_fusion(FusionModel& fm, const cgfe::CgfeModel& cgfe_ir,
                                const cgfe::CgfeModel& cgfe_vi, const Batch& batch, Adam& opt);
/// Same, from precomputed backbone outputs.
GeoLossRecord train_step_fusion(FusionModel& fm, const Backbone& bb, const Batch& batch, Adam& opt);

struct FusedImage {
  torch::Tensor rgb;        // [3,H,W] in [0,1]
  torch::Tensor luminance;  // [1,H,W] in [0,1], before colour reattachment
  ThermalMask mask;         // [1,H,W]
};

/// Full inference path for one pair: fused luminance with the visible
/// chrominance reattached, clamped to [0,1].
FusedImage fuse_pair(const FusionModel& fm, const cgfe::CgfeModel& cgfe_ir,
                     const cgfe::CgfeModel& cgfe_vi, const ImagePair& pair);

}  // namespace hsf::fusion
