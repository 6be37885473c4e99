#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "hsf/datamodel.hpp"
#include "hsf/netblocks.hpp"
#include "hsf/optim.hpp"

// Semantic reinforce stage: a CycleGAN-style pair of generators between one
// image modality and the n-class semantic domain, with one discriminator per
// domain.
namespace hsf::cgfe {

enum class Modality { Infrared, Visible };

std::string to_string(Modality m);
/// Accepts "ir" or "vis". Throws ConfigError otherwise.
Modality parse_modality(const std::string& s);
std::int64_t image_channels(Modality m);

struct CgfeConfig {
  std::int64_t base_ch = 64;
  std::int64_t unet_depth = 7;
  std::int64_t resnet_blocks = 7;
  std::int64_t dy_layers = 3;
  double lambda_sere = 80.0;
  double cycle_weight = 10.0;
  double adversarial_weight = 1.0;
  bool reverse_cycle = false;
  double ohem_threshold = 0.7;
  std::int64_t ohem_min_kept_divisor = 16;
  AdamSettings adam{};
};

/// G: image -> semantic, F: semantic -> image, Dx judges images, Dy judges
/// semantic maps.
struct CgfeModel {
  Modality modality = Modality::Visible;
  LabelPalette palette;
  CgfeConfig config;
  net::LayerGraph g_graph, f_graph, dx_graph, dy_graph;
  net::ParamSet g, f, dx, dy;

  static CgfeModel create(Modality modality, const LabelPalette& palette, const CgfeConfig& config,
                          std::uint64_t seed, torch::Dtype dtype = torch::kFloat32);

  /// (name, parameters) for G, F, Dx, Dy in that order.
  std::vector<std::pair<std::string, const net::ParamSet*>> networks() const;
  std::vector<std::pair<std::string, net::ParamSet*>> networks();
};

/// Raw generator output in [-1,1], [N,n,H,W].
torch::Tensor semantic(const CgfeModel& m, const torch::Tensor& img_signed);

/// Maps a [-1,1] semantic tensor to [0,1] and normalizes the channels.
SegMap scores_from_semantic(const torch::Tensor& semantic_signed);

/// G applied to a signed image, as a normalized SegMap.
SegMap segment(const CgfeModel& m, const torch::Tensor& img_signed);

struct Reconstruction {
  torch::Tensor image;  // signed, modality channels
  std::vector<net::TapOutput> taps;
};

/// F applied to a signed semantic tensor, with its five feature taps.
Reconstruction reconstruct(const CgfeModel& m, const torch::Tensor& semantic_signed);

struct CgLoss {
  torch::Tensor adv_g;          // Dy on G(img)
  torch::Tensor adv_f;          // Dx on F(G(img))
  torch::Tensor cycle;          // weighted |F(G(img)) - img|
  torch::Tensor cycle_reverse;  // weighted |G(F(y)) - y|, zero unless enabled
  torch::Tensor total;
};

/// Generator-side CycleGAN loss with least-squares adversarial terms.
CgLoss loss_cg(const CgfeModel& m, const torch::Tensor& img_signed, const torch::Tensor& label_signed);
/// Same, reusing an existing forward pass.
CgLoss cg_terms(const CgfeModel& m, const torch::Tensor& img_signed, const torch::Tensor& semantic_signed,
                const torch::Tensor& recon_signed, const torch::Tensor& label_signed);

/// Cross-entropy over the hardest pixels: every pixel whose true-class
/// probability is below `threshold`, or the `min_kept` largest losses if
/// fewer qualify. `min_kept` <= 0 selects N*H*W/16.
torch::Tensor loss_sere(const SegMap& seg, const torch::Tensor& label, double threshold = 0.7,
                        std::int64_t min_kept = 0);

struct StrLoss {
  torch::Tensor ssim_term;   // 1 - SSIM
  torch::Tensor sobel_term;  // L1 between Sobel magnitudes
  torch::Tensor total;
};

/// Structural loss between signed images, evaluated in [0,1] units.
StrLoss loss_str(const torch::Tensor& img_hat_signed, const torch::Tensor& img_signed);

struct DLoss {
  torch::Tensor dx;
  torch::Tensor dy;
};

/// Least-squares discriminator losses, 0.5 * (E[(D(real)-1)^2] + E[D(fake)^2]).
DLoss loss_D(const CgfeModel& m, const torch::Tensor& img_signed, const torch::Tensor& label_signed);
DLoss d_terms(const CgfeModel& m, const torch::Tensor& real_img, const torch::Tensor& fake_img,
              const torch::Tensor& real_semantic, const torch::Tensor& fake_semantic);

struct SrLossRecord {
  double adv_g = 0, adv_f = 0, cycle = 0, cycle_reverse = 0, l_cg = 0;
  double l_sere = 0;
  double ssim_term = 0, sobel_term = 0, l_str = 0;
  double lambda = 0;
  double total = 0;  // l_cg + lambda * l_sere + l_str
  double loss_dx = 0, loss_dy = 0;
};

/// One optimizer per network.
struct CgfeOptimizers {
  Adam g, f, dx, dy;

  explicit CgfeOptimizers(const CgfeModel& m);
  void set_lr(double lr);
};

/// Signed image of the model's modality taken from a batch.
torch::Tensor modality_input(const CgfeModel& m, const Batch& batch);

/// One generator update on the total loss followed by one discriminator
/// update. Throws ConfigError when the batch has no labels.
SrLossRecord train_step_cgfe(CgfeModel& m, const Batch& batch, CgfeOptimizers& opt);

}  // namespace hsf::cgfe
