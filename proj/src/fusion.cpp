#include "hsf/fusion.hpp"

#include "hsf/losses.hpp"

namespace hsf::fusion {

torch::Tensor ThermalMask::foreground(torch::Dtype dtype) const {
  return (m == 0).to(dtype).unsqueeze(1);
}

FusionModel FusionModel::create(std::int64_t feature_channels, const FusionConfig& config,
                                std::uint64_t seed, torch::Dtype dtype) {
  FusionModel fm;
  fm.config = config;
  fm.feature_channels = feature_channels;
  fm.frb_graph = net::build_frb(feature_channels, config.reduction);
  fm.proj_graph = net::build_projection(fm.frb_graph.out_channels, 1);
  fm.frb_ir = net::init_params(fm.frb_graph, seed * 4 + 1, dtype);
  fm.frb_vi = net::init_params(fm.frb_graph, seed * 4 + 2, dtype);
  fm.proj_ir = net::init_params(fm.proj_graph, seed * 4 + 3, dtype);
  fm.proj_vi = net::init_params(fm.proj_graph, seed * 4 + 4, dtype);
  fm.omega = torch::full({}, config.omega0, torch::TensorOptions().dtype(dtype)).set_requires_grad(true);
  fm.gamma = torch::full({}, config.gamma0, torch::TensorOptions().dtype(dtype)).set_requires_grad(true);
  return fm;
}

std::vector<torch::Tensor> FusionModel::trainable() const {
  std::vector<torch::Tensor> out;
  for (const auto& [name, params] : networks())
    for (const auto& item : *params) out.push_back(item.value());
  out.push_back(omega);
  out.push_back(gamma);
  return out;
}

std::vector<std::pair<std::string, const net::ParamSet*>> FusionModel::networks() const {
  return {{"FRB_ir", &frb_ir}, {"FRB_vi", &frb_vi}, {"proj_ir", &proj_ir}, {"proj_vi", &proj_vi}};
}

std::vector<std::pair<std::string, net::ParamSet*>> FusionModel::networks() {
  return {{"FRB_ir", &frb_ir}, {"FRB_vi", &frb_vi}, {"proj_ir", &proj_ir}, {"proj_vi", &proj_vi}};
}

std::int64_t tap_channels(std::int64_t base_ch) { return 2 * (2 * base_ch) + 2 * (4 * base_ch) + base_ch; }

torch::Tensor collect_features(const std::vector<net::TapOutput>& taps, std::int64_t height,
                               std::int64_t width) {
  if (taps.size() != 5)
    throw ContractError("expected 5 reconstruction taps, got " + std::to_string(taps.size()));
  std::vector<torch::Tensor> parts;
  for (const auto& t : taps) {
    if (t.value.size(2) == height && t.value.size(3) == width) {
      parts.push_back(t.value);
    } else {
      parts.push_back(torch::upsample_bilinear2d(t.value, {height, width}, /*align_corners=*/false));
    }
  }
  return torch::cat(parts, 1);
}

torch::Tensor refine(const FusionModel& fm, const torch::Tensor& f_rec, Modality modality) {
  const bool ir = modality == Modality::Infrared;
  auto h = net::forward(fm.frb_graph, f_rec, ir ? fm.frb_ir : fm.frb_vi).output;
  return net::forward(fm.proj_graph, h, ir ? fm.proj_ir : fm.proj_vi).output;
}

ThermalMask isdm_mask(const SegMap& seg_ir, const LabelPalette& palette) {
  if (seg_ir.classes() != palette.size())
    throw SizeError("isdm_mask: segmentation has " + std::to_string(seg_ir.classes()) +
                    " channels for a palette of " + std::to_string(palette.size()));
  const auto decoded = argmax_decode(seg_ir);
  auto thermal = torch::zeros_like(decoded, torch::kBool);
  for (int id : palette.thermal_ids) thermal |= decoded == id;
  auto m = torch::full(decoded.sizes(), 255, torch::kUInt8);
  m.masked_fill_(thermal, 0);
  return {m};
}

torch::Tensor adaptive_fuse(const torch::Tensor& f_ir, const torch::Tensor& f_vi,
                            const ThermalMask& mask, const torch::Tensor& omega,
                            const torch::Tensor& gamma) {
  if (f_ir.sizes() != f_vi.sizes()) throw SizeError("adaptive_fuse: feature planes differ in shape");
  auto fg = mask.m.dim() == f_ir.dim() ? (mask.m == 0).to(f_ir.scalar_type())
                                       : mask.foreground(f_ir.scalar_type());
  if (fg.dim() != f_ir.dim() || fg.size(-1) != f_ir.size(-1) || fg.size(-2) != f_ir.size(-2))
    throw SizeError("adaptive_fuse: mask does not match the feature planes");
  const auto s_w = torch::sigmoid(omega);
  const auto s_g = torch::sigmoid(gamma);
  auto thermal = s_w * f_ir + (1.0 - s_w) * f_vi;
  auto background = (1.0 - s_g) * f_ir + s_g * f_vi;
  return fg * thermal + (1.0 - fg) * background;
}

GeoLoss loss_geo(const torch::Tensor& fused, const torch::Tensor& vis_y, const torch::Tensor& ir,
                 double mu, double rho, double eta) {
  if (fused.sizes() != vis_y.sizes() || fused.sizes() != ir.sizes())
    throw SizeError("loss_geo: inputs differ in shape");
  GeoLoss out;
  out.ssim_term = 1.0 - loss::ssim(fused, vis_y);
  out.mse_vis_term = loss::mse(fused, vis_y);
  out.mse_ir_term = loss::mse(fused, ir);
  out.total = mu * out.ssim_term + rho * out.mse_vis_term + eta * out.mse_ir_term;
  return out;
}

Backbone extract(const cgfe::CgfeModel& cgfe_ir, const cgfe::CgfeModel& cgfe_vi, const Batch& batch) {
  torch::NoGradGuard guard;
  const auto h = batch.ir.size(2), w = batch.ir.size(3);
  Backbone bb;

  const auto sem_ir = cgfe::semantic(cgfe_ir, to_signed(batch.ir));
  bb.mask = isdm_mask(cgfe::scores_from_semantic(sem_ir), cgfe_ir.palette);
  bb.features_ir = collect_features(cgfe::reconstruct(cgfe_ir, sem_ir).taps, h, w);

  const auto sem_vi = cgfe::semantic(cgfe_vi, to_signed(batch.vis));
  bb.features_vi = collect_features(cgfe::reconstruct(cgfe_vi, sem_vi).taps, h, w);
  return bb;
}

torch::Tensor fuse_luminance(const FusionModel& fm, const Backbone& bb) {
  auto f_ir = refine(fm, bb.features_ir, Modality::Infrared);
  auto f_vi = refine(fm, bb.features_vi, Modality::Visible);
  return adaptive_fuse(f_ir, f_vi, bb.mask, fm.omega, fm.gamma);
}

GeoLossRecord train_step_fusion(FusionModel& fm, const cgfe::CgfeModel& cgfe_ir,
                                const cgfe::CgfeModel& cgfe_vi, const Batch& batch, Adam& opt) {
  return train_step_fusion(fm, extract(cgfe_ir, cgfe_vi, batch), batch, opt);
}

GeoLossRecord train_step_fusion(FusionModel& fm, const Backbone& bb, const Batch& batch, Adam& opt) {
  opt.zero_grad();
  const auto fused = fuse_luminance(fm, bb);
  const auto& c = fm.config;
  const GeoLoss loss = loss_geo(fused, luminance(batch.vis), batch.ir, c.mu, c.rho, c.eta);
  loss.total.backward();
  opt.step();

  GeoLossRecord r;
  r.ssim_term = loss.ssim_term.item<double>();
  r.mse_vis_term = loss.mse_vis_term.item<double>();
  r.mse_ir_term = loss.mse_ir_term.item<double>();
  r.mu = c.mu;
  r.rho = c.rho;
  r.eta = c.eta;
  r.total = c.mu * r.ssim_term + c.rho * r.mse_vis_term + c.eta * r.mse_ir_term;
  r.sigma_omega = torch::sigmoid(fm.omega).item<double>();
  r.sigma_gamma = torch::sigmoid(fm.gamma).item<double>();
  const double graph_total = loss.total.item<double>();
  if (!std::isfinite(graph_total) ||
      std::abs(graph_total - r.total) > 1e-5 * std::max(1.0, std::abs(r.total)))
    throw ContractError("geometric loss does not recompose from its terms");
  return r;
}

FusedImage fuse_pair(const FusionModel& fm, const cgfe::CgfeModel& cgfe_ir,
                     const cgfe::CgfeModel& cgfe_vi, const ImagePair& pair) {
  torch::NoGradGuard guard;
  const Batch batch = collate({&pair});
  const Backbone bb = extract(cgfe_ir, cgfe_vi, batch);
  const auto y = fuse_luminance(fm, bb).clamp(0.0, 1.0).to(torch::kFloat32);
  auto ycc = rgb_to_ycbcr(batch.vis);
  ycc.select(1, 0).copy_(y.select(1, 0));
  FusedImage out;
  out.rgb = ycbcr_to_rgb(ycc).clamp(0.0, 1.0).squeeze(0);
  out.luminance = y.squeeze(0);
  out.mask = bb.mask;
  return out;
}

}  // namespace hsf::fusion
