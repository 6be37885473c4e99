#include "hsf/cgfe.hpp"

#include <cmath>

#include "hsf/losses.hpp"

namespace hsf::cgfe {

std::string to_string(Modality m) { return m == Modality::Infrared ? "ir" : "vis"; }

Modality parse_modality(const std::string& s) {
  if (s == "ir") return Modality::Infrared;
  if (s == "vis") return Modality::Visible;
  throw ConfigError("unknown modality '" + s + "' (expected ir or vis)");
}

std::int64_t image_channels(Modality m) { return m == Modality::Infrared ? 1 : 3; }

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void set_requires_grad(net::ParamSet& params, bool flag) {
  for (auto& item : params) item.value().set_requires_grad(flag);
}

torch::Tensor lsgan_target(const torch::Tensor& pred, double target) {
  return (pred - target).pow(2).mean();
}

}  // namespace

CgfeModel CgfeModel::create(Modality modality, const LabelPalette& palette, const CgfeConfig& config,
                            std::uint64_t seed, torch::Dtype dtype) {
  palette.validate();
  CgfeModel m;
  m.modality = modality;
  m.palette = palette;
  m.config = config;
  const auto n = static_cast<std::int64_t>(palette.size());
  const auto c = image_channels(modality);
  m.g_graph = net::build_unet_G(c, n, config.unet_depth, config.base_ch);
  m.f_graph = net::build_resnet_F(n, c, config.resnet_blocks, config.base_ch);
  m.dx_graph = net::build_pixel_D(c, config.base_ch);
  m.dy_graph = net::build_nlayer_D(n, config.dy_layers, config.base_ch);
  const std::uint64_t base = derive_seed(seed, modality == Modality::Infrared ? 11 : 17);
  m.g = net::init_params(m.g_graph, derive_seed(base, 0), dtype);
  m.f = net::init_params(m.f_graph, derive_seed(base, 1), dtype);
  m.dx = net::init_params(m.dx_graph, derive_seed(base, 2), dtype);
  m.dy = net::init_params(m.dy_graph, derive_seed(base, 3), dtype);
  return m;
}

std::vector<std::pair<std::string, const net::ParamSet*>> CgfeModel::networks() const {
  return {{"G", &g}, {"F", &f}, {"Dx", &dx}, {"Dy", &dy}};
}

std::vector<std::pair<std::string, net::ParamSet*>> CgfeModel::networks() {
  return {{"G", &g}, {"F", &f}, {"Dx", &dx}, {"Dy", &dy}};
}

torch::Tensor semantic(const CgfeModel& m, const torch::Tensor& img_signed) {
  return net::forward(m.g_graph, img_signed, m.g).output;
}

SegMap scores_from_semantic(const torch::Tensor& semantic_signed) {
  auto p = ((semantic_signed + 1.0) * 0.5).clamp_min(0.0) + 1e-6;
  return {p / p.sum(1, true), true};
}

SegMap segment(const CgfeModel& m, const torch::Tensor& img_signed) {
  return scores_from_semantic(semantic(m, img_signed));
}

Reconstruction reconstruct(const CgfeModel& m, const torch::Tensor& semantic_signed) {
  if (semantic_signed.dim() != 4 || semantic_signed.size(1) != m.palette.size())
    throw SizeError("reconstruct expects an [N," + std::to_string(m.palette.size()) + ",H,W] map");
  auto r = net::forward(m.f_graph, semantic_signed, m.f, true);
  return {r.output, std::move(r.taps)};
}

CgLoss cg_terms(const CgfeModel& m, const torch::Tensor& img_signed, const torch::Tensor& semantic_signed,
                const torch::Tensor& recon_signed, const torch::Tensor& label_signed) {
  const auto& cfg = m.config;
  CgLoss out;
  out.adv_g = cfg.adversarial_weight *
              lsgan_target(net::forward(m.dy_graph, semantic_signed, m.dy).output, 1.0);
  out.adv_f = cfg.adversarial_weight *
              lsgan_target(net::forward(m.dx_graph, recon_signed, m.dx).output, 1.0);
  out.cycle = cfg.cycle_weight * loss::l1(recon_signed, img_signed);
  if (cfg.reverse_cycle) {
    auto back = semantic(m, net::forward(m.f_graph, label_signed, m.f).output);
    out.cycle_reverse = cfg.cycle_weight * loss::l1(back, label_signed);
  } else {
    out.cycle_reverse = torch::zeros({}, img_signed.options());
  }
  out.total = out.adv_g + out.adv_f + out.cycle + out.cycle_reverse;
  return out;
}

CgLoss loss_cg(const CgfeModel& m, const torch::Tensor& img_signed, const torch::Tensor& label_signed) {
  auto sem = semantic(m, img_signed);
  auto rec = net::forward(m.f_graph, sem, m.f).output;
  return cg_terms(m, img_signed, sem, rec, label_signed);
}

torch::Tensor loss_sere(const SegMap& seg, const torch::Tensor& label, double threshold,
                        std::int64_t min_kept) {
  const auto& s = seg.scores;
  if (s.dim() != 4) throw SizeError("loss_sere expects [N,n,H,W] scores");
  auto lab = label.dim() == 2 ? label.unsqueeze(0) : label;
  if (lab.size(0) != s.size(0) || lab.size(1) != s.size(2) || lab.size(2) != s.size(3))
    throw SizeError("loss_sere: label shape does not match scores");
  auto probs = seg.normalized ? s : s / s.sum(1, true);
  auto p_true = probs.gather(1, lab.to(torch::kInt64).unsqueeze(1)).flatten();
  auto losses = -torch::log(p_true.clamp_min(1e-12));

  const std::int64_t total = losses.numel();
  std::int64_t k = min_kept > 0 ? min_kept : total / 16;
  k = std::clamp<std::int64_t>(k, 1, total);

  auto hard = p_true.detach() < threshold;
  const auto n_hard = hard.sum().item<std::int64_t>();
  if (n_hard >= k) return losses.masked_select(hard).mean();
  return std::get<0>(torch::topk(losses, k)).mean();
}

StrLoss loss_str(const torch::Tensor& img_hat_signed, const torch::Tensor& img_signed) {
  if (img_hat_signed.sizes() != img_signed.sizes()) throw SizeError("loss_str: shapes differ");
  auto a = (img_hat_signed + 1.0) * 0.5;
  auto b = (img_signed + 1.0) * 0.5;
  StrLoss out;
  out.ssim_term = 1.0 - loss::ssim(a, b);
  out.sobel_term = loss::l1(loss::sobel_magnitude(a), loss::sobel_magnitude(b));
  out.total = out.ssim_term + out.sobel_term;
  return out;
}

DLoss d_terms(const CgfeModel& m, const torch::Tensor& real_img, const torch::Tensor& fake_img,
              const torch::Tensor& real_semantic, const torch::Tensor& fake_semantic) {
  DLoss out;
  out.dy = 0.5 * (lsgan_target(net::forward(m.dy_graph, real_semantic, m.dy).output, 1.0) +
                  lsgan_target(net::forward(m.dy_graph, fake_semantic.detach(), m.dy).output, 0.0));
  out.dx = 0.5 * (lsgan_target(net::forward(m.dx_graph, real_img, m.dx).output, 1.0) +
                  lsgan_target(net::forward(m.dx_graph, fake_img.detach(), m.dx).output, 0.0));
  return out;
}

DLoss loss_D(const CgfeModel& m, const torch::Tensor& img_signed, const torch::Tensor& label_signed) {
  torch::Tensor sem, rec;
  {
    torch::NoGradGuard guard;
    sem = semantic(m, img_signed);
    rec = net::forward(m.f_graph, sem, m.f).output;
  }
  return d_terms(m, img_signed, rec, label_signed, sem);
}

CgfeOptimizers::CgfeOptimizers(const CgfeModel& m)
    : g(m.g, m.config.adam), f(m.f, m.config.adam), dx(m.dx, m.config.adam), dy(m.dy, m.config.adam) {}

void CgfeOptimizers::set_lr(double lr) {
  g.set_lr(lr);
  f.set_lr(lr);
  dx.set_lr(lr);
  dy.set_lr(lr);
}

torch::Tensor modality_input(const CgfeModel& m, const Batch& batch) {
  return to_signed(m.modality == Modality::Infrared ? batch.ir : batch.vis);
}

SrLossRecord train_step_cgfe(CgfeModel& m, const Batch& batch, CgfeOptimizers& opt) {
  if (!batch.label) throw ConfigError("semantic reinforce training requires label maps");
  const auto img = modality_input(m, batch).to(m.g.begin()->value().scalar_type());
  const auto& label = *batch.label;
  const auto label_signed =
      to_signed(onehot(label, m.palette.size()).scores).to(img.scalar_type());

  // Generators.
  set_requires_grad(m.dx, false);
  set_requires_grad(m.dy, false);
  opt.g.zero_grad();
  opt.f.zero_grad();
  auto sem = semantic(m, img);
  auto rec = net::forward(m.f_graph, sem, m.f).output;
  const CgLoss cg = cg_terms(m, img, sem, rec, label_signed);
  const auto sere = loss_sere(scores_from_semantic(sem), label, m.config.ohem_threshold,
                              label.numel() / std::max<std::int64_t>(1, m.config.ohem_min_kept_divisor));
  const StrLoss str = loss_str(rec, img);
  const double lambda = m.config.lambda_sere;
  auto total = cg.total + lambda * sere + str.total;
  total.backward();
  opt.g.step();
  opt.f.step();
  set_requires_grad(m.dx, true);
  set_requires_grad(m.dy, true);

  // Discriminators.
  opt.dx.zero_grad();
  opt.dy.zero_grad();
  const DLoss d = d_terms(m, img, rec.detach(), label_signed, sem.detach());
  (d.dx + d.dy).backward();
  opt.dx.step();
  opt.dy.step();

  SrLossRecord r;
  r.adv_g = cg.adv_g.item<double>();
  r.adv_f = cg.adv_f.item<double>();
  r.cycle = cg.cycle.item<double>();
  r.cycle_reverse = cg.cycle_reverse.item<double>();
  r.l_cg = r.adv_g + r.adv_f + r.cycle + r.cycle_reverse;
  r.l_sere = sere.item<double>();
  r.ssim_term = str.ssim_term.item<double>();
  r.sobel_term = str.sobel_term.item<double>();
  r.l_str = r.ssim_term + r.sobel_term;
  r.lambda = lambda;
  r.total = r.l_cg + lambda * r.l_sere + r.l_str;
  r.loss_dx = d.dx.item<double>();
  r.loss_dy = d.dy.item<double>();

  const double graph_total = total.item<double>();
  if (!std::isfinite(graph_total) ||
      std::abs(graph_total - r.total) > 1e-5 * std::max(1.0, std::abs(r.total)))
    throw ContractError("semantic reinforce loss does not recompose from its terms");
  return r;
}

}  // namespace hsf::cgfe
