#pragma once

#include <string>
#include <vector>

#include "hsf/cgfe.hpp"
#include "hsf/fusion.hpp"
#include "hsf/losses.hpp"
#include "torch_support.hpp"

namespace support {

struct NamedCheck {
  std::string name;
  GradCheck result;
};

inline hsf::LabelPalette tiny_palette() { return {{"void", "ground", "hot", "sky"}, {2}}; }

inline hsf::cgfe::CgfeConfig tiny_cgfe_config() {
  hsf::cgfe::CgfeConfig c;
  c.base_ch = 2;
  c.unet_depth = 2;
  c.resnet_blocks = 1;
  c.dy_layers = 1;
  return c;
}

/// A toy double-precision CGFE with weights large enough that activations
/// leave the linear regime.
inline hsf::cgfe::CgfeModel tiny_cgfe(hsf::cgfe::Modality m, std::uint64_t seed) {
  auto model = hsf::cgfe::CgfeModel::create(m, tiny_palette(), tiny_cgfe_config(), seed, torch::kFloat64);
  torch::NoGradGuard guard;
  for (auto& [name, ps] : model.networks())
    for (auto& item : *ps) item.value().mul_(10.0);
  return model;
}

/// Autodiff vs central differences for one graph, through a random linear
/// read-out of its output.
inline GradCheck graph_gradcheck(const hsf::net::LayerGraph& g, const hsf::net::Shape& in, int samples = 24) {
  using namespace hsf::net;
  auto params = init_params(g, 3, torch::kFloat64, 0.2);
  torch::manual_seed(4);
  const auto x = torch::rand({2, in.channels, in.height, in.width}, torch::kFloat64) * 2 - 1;
  const auto s = g.output_shape(in);
  const auto w = probe(torch::zeros({2, s.channels, s.height, s.width}, torch::kFloat64), 5);
  return gradcheck([&] { return (forward(g, x, params).output * w).sum(); }, leaves(params), samples, 6);
}

/// Every network builder at toy width on 16x16 inputs.
inline std::vector<NamedCheck> builder_gradchecks(int samples = 24) {
  using namespace hsf::net;
  return {{"unet_G", graph_gradcheck(build_unet_G(2, 3, 3, 2), {2, 16, 16}, samples)},
          {"resnet_F", graph_gradcheck(build_resnet_F(3, 2, 2, 2), {3, 16, 16}, samples)},
          {"pixel_D", graph_gradcheck(build_pixel_D(2, 3), {2, 16, 16}, samples)},
          {"nlayer_D", graph_gradcheck(build_nlayer_D(3, 2, 2), {3, 16, 16}, samples)},
          {"frb", graph_gradcheck(build_frb(8, 4), {8, 16, 16}, samples)},
          {"projection", graph_gradcheck(build_projection(2, 1), {2, 16, 16}, samples)}};
}

/// Autodiff vs central differences for every training loss on 16x16 inputs.
inline std::vector<NamedCheck> loss_gradchecks(int samples = 24) {
  using namespace hsf;
  std::vector<NamedCheck> out;
  torch::manual_seed(21);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);

  {
    auto scores = (torch::rand({2, 4, 8, 8}, opts) + 0.05).set_requires_grad(true);
    auto label = torch::randint(0, 4, {2, 8, 8}, torch::kInt64);
    out.push_back({"loss_sere", gradcheck([&] { return cgfe::loss_sere({scores, false}, label, 0.7, 8); },
                                          {scores}, samples, 1)});
  }
  {
    auto target = torch::rand({1, 2, 16, 16}, opts) * 2 - 1;
    auto guess = (torch::rand({1, 2, 16, 16}, opts) * 1.6 - 0.8).set_requires_grad(true);
    out.push_back({"loss_str", gradcheck([&] { return cgfe::loss_str(guess, target).total; }, {guess}, samples, 2)});
  }
  {
    auto model = tiny_cgfe(cgfe::Modality::Visible, 3);
    auto img = torch::rand({1, 3, 16, 16}, opts) * 2 - 1;
    auto label = to_signed(onehot(torch::randint(0, 4, {1, 16, 16}, torch::kInt64), 4).scores).to(torch::kFloat64);
    auto gf = leaves(model.g);
    for (const auto& t : leaves(model.f)) gf.push_back(t);
    out.push_back({"loss_cg", gradcheck([&] { return cgfe::loss_cg(model, img, label).total; }, gf, samples, 4)});
    auto d = leaves(model.dx);
    for (const auto& t : leaves(model.dy)) d.push_back(t);
    out.push_back({"loss_D", gradcheck([&] {
                     const auto l = cgfe::loss_D(model, img, label);
                     return l.dx + l.dy;
                   },
                   d, samples, 5)});
  }
  {
    auto fused = torch::rand({1, 1, 16, 16}, opts).set_requires_grad(true);
    auto vis = torch::rand({1, 1, 16, 16}, opts);
    auto ir = torch::rand({1, 1, 16, 16}, opts);
    out.push_back({"loss_geo", gradcheck([&] { return fusion::loss_geo(fused, vis, ir, 100, 50, 40).total; },
                                         {fused}, samples, 6)});
  }
  {
    auto f_ir = torch::rand({1, 1, 8, 8}, opts).set_requires_grad(true);
    auto f_vi = torch::rand({1, 1, 8, 8}, opts).set_requires_grad(true);
    auto omega = torch::full({}, 0.3, opts).set_requires_grad(true);
    auto gamma = torch::full({}, -0.4, opts).set_requires_grad(true);
    fusion::ThermalMask mask{(torch::rand({1, 8, 8}) > 0.5).to(torch::kUInt8) * 255};
    auto w = probe(f_ir, 7);
    out.push_back({"adaptive_fuse", gradcheck([&] { return (fusion::adaptive_fuse(f_ir, f_vi, mask, omega, gamma) * w).sum(); },
                                              {f_ir, f_vi, omega, gamma}, samples, 8)});
  }
  {
    fusion::FusionConfig cfg;
    cfg.reduction = 4;
    auto fm = fusion::FusionModel::create(8, cfg, 9, torch::kFloat64);
    auto feats = torch::rand({1, 8, 16, 16}, opts);
    std::vector<torch::Tensor> p = leaves(fm.frb_ir);
    for (const auto& t : leaves(fm.proj_ir)) p.push_back(t);
    out.push_back({"refine", gradcheck([&] { return fusion::refine(fm, feats, cgfe::Modality::Infrared).mean(); },
                                       p, samples, 10)});
  }
  return out;
}

}  // namespace support
