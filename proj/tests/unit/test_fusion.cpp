#include "doctest_torch.hpp"

#include <cmath>
#include <random>

#include "hsf/checkpoint.hpp"
#include "hsf/fusion.hpp"
#include "loss_gradchecks.hpp"
#include "oracles.hpp"

using namespace hsf;
using namespace hsf::fusion;

namespace {

constexpr double kConvexTol = 1e-7;
constexpr double kSaturationTol = 1e-8;
constexpr double kOracleTol = 1e-6;

torch::Tensor scalar(double v) { return torch::full({}, v, torch::kFloat64); }

ThermalMask random_mask(std::int64_t n, std::int64_t h, std::int64_t w) {
  return {((torch::rand({n, h, w}) > 0.5).to(torch::kUInt8)) * 255};
}

SegMap scores_for(const torch::Tensor& label, int n) {
  // perturbed one-hot so the argmax is the label but scores are not exact
  auto s = onehot(label, n).scores.to(torch::kFloat64) * 0.6 + torch::rand({label.size(0), n, label.size(1), label.size(2)}, torch::kFloat64) * 0.3;
  return {s / s.sum(1, true), true};
}

std::vector<net::TapOutput> fake_taps(std::int64_t base, std::int64_t h, std::int64_t w) {
  return {{"tap1", torch::rand({1, 2 * base, h / 2, w / 2})},
          {"tap2", torch::rand({1, 4 * base, h / 4, w / 4})},
          {"tap3", torch::rand({1, 4 * base, h / 4, w / 4})},
          {"tap4", torch::rand({1, 2 * base, h / 2, w / 2})},
          {"tap5", torch::rand({1, base, h, w})}};
}

std::uint64_t hash_all(const cgfe::CgfeModel& m) {
  std::uint64_t h = 0;
  for (const auto& [name, ps] : m.networks()) h = h * 31 + fingerprint(*ps);
  return h;
}

}  // namespace

TEST_CASE("tap features are resized and concatenated") {
  CHECK(tap_channels(64) == 832);
  CHECK(tap_channels(16) == 208);
  torch::manual_seed(0);
  const auto taps = fake_taps(2, 16, 16);
  const auto f = collect_features(taps, 16, 16);
  CHECK(f.sizes() == torch::IntArrayRef({1, tap_channels(2), 16, 16}));
  CHECK(torch::equal(f.narrow(1, tap_channels(2) - 2, 2), taps[4].value));
  // constant taps stay constant after bilinear resizing
  std::vector<net::TapOutput> flat;
  for (const auto& t : taps) flat.push_back({t.name, torch::full_like(t.value, 0.25)});
  CHECK((collect_features(flat, 16, 16) - 0.25).abs().max().item<float>() < 1e-7f);
  auto four = taps;
  four.pop_back();
  CHECK_THROWS_AS(collect_features(four, 16, 16), ContractError);
}

TEST_CASE("isdm mask is exact for every single-class map") {
  const auto pal = LabelPalette::fmb();
  for (int c = 0; c < pal.size(); ++c) {
    const auto label = torch::full({1, 8, 8}, c, torch::kInt64);
    const auto m = isdm_mask(scores_for(label, pal.size()), pal);
    const int expect = pal.is_thermal(c) ? 0 : 255;
    CHECK(m.m.dtype() == torch::kUInt8);
    CHECK((m.m.to(torch::kInt32) == expect).all().item<bool>());
  }
}

TEST_CASE("isdm mask is exact on random maps") {
  const auto pal = LabelPalette::fmb();
  torch::manual_seed(1);
  for (int t = 0; t < 1000; ++t) {
    const auto label = torch::randint(0, pal.size(), {1, 6, 7}, torch::kInt64);
    const auto m = isdm_mask(scores_for(label, pal.size()), pal);
    bool ok = true;
    const auto* l = label.data_ptr<std::int64_t>();
    const auto mm = m.m.contiguous();
    const auto* p = mm.data_ptr<std::uint8_t>();
    for (std::int64_t i = 0; i < label.numel(); ++i)
      ok &= p[i] == (pal.is_thermal(static_cast<int>(l[i])) ? 0 : 255);
    CHECK(ok);
  }
  CHECK_THROWS_AS(isdm_mask(onehot(torch::zeros({1, 2, 2}, torch::kInt64), 4), pal), SizeError);
}

TEST_CASE("adaptive fusion stays between its inputs") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  torch::manual_seed(2);
  for (int t = 0; t < 1000; ++t) {
    const auto a = torch::rand({1, 1, 4, 5}, torch::kFloat64);
    const auto b = torch::rand({1, 1, 4, 5}, torch::kFloat64);
    const auto mask = random_mask(1, 4, 5);
    const auto f = adaptive_fuse(a, b, mask, scalar(u(rng)), scalar(u(rng)));
    const auto lo = torch::minimum(a, b), hi = torch::maximum(a, b);
    CHECK((f - lo).min().item<double>() >= -kConvexTol);
    CHECK((hi - f).min().item<double>() >= -kConvexTol);
    const auto mid = adaptive_fuse(a, b, mask, scalar(0.0), scalar(0.0));
    CHECK(((mid - (a + b) / 2).abs().max().item<double>()) < kConvexTol);
  }
}

TEST_CASE("adaptive fusion saturates for large weights") {
  torch::manual_seed(3);
  const auto a = torch::rand({2, 1, 8, 8}, torch::kFloat64);
  const auto b = torch::rand({2, 1, 8, 8}, torch::kFloat64);
  const auto all_thermal = ThermalMask{torch::zeros({2, 8, 8}, torch::kUInt8)};
  const auto none = ThermalMask{torch::full({2, 8, 8}, 255, torch::kUInt8)};
  CHECK((adaptive_fuse(a, b, all_thermal, scalar(20), scalar(0)) - a).abs().max().item<double>() < kSaturationTol);
  CHECK((adaptive_fuse(a, b, all_thermal, scalar(-20), scalar(0)) - b).abs().max().item<double>() < kSaturationTol);
  CHECK((adaptive_fuse(a, b, none, scalar(0), scalar(20)) - b).abs().max().item<double>() < kSaturationTol);
  CHECK((adaptive_fuse(a, b, none, scalar(0), scalar(-20)) - a).abs().max().item<double>() < kSaturationTol);
}

TEST_CASE("adaptive fusion matches the per-pixel formula") {
  torch::manual_seed(4);
  for (int t = 0; t < 20; ++t) {
    const auto a = torch::rand({1, 1, 3, 3}, torch::kFloat64), b = torch::rand({1, 1, 3, 3}, torch::kFloat64);
    const auto mask = random_mask(1, 3, 3);
    const double w = 0.37 * t - 3, g = 2 - 0.21 * t;
    const auto f = adaptive_fuse(a, b, mask, scalar(w), scalar(g));
    for (int i = 0; i < 9; ++i) {
      const double x = a.flatten()[i].item<double>(), y = b.flatten()[i].item<double>();
      const bool hot = mask.m.flatten()[i].item<int>() == 0;
      const double sw = oracle::sigmoid(w), sg = oracle::sigmoid(g);
      const double expect = hot ? sw * x + (1 - sw) * y : (1 - sg) * x + sg * y;
      CHECK(std::abs(f.flatten()[i].item<double>() - expect) < 1e-12);
    }
  }
  CHECK_THROWS_AS(adaptive_fuse(torch::zeros({1, 1, 3, 3}), torch::zeros({1, 1, 3, 4}), random_mask(1, 3, 3),
                                scalar(0), scalar(0)),
                  SizeError);
}

TEST_CASE("geometric loss matches its terms") {
  torch::manual_seed(5);
  for (int t = 0; t < 10; ++t) {
    const auto f = torch::rand({1, 1, 16, 16}, torch::kFloat64);
    const auto v = torch::rand({1, 1, 16, 16}, torch::kFloat64);
    const auto r = torch::rand({1, 1, 16, 16}, torch::kFloat64);
    const auto l = loss_geo(f, v, r, 100, 50, 40);
    const auto pf = support::plane(f[0][0]), pv = support::plane(v[0][0]), pr = support::plane(r[0][0]);
    CHECK(std::abs(l.ssim_term.item<double>() - (1 - oracle::ssim(pf, pv))) < kOracleTol);
    CHECK(std::abs(l.mse_vis_term.item<double>() - oracle::mse(pf, pv)) < 1e-12);
    CHECK(std::abs(l.mse_ir_term.item<double>() - oracle::mse(pf, pr)) < 1e-12);
    const double expect = 100 * (1 - oracle::ssim(pf, pv)) + 50 * oracle::mse(pf, pv) + 40 * oracle::mse(pf, pr);
    CHECK(std::abs(l.total.item<double>() - expect) < 100 * kOracleTol);
    // with mu = rho = 0 only the infrared fidelity remains
    CHECK(std::abs(loss_geo(f, v, r, 0, 0, 40).total.item<double>() - 40 * oracle::mse(pf, pr)) < 1e-12);
  }
  const auto x = torch::rand({1, 1, 16, 16}, torch::kFloat64);
  CHECK(std::abs(loss_geo(x, x, x, 100, 50, 40).total.item<double>()) < 1e-12);
  CHECK_THROWS_AS(loss_geo(x, x, torch::rand({1, 1, 16, 15}), 1, 1, 1), SizeError);
}

TEST_CASE("fusion training leaves the backbones untouched") {
  const auto pal = support::tiny_palette();
  const auto cfg = support::tiny_cgfe_config();
  const auto ir = cgfe::CgfeModel::create(cgfe::Modality::Infrared, pal, cfg, 1);
  const auto vi = cgfe::CgfeModel::create(cgfe::Modality::Visible, pal, cfg, 2);
  const auto h_ir = hash_all(ir), h_vi = hash_all(vi);

  FusionConfig fc;
  fc.reduction = 2;
  auto fm = FusionModel::create(tap_channels(cfg.base_ch), fc, 3);
  CHECK(fm.frb_graph.in_channels == 13 * cfg.base_ch);
  Adam opt(fm.trainable(), fc.adam);
  torch::manual_seed(6);
  Batch b{torch::rand({2, 1, 16, 16}), torch::rand({2, 3, 16, 16}), std::nullopt};
  const double omega0 = fm.omega.item<double>();
  for (int i = 0; i < 3; ++i) {
    const auto r = train_step_fusion(fm, ir, vi, b, opt);
    CHECK(r.mu == 100.0);
    CHECK(r.rho == 50.0);
    CHECK(r.eta == 40.0);
    CHECK(std::abs(r.total - (100 * r.ssim_term + 50 * r.mse_vis_term + 40 * r.mse_ir_term)) < 1e-9);
    CHECK(r.sigma_omega > 0.0);
    CHECK(r.sigma_gamma < 1.0);
  }
  CHECK(fm.omega.item<double>() != omega0);
  CHECK(hash_all(ir) == h_ir);
  CHECK(hash_all(vi) == h_vi);
  for (const auto& [name, ps] : ir.networks())
    for (const auto& item : *ps) CHECK_FALSE(item.value().grad().defined());
}

TEST_CASE("fuse_pair output shape, range and determinism") {
  const auto pal = support::tiny_palette();
  const auto cfg = support::tiny_cgfe_config();
  const auto ir = cgfe::CgfeModel::create(cgfe::Modality::Infrared, pal, cfg, 1);
  const auto vi = cgfe::CgfeModel::create(cgfe::Modality::Visible, pal, cfg, 2);
  FusionConfig fc;
  fc.reduction = 2;
  const auto fm = FusionModel::create(tap_channels(cfg.base_ch), fc, 3);
  torch::manual_seed(7);
  ImagePair p{"x", torch::rand({1, 16, 24}), torch::rand({3, 16, 24}), std::nullopt};
  const auto a = fuse_pair(fm, ir, vi, p), b = fuse_pair(fm, ir, vi, p);
  CHECK(a.rgb.sizes() == torch::IntArrayRef({3, 16, 24}));
  CHECK(a.luminance.sizes() == torch::IntArrayRef({1, 16, 24}));
  CHECK(a.rgb.min().item<float>() >= 0.f);
  CHECK(a.rgb.max().item<float>() <= 1.f);
  CHECK(torch::equal(a.rgb, b.rgb));
  CHECK(torch::equal(a.mask.m, b.mask.m));
  // chrominance comes from the visible image
  const auto ya = rgb_to_ycbcr(a.rgb.unsqueeze(0)), yv = rgb_to_ycbcr(p.vis.unsqueeze(0));
  const auto unclipped = (a.rgb > 0.01).all(0) & (a.rgb < 0.99).all(0);
  if (unclipped.any().item<bool>()) {
    const auto d = (ya.narrow(1, 1, 2) - yv.narrow(1, 1, 2)).abs().squeeze(0);
    CHECK(d.masked_select(unclipped.unsqueeze(0).expand_as(d)).max().item<float>() < 1e-4f);
  }
}
