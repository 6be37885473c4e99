#include "doctest_torch.hpp"

#include <random>

#include "hsf/netblocks.hpp"
#include "loss_gradchecks.hpp"

using namespace hsf;
using namespace hsf::net;

namespace {

constexpr double kGradTol = 1e-3;

torch::Tensor input(std::int64_t n, const Shape& s, std::uint64_t seed, torch::Dtype dtype = torch::kFloat32) {
  torch::manual_seed(seed);
  return torch::rand({n, s.channels, s.height, s.width}, torch::TensorOptions().dtype(dtype)) * 2 - 1;
}

void check_runtime_matches_trace(const LayerGraph& g, const Shape& in) {
  const auto params = init_params(g, 1);
  torch::NoGradGuard guard;
  const auto r = forward(g, input(1, in, 2), params, true);
  const auto out = g.output_shape(in);
  CHECK(r.output.size(1) == out.channels);
  CHECK(r.output.size(2) == out.height);
  CHECK(r.output.size(3) == out.width);
  const auto taps = g.tap_shapes(in);
  REQUIRE(r.taps.size() == taps.size());
  for (const auto& t : r.taps) {
    const auto& s = taps.at(t.name);
    CHECK(t.value.size(1) == s.channels);
    CHECK(t.value.size(2) == s.height);
    CHECK(t.value.size(3) == s.width);
  }
}

}  // namespace

TEST_CASE("u-net shape traces") {
  const auto g7 = build_unet_G(3, 14, 7, 64);
  const auto taps = g7.tap_shapes({3, 128, 128});
  CHECK(taps.at("bottleneck") == Shape{512, 1, 1});
  CHECK(g7.output_shape({3, 128, 128}) == Shape{14, 128, 128});
  CHECK_THROWS_AS(g7.trace({3, 100, 100}), SizeError);

  const auto g2 = build_unet_G(1, 14, 2, 8);
  CHECK(g2.output_shape({1, 8, 8}) == Shape{14, 8, 8});
  check_runtime_matches_trace(g2, {1, 8, 8});
  // channel cap at 8 * base
  const auto deep = build_unet_G(3, 4, 6, 2);
  for (const auto& d : deep.parameters())
    if (d.name.rfind("down", 0) == 0 && d.name.find("weight") != std::string::npos) CHECK(d.shape[0] <= 16);
}

TEST_CASE("resnet generator shape trace and taps") {
  const auto f = build_resnet_F(14, 3, 7, 64);
  CHECK(f.output_shape({14, 128, 128}) == Shape{3, 128, 128});
  const auto taps = f.tap_shapes({14, 128, 128});
  REQUIRE(taps.size() == 5);
  CHECK(taps.at("tap1") == Shape{128, 64, 64});
  CHECK(taps.at("tap2") == Shape{256, 32, 32});
  CHECK(taps.at("tap3") == Shape{256, 32, 32});
  CHECK(taps.at("tap4") == Shape{128, 64, 64});
  CHECK(taps.at("tap5") == Shape{64, 128, 128});
  CHECK(f.tap_names() == std::vector<std::string>{"tap1", "tap2", "tap3", "tap4", "tap5"});
  std::int64_t total = 0;
  for (const auto& [name, s] : taps) total += s.channels;
  CHECK(total == 2 * (2 * 64) + 2 * (4 * 64) + 64);
  CHECK_THROWS_AS(f.trace({14, 30, 32}), SizeError);
}

TEST_CASE("residual stack is the identity when its branches end in zeros") {
  const auto f = build_resnet_F(4, 1, 3, 4);
  auto params = init_params(f, 7);
  {
    torch::NoGradGuard guard;
    for (auto& item : params)
      if (item.key().find(".conv2.") != std::string::npos) item.value().zero_();
  }
  torch::NoGradGuard guard;
  const auto r = forward(f, input(1, {4, 16, 16}, 8), params, true);
  CHECK(torch::allclose(r.taps[1].value, r.taps[2].value, 0.0, 1e-6));
}

TEST_CASE("generator outputs stay in the tanh range") {
  const auto g = build_unet_G(3, 5, 3, 4);
  const auto f = build_resnet_F(5, 3, 2, 4);
  torch::NoGradGuard guard;
  auto pg = init_params(g, 1, torch::kFloat32, 1.0);
  auto pf = init_params(f, 2, torch::kFloat32, 1.0);
  const auto yg = forward(g, input(2, {3, 16, 16}, 3) * 5, pg).output;
  const auto yf = forward(f, input(2, {5, 16, 16}, 4) * 5, pf).output;
  CHECK(yg.abs().max().item<float>() <= 1.0f);
  CHECK(yf.abs().max().item<float>() <= 1.0f);
}

TEST_CASE("pixel discriminator is a per-pixel function") {
  const auto d = build_pixel_D(3, 8);
  CHECK(d.output_shape({3, 32, 32}) == Shape{1, 32, 32});
  const auto params = init_params(d, 4, torch::kFloat64, 0.5);
  torch::NoGradGuard guard;
  const auto x = input(1, {3, 6, 5}, 9, torch::kFloat64);
  const auto perm = torch::randperm(30, torch::kInt64);
  const auto xp = x.flatten(2).index_select(2, perm).view({1, 3, 6, 5});
  const auto y = forward(d, x, params).output.flatten(2).index_select(2, perm).view({1, 1, 6, 5});
  CHECK(torch::allclose(forward(d, xp, params).output, y, 0.0, 1e-12));
  const auto c = forward(d, torch::full({1, 3, 7, 7}, 0.3, torch::kFloat64), params).output;
  CHECK((c - c.flatten()[0]).abs().max().item<double>() == 0.0);
}

TEST_CASE("patch discriminator shape traces") {
  const auto d3 = build_nlayer_D(14, 3, 64);
  CHECK(d3.output_shape({14, 128, 128}) == Shape{1, 14, 14});
  const auto d1 = build_nlayer_D(1, 1, 8);
  const auto s = d1.output_shape({1, 16, 16});
  CHECK(s.channels == 1);
  CHECK(s.height >= 1);
  check_runtime_matches_trace(d1, {1, 16, 16});
  CHECK_THROWS_AS(d3.trace({14, 4, 4}), SizeError);
  for (const auto& p : d3.parameters())
    if (p.name.find("weight") != std::string::npos) {
      CHECK(p.shape[2] == 4);
      CHECK(p.shape[0] <= 8 * 64);
    }
}

TEST_CASE("refinement block widths") {
  const auto a = build_frb(832, 64);
  CHECK(a.out_channels == 13);
  CHECK(a.output_shape({832, 8, 8}) == Shape{13, 8, 8});
  CHECK(build_frb(64, 64).out_channels == 1);
  CHECK_THROWS_AS(build_frb(100, 64), ConfigError);
  CHECK(build_projection(13, 1).output_shape({13, 8, 8}) == Shape{1, 8, 8});
}

TEST_CASE("runtime shapes agree with traces for random valid sizes") {
  std::mt19937_64 rng(11);
  const auto g = build_unet_G(3, 6, 3, 4);
  const auto f = build_resnet_F(6, 3, 2, 4);
  const auto dx = build_pixel_D(3, 4);
  const auto dy = build_nlayer_D(6, 2, 4);
  const auto frb = build_frb(52, 4);
  for (int t = 0; t < 5; ++t) {
    const std::int64_t h = 8 * (2 + static_cast<std::int64_t>(rng() % 4));
    const std::int64_t w = 8 * (2 + static_cast<std::int64_t>(rng() % 4));
    check_runtime_matches_trace(g, {3, h, w});
    check_runtime_matches_trace(f, {6, h, w});
    check_runtime_matches_trace(dx, {3, h, w});
    check_runtime_matches_trace(dy, {6, h, w});
    check_runtime_matches_trace(frb, {52, h, w});
  }
}

TEST_CASE("forward is deterministic and taps are optional") {
  const auto f = build_resnet_F(4, 1, 2, 4);
  const auto params = init_params(f, 3);
  const auto x = input(1, {4, 16, 16}, 1);
  torch::NoGradGuard guard;
  const auto a = forward(f, x, params, true), b = forward(f, x, params, true);
  CHECK(torch::equal(a.output, b.output));
  CHECK(a.taps.size() == 5);
  CHECK(forward(f, x, params, false).taps.empty());
  CHECK_THROWS_AS(forward(f, input(1, {3, 16, 16}, 1), params), SizeError);
}

TEST_CASE("parameter initialization is seeded") {
  const auto g = build_pixel_D(3, 4);
  const auto a = init_params(g, 5), b = init_params(g, 5), c = init_params(g, 6);
  CHECK(torch::equal(a["conv1.weight"], b["conv1.weight"]));
  CHECK_FALSE(torch::equal(a["conv1.weight"], c["conv1.weight"]));
  CHECK(a["conv1.bias"].abs().max().item<float>() == 0.f);
  CHECK(a["conv1.weight"].requires_grad());
  std::int64_t count = 0;
  for (const auto& item : a) count += item.value().numel();
  CHECK(count == g.parameter_count());
}

TEST_CASE("graph validation catches bad links") {
  LayerGraph g;
  g.name = "bad";
  g.in_channels = 1;
  g.out_channels = 1;
  LayerSpec s;
  s.op = Op::Add;
  s.inputs = {kGraphInput, 3};
  g.layers.push_back(s);
  CHECK_THROWS_AS(g.validate(), ContractError);
}

TEST_CASE("autodiff agrees with finite differences for every builder") {
  for (const auto& c : support::builder_gradchecks()) {
    INFO(c.name << ": " << c.result.worst_where);
    CHECK(c.result.compared >= 10);
    CHECK(c.result.worst_rel < kGradTol);
  }
}
