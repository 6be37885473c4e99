#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "hsf/netblocks.hpp"

namespace hsf {

struct AdamSettings {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
};

/// torch::optim::Adam over an explicit parameter list, with access to the
/// per-parameter moments so they can be checkpointed.
class Adam {
public:
  struct Moments {
    std::int64_t step = 0;
    torch::Tensor exp_avg;
    torch::Tensor exp_avg_sq;
  };

  Adam(std::vector<torch::Tensor> params, const AdamSettings& settings);
  Adam(const net::ParamSet& params, const AdamSettings& settings);

  void zero_grad();
  void step();
  void set_lr(double lr);
  double lr() const;

  const std::vector<torch::Tensor>& params() const { return params_; }

  /// Moments per parameter, in parameter order; nullopt before the first step.
  std::vector<std::optional<Moments>> moments() const;
  void restore(const std::vector<std::optional<Moments>>& moments);

private:
  std::vector<torch::Tensor> params_;
  torch::optim::Adam impl_;
};

}  // namespace hsf
