#include "hsf/optim.hpp"

#include "hsf/errors.hpp"

namespace hsf {

namespace {

std::vector<torch::Tensor> values_of(const net::ParamSet& params) {
  std::vector<torch::Tensor> out;
  for (const auto& item : params) out.push_back(item.value());
  return out;
}

torch::optim::AdamOptions options(const AdamSettings& s) {
  return torch::optim::AdamOptions(s.lr).betas({s.beta1, s.beta2});
}

}  // namespace

Adam::Adam(std::vector<torch::Tensor> params, const AdamSettings& settings)
    : params_(std::move(params)), impl_(params_, options(settings)) {}

Adam::Adam(const net::ParamSet& params, const AdamSettings& settings)
    : Adam(values_of(params), settings) {}

void Adam::zero_grad() { impl_.zero_grad(true); }

void Adam::step() { impl_.step(); }

void Adam::set_lr(double lr) {
  for (auto& group : impl_.param_groups())
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

double Adam::lr() const {
  return static_cast<const torch::optim::AdamOptions&>(impl_.param_groups().front().options()).lr();
}

std::vector<std::optional<Adam::Moments>> Adam::moments() const {
  std::vector<std::optional<Moments>> out;
  const auto& state = impl_.state();
  for (const auto& p : params_) {
    auto it = state.find(p.unsafeGetTensorImpl());
    if (it == state.end()) {
      out.emplace_back(std::nullopt);
      continue;
    }
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    out.emplace_back(Moments{s.step(), s.exp_avg(), s.exp_avg_sq()});
  }
  return out;
}

void Adam::restore(const std::vector<std::optional<Moments>>& moments) {
  if (moments.size() != params_.size())
    throw ContractError("optimizer state has " + std::to_string(moments.size()) +
                        " entries for " + std::to_string(params_.size()) + " parameters");
  auto& state = impl_.state();
  state.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!moments[i]) continue;
    const auto& m = *moments[i];
    if (m.exp_avg.sizes() != params_[i].sizes() || m.exp_avg_sq.sizes() != params_[i].sizes())
      throw ContractError("optimizer moment shape does not match its parameter");
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(m.step);
    s->exp_avg(m.exp_avg.detach().clone().to(params_[i].scalar_type()));
    s->exp_avg_sq(m.exp_avg_sq.detach().clone().to(params_[i].scalar_type()));
    state[params_[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace hsf
