#include "adabldm/optim.hpp"

#include <cmath>
#include <numbers>

namespace adabldm::nn {

AdamW::AdamW(std::vector<Parameter*> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::zero_grad() {
  for (auto* p : params_) {
    if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.shape());
    p->grad.fill(0.0);
  }
}

void AdamW::step() {
  ++step_;
  const auto& o = options_;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.trainable || !p.grad.same_shape(p.value)) continue;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= o.learning_rate * o.weight_decay * p.value[i];
      p.value[i] -= o.learning_rate * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

std::vector<Parameter*> trainable_params(std::initializer_list<ParamSet*> sets) {
  std::vector<Parameter*> out;
  for (auto* set : sets) {
    for (auto& p : set->all()) {
      if (p.trainable) out.push_back(&p);
    }
  }
  return out;
}

double cosine_lr(double base_lr, long step, long total, double floor_fraction) {
  if (total <= 1) return base_lr;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base_lr * (floor_fraction + (1.0 - floor_fraction) * cosine);
}

}  // namespace adabldm::nn
