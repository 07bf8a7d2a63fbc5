#pragma once

#include <vector>

#include "adabldm/autograd.hpp"

namespace adabldm::nn {

struct AdamWOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Only parameters flagged trainable are updated.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWOptions options);

  void step();
  void zero_grad();
  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamWOptions& options() const { return options_; }
  long steps_taken() const { return step_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamWOptions options_;
  long step_ = 0;
};

/// Trainable parameters of one or more parameter sets.
std::vector<Parameter*> trainable_params(std::initializer_list<ParamSet*> sets);

/// Cosine decay from base_lr to floor_fraction * base_lr over total steps.
double cosine_lr(double base_lr, long step, long total, double floor_fraction = 0.1);

}  // namespace adabldm::nn
