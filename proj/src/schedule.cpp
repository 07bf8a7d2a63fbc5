#include "adabldm/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "adabldm/errors.hpp"

namespace adabldm::schedule {

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0) return 1.0;
  ADABLDM_CHECK(t < train_steps, ParameterError, "timestep out of range");
  return alpha_bars[t];
}

double NoiseSchedule::sigma(int t, int t_prev) const {
  const double ab = alpha_bar(t);
  const double ab_prev = alpha_bar(t_prev);
  if (eta == 0.0) return 0.0;
  return eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / ab_prev));
}

NoiseSchedule make_schedule(int train_steps, double beta_start, double beta_end, Spacing spacing, double eta) {
  ADABLDM_CHECK(train_steps >= 1, ParameterError, "make_schedule: train_steps must be >= 1");
  ADABLDM_CHECK(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ParameterError,
                "make_schedule: require 0 < beta_start <= beta_end < 1");
  ADABLDM_CHECK(eta >= 0.0, ParameterError, "make_schedule: eta must be >= 0");
  NoiseSchedule s;
  s.train_steps = train_steps;
  s.eta = eta;
  s.betas.resize(train_steps);
  s.alphas.resize(train_steps);
  s.alpha_bars.resize(train_steps);
  s.sigmas.resize(train_steps);
  double prod = 1.0;
  for (int t = 0; t < train_steps; ++t) {
    switch (spacing) {
      case Spacing::linear:
        s.betas[t] = train_steps == 1 ? beta_start
                                      : beta_start + (beta_end - beta_start) * t / static_cast<double>(train_steps - 1);
        break;
    }
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  for (int t = 0; t < train_steps; ++t) s.sigmas[t] = s.sigma(t, t - 1);
  return s;
}

NoiseSchedule default_schedule(double eta) { return make_schedule(1000, 1e-4, 2e-2, Spacing::linear, eta); }

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  ADABLDM_CHECK(z0.same_shape(eps), ParameterError,
                "q_sample: shape mismatch " + z0.shape_string() + " vs " + eps.shape_string());
  ADABLDM_CHECK(t >= 0 && t < sched.train_steps, ParameterError, "q_sample: timestep out of range");
  const double a = std::sqrt(sched.alpha_bars[t]);
  const double b = std::sqrt(1.0 - sched.alpha_bars[t]);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched) {
  ADABLDM_CHECK(z_t.same_shape(eps_pred), ParameterError, "predict_x0: shape mismatch");
  const double ab = sched.alpha_bar(t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  Tensor x0(z_t.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = (z_t[i] - sb * eps_pred[i]) / sa;
  return x0;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, int t, int t_prev, const NoiseSchedule& sched,
                 double eta, Rng& rng) {
  ADABLDM_CHECK(t_prev < t && t_prev >= -1, ParameterError, "ddim_step: require -1 <= t_prev < t");
  ADABLDM_CHECK(t < sched.train_steps, ParameterError, "ddim_step: timestep out of range");
  ADABLDM_CHECK(z_t.same_shape(eps_pred), ParameterError, "ddim_step: shape mismatch");
  const double ab = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double sigma =
      eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / ab_prev));
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab), sp = std::sqrt(ab_prev);
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = (z_t[i] - sb * eps_pred[i]) / sa;
    out[i] = sp * x0 + dir * eps_pred[i];
  }
  if (sigma > 0.0) {
    for (double& v : out.values()) v += sigma * normal(rng);
  }
  return out;
}

TimestepPlan plan_timesteps(int train_steps, int free_steps, int latent_steps, int image_steps) {
  ADABLDM_CHECK(free_steps >= 0 && latent_steps >= 0 && image_steps >= 0, ParameterError,
                "plan_timesteps: stage lengths must be non-negative");
  const int n = free_steps + latent_steps + image_steps;
  ADABLDM_CHECK(n >= 1, ParameterError, "plan_timesteps: total step count must be positive");
  ADABLDM_CHECK(n <= train_steps, ParameterError, "plan_timesteps: more steps than training timesteps");
  TimestepPlan plan;
  plan.free_steps = free_steps;
  plan.latent_steps = latent_steps;
  plan.image_steps = image_steps;
  plan.stage_boundaries = {free_steps, free_steps + latent_steps};
  plan.steps.reserve(n);
  // Evenly spaced, anchored at the last training timestep.
  for (int i = 0; i < n; ++i) {
    const long long num = static_cast<long long>(n - i) * train_steps;
    plan.steps.push_back(static_cast<int>(num / n) - 1);
  }
  return plan;
}

}  // namespace adabldm::schedule
