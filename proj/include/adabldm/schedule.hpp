#pragma once

// Diffusion-process arithmetic: variance schedules, closed-form forward
// noising and DDIM reverse steps. Everything here is a pure function of its
// inputs; randomness comes only from a caller-owned Rng.

#include <vector>

#include "adabldm/rng.hpp"
#include "adabldm/tensor.hpp"

namespace adabldm::schedule {

enum class Spacing { linear };

struct NoiseSchedule {
  int train_steps = 0;
  double eta = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  /// DDIM noise scale for the consecutive step t -> t-1 (t = 0 steps to the clean latent).
  std::vector<double> sigmas;

  /// alpha_bar at t, with t = -1 meaning the clean end point (1.0).
  double alpha_bar(int t) const;
  /// DDIM sigma for an arbitrary jump t -> t_prev.
  double sigma(int t, int t_prev) const;
};

NoiseSchedule make_schedule(int train_steps, double beta_start, double beta_end, Spacing spacing = Spacing::linear,
                            double eta = 0.0);

/// Default training schedule: linear 1e-4 -> 2e-2 over 1000 steps.
NoiseSchedule default_schedule(double eta = 0.0);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Works on any tensor shape.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// One DDIM update from t to t_prev (t_prev = -1 denotes the final clean step).
/// The rng is consulted only when the effective sigma is positive.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_pred, int t, int t_prev, const NoiseSchedule& sched,
                 double eta, Rng& rng);

/// Clean-latent estimate implied by a noise prediction.
Tensor predict_x0(const Tensor& z_t, const Tensor& eps_pred, int t, const NoiseSchedule& sched);

struct TimestepPlan {
  std::vector<int> steps;  // strictly decreasing
  int free_steps = 0;      // T1
  int latent_steps = 0;    // T2
  int image_steps = 0;     // T3
  /// Index where the latent-editing stage starts (T1) and where the image-editing stage starts (T1+T2).
  std::vector<int> stage_boundaries;

  int size() const { return static_cast<int>(steps.size()); }
  /// Timestep reached after step i (-1 after the last one).
  int previous(int i) const { return i + 1 < size() ? steps[i + 1] : -1; }
};

TimestepPlan plan_timesteps(int train_steps, int free_steps, int latent_steps, int image_steps);

}  // namespace adabldm::schedule
