#pragma once

#include <functional>
#include <vector>

#include "r2bd/tensor.hpp"

/// Noise schedules and the deterministic DDIM step arithmetic, including the closed-form
/// accumulation of the inversion/reconstruction mismatch. Everything here is pure and runs in
/// double precision.
namespace r2bd {

struct NoiseSchedule {
    int T = 0;
    /// alpha_1 .. alpha_T, stored at index t - 1.
    std::vector<double> alphas;
    /// alpha_bar_0 .. alpha_bar_T with alpha_bar_0 = 1.
    std::vector<double> alpha_bars;

    double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
};

/// beta_t linearly interpolated from `beta_start` (t = 1) to `beta_end` (t = T); alpha_t = 1 - beta_t.
NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end);
/// Throws ValidationError when any schedule invariant is violated.
void validate_schedule(const NoiseSchedule& sched);

/// z_{t-1} = z_t / sqrt(a_t) + (sqrt(1 - abar_{t-1}) - sqrt(1 - abar_t) / sqrt(a_t)) * eps
Tensor ddim_sample_step(const Tensor& z_t, const Tensor& eps, int t, const NoiseSchedule& sched);
/// z_t = sqrt(a_t) * (z_{t-1} - sqrt(1 - abar_{t-1}) * eps) + sqrt(1 - abar_t) * eps
Tensor ddim_invert_step(const Tensor& z_prev, const Tensor& eps, int t, const NoiseSchedule& sched);
/// Deterministic DDIM update from step `t` to an earlier step `t_prev` (0 <= t_prev < t) through
/// the predicted clean sample. Equals ddim_sample_step when t_prev = t - 1 and no clipping is
/// requested. A positive `x0_clip` clamps the predicted clean sample to [-x0_clip, x0_clip].
Tensor ddim_jump(const Tensor& z_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& sched,
                 double x0_clip = 0.0);

/// Noise prediction callback: (latent, 1-based step index, optional condition) -> noise.
using NoiseFn = std::function<Tensor(const Tensor& latent, int step, const Tensor* cond)>;

/// Cached latents and noise predictions of one inversion followed by one reconstruction.
struct TrajectoryRecord {
    int t_steps = 0;
    /// z_0^I .. z_t^I
    std::vector<Tensor> inv_latents;
    /// eps(z_{i-1}^I, i) at index i - 1
    std::vector<Tensor> inv_noise;
    /// z_t^R .. z_0^R (descending step order; rec_latents.front() == inv_latents.back())
    std::vector<Tensor> rec_latents;
    /// eps(z_i^R, i) at index i - 1
    std::vector<Tensor> rec_noise;

    const Tensor& inverted(int i) const { return inv_latents.at(static_cast<std::size_t>(i)); }
    const Tensor& reconstructed(int i) const { return rec_latents.at(static_cast<std::size_t>(t_steps - i)); }
    const Tensor& final_reconstruction() const { return rec_latents.back(); }
};

/// Throws ValidationError unless the record is complete and internally consistent.
void validate_trajectory(const TrajectoryRecord& rec);

TrajectoryRecord run_inversion_reconstruction(const Tensor& z0, int t_steps, const NoiseFn& eps_fn, const Tensor* cond,
                                              const NoiseSchedule& sched);

/// delta_{i-1} = (delta_i + c_i * (eps(z_i^R, i) - eps(z_{i-1}^I, i))) / sqrt(a_i), starting from delta_t = 0,
/// with c_i = sqrt(1 - abar_i) - sqrt(a_i - abar_i).
Tensor theoretical_residual_recursive(const TrajectoryRecord& rec, const NoiseSchedule& sched);
/// delta_0 = sum_i c_i * (eps(z_i^R, i) - eps(z_{i-1}^I, i)) / sqrt(abar_i).
Tensor theoretical_residual_closed_form(const TrajectoryRecord& rec, const NoiseSchedule& sched);

}  // namespace r2bd
