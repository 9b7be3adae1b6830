#include "r2bd/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "r2bd/error.hpp"

namespace r2bd {

namespace {

void check_step(int t, const NoiseSchedule& sched) {
    require(t >= 1 && t <= sched.T, "step index " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
}

void check_pair(const Tensor& a, const Tensor& b) {
    require(a.same_shape(b), "latent/noise shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// sqrt(a_t - abar_t); the difference is >= 0 mathematically and exactly 0 at t = 1.
double sqrt_alpha_minus_bar(int t, const NoiseSchedule& s) {
    const double d = s.alpha(t) - s.alpha_bar(t);
    return d > 0.0 ? std::sqrt(d) : 0.0;
}

double residual_coefficient(int i, const NoiseSchedule& s) {
    return std::sqrt(1.0 - s.alpha_bar(i)) - sqrt_alpha_minus_bar(i, s);
}

}  // namespace

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
    require(T >= 1, "schedule length T must be >= 1, got " + std::to_string(T));
    require(beta_start >= 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "schedule needs 0 <= beta_start <= beta_end < 1, got beta_start=" + std::to_string(beta_start) +
                " beta_end=" + std::to_string(beta_end));
    NoiseSchedule s;
    s.T = T;
    s.alphas.resize(static_cast<std::size_t>(T));
    s.alpha_bars.resize(static_cast<std::size_t>(T) + 1);
    s.alpha_bars[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        s.alphas[static_cast<std::size_t>(t - 1)] = 1.0 - beta;
        s.alpha_bars[static_cast<std::size_t>(t)] = s.alpha_bars[static_cast<std::size_t>(t - 1)] * (1.0 - beta);
    }
    validate_schedule(s);
    return s;
}

void validate_schedule(const NoiseSchedule& s) {
    require(s.T >= 1, "schedule has no steps");
    require(s.alphas.size() == static_cast<std::size_t>(s.T) && s.alpha_bars.size() == static_cast<std::size_t>(s.T) + 1,
            "schedule arrays have inconsistent lengths");
    require(s.alpha_bars[0] == 1.0, "alpha_bar_0 must be 1");
    for (int t = 1; t <= s.T; ++t) {
        const double a = s.alpha(t);
        require(a > 0.0 && a <= 1.0, "alpha_" + std::to_string(t) + " outside (0, 1]");
        require(s.alpha_bar(t) <= s.alpha_bar(t - 1), "alpha_bar is not nonincreasing at t=" + std::to_string(t));
        require(std::abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * a) <= 1e-12,
                "alpha_bar_t != alpha_bar_{t-1} * alpha_t at t=" + std::to_string(t));
        require(a - s.alpha_bar(t) >= -1e-15, "alpha_t < alpha_bar_t at t=" + std::to_string(t));
    }
}

Tensor ddim_sample_step(const Tensor& z_t, const Tensor& eps, int t, const NoiseSchedule& sched) {
    check_step(t, sched);
    check_pair(z_t, eps);
    const double sa = std::sqrt(sched.alpha(t));
    const double c_eps = std::sqrt(1.0 - sched.alpha_bar(t - 1)) - std::sqrt(1.0 - sched.alpha_bar(t)) / sa;
    Tensor out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = z_t[i] / sa + c_eps * eps[i];
    return out;
}

Tensor ddim_invert_step(const Tensor& z_prev, const Tensor& eps, int t, const NoiseSchedule& sched) {
    check_step(t, sched);
    check_pair(z_prev, eps);
    const double sa = std::sqrt(sched.alpha(t));
    const double s_prev = std::sqrt(1.0 - sched.alpha_bar(t - 1));
    const double s_cur = std::sqrt(1.0 - sched.alpha_bar(t));
    Tensor out(z_prev.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sa * (z_prev[i] - s_prev * eps[i]) + s_cur * eps[i];
    return out;
}

Tensor ddim_jump(const Tensor& z_t, const Tensor& eps, int t, int t_prev, const NoiseSchedule& sched, double x0_clip) {
    check_step(t, sched);
    require(t_prev >= 0 && t_prev < t, "ddim_jump needs 0 <= t_prev < t");
    check_pair(z_t, eps);
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    const double sab = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
    const double sab_prev = std::sqrt(ab_prev), s1_prev = std::sqrt(1.0 - ab_prev);
    Tensor out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x0 = (z_t[i] - s1 * eps[i]) / sab;
        double e = eps[i];
        if (x0_clip > 0.0 && std::abs(x0) > x0_clip) {
            x0 = std::clamp(x0, -x0_clip, x0_clip);
            if (s1 > 0.0) e = (z_t[i] - sab * x0) / s1;
        }
        out[i] = sab_prev * x0 + s1_prev * e;
    }
    return out;
}

void validate_trajectory(const TrajectoryRecord& rec) {
    const auto t = static_cast<std::size_t>(rec.t_steps);
    require(rec.t_steps >= 1, "trajectory has no steps");
    require(rec.inv_latents.size() == t + 1 && rec.rec_latents.size() == t + 1 && rec.inv_noise.size() == t &&
                rec.rec_noise.size() == t,
            "trajectory sequence lengths inconsistent with t_steps=" + std::to_string(rec.t_steps));
    const Tensor& shape_ref = rec.inv_latents.front();
    for (std::size_t i = 0; i < t; ++i) {
        require(rec.inv_noise[i].same_shape(shape_ref) && rec.rec_noise[i].same_shape(shape_ref),
                "trajectory noise shape mismatch at step " + std::to_string(i + 1));
    }
}

TrajectoryRecord run_inversion_reconstruction(const Tensor& z0, int t_steps, const NoiseFn& eps_fn, const Tensor* cond,
                                              const NoiseSchedule& sched) {
    require(t_steps >= 1 && t_steps <= sched.T,
            "t_steps " + std::to_string(t_steps) + " outside [1, " + std::to_string(sched.T) + "]");
    TrajectoryRecord rec;
    rec.t_steps = t_steps;
    rec.inv_latents.reserve(static_cast<std::size_t>(t_steps) + 1);
    rec.inv_latents.push_back(z0);
    for (int i = 1; i <= t_steps; ++i) {
        Tensor eps = eps_fn(rec.inv_latents.back(), i, cond);
        check_pair(z0, eps);
        rec.inv_latents.push_back(ddim_invert_step(rec.inv_latents.back(), eps, i, sched));
        rec.inv_noise.push_back(std::move(eps));
    }
    rec.rec_noise.resize(static_cast<std::size_t>(t_steps));
    rec.rec_latents.push_back(rec.inv_latents.back());
    for (int i = t_steps; i >= 1; --i) {
        Tensor eps = eps_fn(rec.rec_latents.back(), i, cond);
        check_pair(z0, eps);
        rec.rec_latents.push_back(ddim_sample_step(rec.rec_latents.back(), eps, i, sched));
        rec.rec_noise[static_cast<std::size_t>(i - 1)] = std::move(eps);
    }
    return rec;
}

Tensor theoretical_residual_recursive(const TrajectoryRecord& rec, const NoiseSchedule& sched) {
    validate_trajectory(rec);
    require(rec.t_steps <= sched.T, "trajectory longer than schedule");
    Tensor delta(rec.inv_latents.front().shape(), 0.0);
    for (int i = rec.t_steps; i >= 1; --i) {
        const double c = residual_coefficient(i, sched);
        const double sa = std::sqrt(sched.alpha(i));
        const Tensor& er = rec.rec_noise[static_cast<std::size_t>(i - 1)];
        const Tensor& ei = rec.inv_noise[static_cast<std::size_t>(i - 1)];
        for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = (delta[k] + c * (er[k] - ei[k])) / sa;
    }
    return delta;
}

Tensor theoretical_residual_closed_form(const TrajectoryRecord& rec, const NoiseSchedule& sched) {
    validate_trajectory(rec);
    require(rec.t_steps <= sched.T, "trajectory longer than schedule");
    Tensor delta(rec.inv_latents.front().shape(), 0.0);
    for (int i = 1; i <= rec.t_steps; ++i) {
        const double w = residual_coefficient(i, sched) / std::sqrt(sched.alpha_bar(i));
        const Tensor& er = rec.rec_noise[static_cast<std::size_t>(i - 1)];
        const Tensor& ei = rec.inv_noise[static_cast<std::size_t>(i - 1)];
        for (std::size_t k = 0; k < delta.size(); ++k) delta[k] += w * (er[k] - ei[k]);
    }
    return delta;
}

}  // namespace r2bd
