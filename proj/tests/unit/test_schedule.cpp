#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_dec_float.hpp>
#include <cmath>

#include "r2bd/error.hpp"
#include "r2bd/rng.hpp"
#include "r2bd/schedule.hpp"

using namespace r2bd;
using big = boost::multiprecision::cpp_dec_float_50;

namespace {

const NoiseSchedule& default_schedule() {
    static const NoiseSchedule s = build_linear_schedule(1000, 0.00085, 0.012);
    return s;
}

// eps(z, t) = w_t * tanh(z) + b_t, elementwise; w_t, b_t fixed per step.
struct TanhPredictor {
    std::vector<double> w, b;

    explicit TanhPredictor(std::uint64_t seed, int T = 1000) {
        Rng rng(seed);
        for (int t = 0; t <= T; ++t) {
            w.push_back(rng.uniform(-1.5, 1.5));
            b.push_back(rng.normal(0.0, 0.5));
        }
    }
    NoiseFn fn() const {
        return [this](const Tensor& z, int t, const Tensor*) {
            Tensor out(z.shape());
            for (std::size_t i = 0; i < z.size(); ++i) out[i] = w[t] * std::tanh(z[i]) + b[t];
            return out;
        };
    }
};

// The whole inversion + reconstruction in 50-digit arithmetic, one scalar latent coordinate.
struct BigTrajectory {
    big z0_rec;
    big delta0;
};

BigTrajectory big_trajectory(double z0, int t_steps, const TanhPredictor& p, int T, double beta_start, double beta_end) {
    std::vector<big> alpha(T + 1), abar(T + 1);
    abar[0] = 1;
    for (int t = 1; t <= T; ++t) {
        const big beta = big(beta_start) + (big(beta_end) - big(beta_start)) * (t - 1) / (T - 1);
        alpha[t] = 1 - beta;
        abar[t] = abar[t - 1] * alpha[t];
    }
    auto eps = [&](const big& z, int t) { return big(p.w[t]) * tanh(z) + big(p.b[t]); };
    std::vector<big> inv(t_steps + 1), inv_eps(t_steps + 1);
    inv[0] = big(z0);
    for (int t = 1; t <= t_steps; ++t) {
        inv_eps[t] = eps(inv[t - 1], t);
        inv[t] = sqrt(alpha[t]) * (inv[t - 1] - sqrt(1 - abar[t - 1]) * inv_eps[t]) + sqrt(1 - abar[t]) * inv_eps[t];
    }
    big z = inv[t_steps];
    big delta = 0;
    for (int t = t_steps; t >= 1; --t) {
        const big e = eps(z, t);
        const big c = sqrt(1 - abar[t]) - sqrt(alpha[t] - abar[t]);
        delta += c * (e - inv_eps[t]) / sqrt(abar[t]);
        z = z / sqrt(alpha[t]) + (sqrt(1 - abar[t - 1]) - sqrt(1 - abar[t]) / sqrt(alpha[t])) * e;
    }
    return {z, delta};
}

double max_abs_diff(const Tensor& a, const Tensor& b) { return (a - b).max_abs(); }

}  // namespace

TEST(Schedule, LinearBetaEndpointsAndProducts) {
    const NoiseSchedule& s = default_schedule();
    EXPECT_EQ(s.T, 1000);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_NEAR(s.alpha(1), 1.0 - 0.00085, 1e-16);
    EXPECT_NEAR(s.alpha(1000), 1.0 - 0.012, 1e-16);
    // Frozen from a 40-digit evaluation of the same schedule.
    EXPECT_NEAR(s.alpha_bar(2), 0.99828957082582582583, 1e-15);
    EXPECT_NEAR(s.alpha_bar(10), 0.99103412348366713926, 1e-15);
    EXPECT_NEAR(s.alpha_bar(500) / 0.16181214591340213261, 1.0, 1e-13);
    EXPECT_NEAR(s.alpha_bar(1000) / 0.0015789629305514416211, 1.0, 1e-12);
    EXPECT_NO_THROW(validate_schedule(s));
}

TEST(Schedule, AlphaBarMatchesHighPrecisionProduct) {
    const NoiseSchedule s = build_linear_schedule(300, 1e-4, 0.02);
    big abar = 1;
    for (int t = 1; t <= 300; ++t) {
        abar *= 1 - (big(1e-4) + (big(0.02) - big(1e-4)) * (t - 1) / 299);
        EXPECT_NEAR(s.alpha_bar(t) / abar.convert_to<double>(), 1.0, 1e-13) << "t=" << t;
    }
}

TEST(Schedule, InvariantsHoldForAssortedRanges) {
    for (auto [T, b0, b1] : {std::tuple{1, 0.01, 0.01}, std::tuple{2, 0.0, 0.5}, std::tuple{50, 1e-4, 0.02},
                             std::tuple{1000, 0.00085, 0.012}}) {
        const NoiseSchedule s = build_linear_schedule(T, b0, b1);
        ASSERT_NO_THROW(validate_schedule(s));
        for (int t = 1; t <= T; ++t) {
            EXPECT_GT(s.alpha(t), 0.0);
            EXPECT_LE(s.alpha(t), 1.0);
            EXPECT_LE(s.alpha_bar(t), s.alpha_bar(t - 1));
            EXPECT_GE(s.alpha(t) - s.alpha_bar(t), -1e-15);
        }
    }
}

TEST(Schedule, RejectsInvalidRanges) {
    EXPECT_THROW(build_linear_schedule(0, 0.001, 0.01), ValidationError);
    EXPECT_THROW(build_linear_schedule(10, 0.02, 0.01), ValidationError);
    EXPECT_THROW(build_linear_schedule(10, -0.1, 0.01), ValidationError);
    EXPECT_THROW(build_linear_schedule(10, 0.1, 1.0), ValidationError);
    NoiseSchedule broken = build_linear_schedule(5, 0.001, 0.01);
    broken.alpha_bars[3] *= 1.01;
    EXPECT_THROW(validate_schedule(broken), ValidationError);
}

TEST(Ddim, InvertThenSampleRoundTrip) {
    const NoiseSchedule& s = default_schedule();
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int t = rng.uniform_int(1, 1000);
        const Tensor z = rng.normal_tensor({4, 2, 2});
        const Tensor eps = rng.normal_tensor({4, 2, 2});
        const Tensor back = ddim_sample_step(ddim_invert_step(z, eps, t, s), eps, t, s);
        EXPECT_LE(max_abs_diff(back, z), 1e-10) << "t=" << t;
    }
}

TEST(Ddim, StepsMatchHighPrecisionFormulas) {
    const NoiseSchedule& s = default_schedule();
    for (int t : {1, 2, 37, 500, 1000}) {
        const Tensor z({1}, 0.7), eps({1}, -1.3);
        big abar = 1, a = 0;
        for (int i = 1; i <= t; ++i) {
            a = 1 - (big(0.00085) + (big(0.012) - big(0.00085)) * (i - 1) / 999);
            abar *= a;
        }
        const big abar_prev = abar / a;
        const big sampled = big(0.7) / sqrt(a) + (sqrt(1 - abar_prev) - sqrt(1 - abar) / sqrt(a)) * big(-1.3);
        const big inverted = sqrt(a) * (big(0.7) - sqrt(1 - abar_prev) * big(-1.3)) + sqrt(1 - abar) * big(-1.3);
        EXPECT_NEAR(ddim_sample_step(z, eps, t, s)[0], sampled.convert_to<double>(), 1e-13);
        EXPECT_NEAR(ddim_invert_step(z, eps, t, s)[0], inverted.convert_to<double>(), 1e-13);
    }
}

TEST(Ddim, SingleJumpEqualsSampleStep) {
    const NoiseSchedule& s = default_schedule();
    Rng rng(12);
    for (int t : {1, 5, 999}) {
        const Tensor z = rng.normal_tensor({3, 4});
        const Tensor e = rng.normal_tensor({3, 4});
        EXPECT_LE(max_abs_diff(ddim_jump(z, e, t, t - 1, s), ddim_sample_step(z, e, t, s)), 1e-12);
    }
}

TEST(Ddim, JumpToZeroRecoversCleanEstimate) {
    const NoiseSchedule& s = default_schedule();
    const Tensor z({2}, std::vector<double>{0.3, -0.4});
    const Tensor e({2}, std::vector<double>{1.0, 0.5});
    const int t = 400;
    const Tensor x0 = ddim_jump(z, e, t, 0, s);
    for (int i = 0; i < 2; ++i)
        EXPECT_NEAR(x0[i], (z[i] - std::sqrt(1 - s.alpha_bar(t)) * e[i]) / std::sqrt(s.alpha_bar(t)), 1e-13);
    const Tensor clipped = ddim_jump(z, Tensor({2}, 30.0), t, 0, s, 1.0);
    EXPECT_LE(clipped.max_abs(), 1.0 + 1e-12);
}

TEST(Ddim, StepsRejectOutOfRangeIndicesAndShapeMismatch) {
    const NoiseSchedule& s = default_schedule();
    const Tensor z({2}, 0.0);
    EXPECT_THROW(ddim_sample_step(z, z, 0, s), ValidationError);
    EXPECT_THROW(ddim_invert_step(z, z, 1001, s), ValidationError);
    EXPECT_THROW(ddim_sample_step(z, Tensor({3}, 0.0), 1, s), ValidationError);
}

TEST(TheoreticalResidual, ConstantPredictorGivesExactReconstruction) {
    const NoiseSchedule& s = default_schedule();
    Rng rng(13);
    const Tensor c = rng.normal_tensor({2, 3});
    const NoiseFn constant = [&](const Tensor&, int, const Tensor*) { return c; };
    for (int t : {1, 3, 10, 50}) {
        const Tensor z0 = rng.normal_tensor({2, 3});
        const TrajectoryRecord rec = run_inversion_reconstruction(z0, t, constant, nullptr, s);
        EXPECT_LE(max_abs_diff(rec.final_reconstruction(), z0), 1e-10);
        EXPECT_LE(theoretical_residual_closed_form(rec, s).max_abs(), 1e-10);
        EXPECT_LE(theoretical_residual_recursive(rec, s).max_abs(), 1e-10);
    }
}

TEST(TheoreticalResidual, ClosedFormAgreesWithRecurrence) {
    const NoiseSchedule& s = default_schedule();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const TanhPredictor p(seed);
        Rng rng(seed + 100);
        const Tensor z0 = rng.normal_tensor({4, 2, 2});
        for (int t = 1; t <= 10; ++t) {
            const TrajectoryRecord rec = run_inversion_reconstruction(z0, t, p.fn(), nullptr, s);
            const Tensor closed = theoretical_residual_closed_form(rec, s);
            const Tensor rec_form = theoretical_residual_recursive(rec, s);
            EXPECT_LE(max_abs_diff(closed, rec_form), 1e-8 * std::max(1e-300, rec_form.max_abs()));
        }
    }
}

TEST(TheoreticalResidual, EqualsLatentInversionGap) {
    // delta_0 is exactly z_0^I - z_0^R: the recurrence tracks the gap between the two trajectories.
    const NoiseSchedule& s = default_schedule();
    const TanhPredictor p(7);
    Rng rng(8);
    for (int t : {1, 2, 5, 10, 40}) {
        const Tensor z0 = rng.normal_tensor({3, 2, 2});
        const TrajectoryRecord rec = run_inversion_reconstruction(z0, t, p.fn(), nullptr, s);
        EXPECT_LE(max_abs_diff(theoretical_residual_closed_form(rec, s), z0 - rec.final_reconstruction()), 1e-10);
    }
}

TEST(TheoreticalResidual, MatchesHighPrecisionOracle) {
    const NoiseSchedule& s = default_schedule();
    const TanhPredictor p(21);
    for (double z : {-1.7, -0.2, 0.05, 0.9, 2.4}) {
        for (int t : {1, 2, 5, 10}) {
            const TrajectoryRecord rec = run_inversion_reconstruction(Tensor({1}, z), t, p.fn(), nullptr, s);
            const BigTrajectory oracle = big_trajectory(z, t, p, 1000, 0.00085, 0.012);
            EXPECT_NEAR(theoretical_residual_closed_form(rec, s)[0], oracle.delta0.convert_to<double>(), 1e-12);
            EXPECT_NEAR(rec.final_reconstruction()[0], oracle.z0_rec.convert_to<double>(), 1e-12);
        }
    }
}

TEST(TheoreticalResidual, SingleStepFormula) {
    // t = 1: delta_0 = c_1 (eps(z_1^R, 1) - eps(z_0, 1)) / sqrt(abar_1) with frozen c_1.
    const NoiseSchedule& s = default_schedule();
    const TanhPredictor p(3);
    const Tensor z0({2}, std::vector<double>{0.4, -0.8});
    const TrajectoryRecord rec = run_inversion_reconstruction(z0, 1, p.fn(), nullptr, s);
    const double c1 = 0.029154759474226502354;
    const Tensor d = theoretical_residual_closed_form(rec, s);
    for (int i = 0; i < 2; ++i)
        EXPECT_NEAR(d[i], c1 * (rec.rec_noise[0][i] - rec.inv_noise[0][i]) / std::sqrt(0.99915), 1e-15);
}

TEST(Trajectory, RecordIsCompleteAndValidated) {
    const NoiseSchedule& s = default_schedule();
    const TanhPredictor p(1);
    const TrajectoryRecord rec = run_inversion_reconstruction(Tensor({2, 2}, 0.1), 4, p.fn(), nullptr, s);
    EXPECT_EQ(rec.inv_latents.size(), 5u);
    EXPECT_EQ(rec.rec_latents.size(), 5u);
    EXPECT_EQ(rec.inv_noise.size(), 4u);
    EXPECT_EQ(rec.rec_noise.size(), 4u);
    EXPECT_EQ(rec.rec_latents.front().storage(), rec.inv_latents.back().storage());
    EXPECT_NO_THROW(validate_trajectory(rec));
    TrajectoryRecord broken = rec;
    broken.rec_noise.pop_back();
    EXPECT_THROW(validate_trajectory(broken), ValidationError);
    EXPECT_THROW(run_inversion_reconstruction(Tensor({2}, 0.0), 0, p.fn(), nullptr, s), ValidationError);
    EXPECT_THROW(run_inversion_reconstruction(Tensor({2}, 0.0), 1001, p.fn(), nullptr, s), ValidationError);
}
