#include <gtest/gtest.h>

#include <cmath>

#include "fd_check.hpp"
#include "r2bd/autograd.hpp"
#include "r2bd/nn.hpp"

using namespace r2bd;
using ag::Var;

namespace {

using UnaryOp = std::function<Var(const Var&)>;

// d/dx sum(w * op(x)) against central differences.
double input_gradient_error(const UnaryOp& op, const Shape& shape, std::uint64_t seed = 1) {
    Rng rng(seed);
    const Tensor x0 = rng.normal_tensor(shape);
    Var x(x0, true);
    const Var y0 = op(x);
    const Tensor w = rng.normal_tensor(y0.shape());
    ag::backward(ag::sum(ag::mul_const(y0, w)));
    const Tensor g = x.grad();
    return r2bd::testing::max_relative_error(
        x0.storage(),
        [&](const std::vector<double>& v) {
            ag::NoGradGuard guard;
            return ag::sum(ag::mul_const(op(ag::constant(Tensor(shape, v))), w)).value()[0];
        },
        g.storage());
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
    const Shape s{2, 3, 4};
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::silu(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::tanh(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::sigmoid(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::softplus(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::exp(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::square(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::log_sigmoid(x); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::rsqrt(ag::add_scalar(ag::square(x), 0.5)); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::scale(ag::add_scalar(x, 0.3), -2.0); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::mul(x, ag::tanh(x)); }, s), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::sub(ag::exp(x), x); }, s), 1e-6);
}

TEST(Autograd, LogSigmoidStableForLargeInputs) {
    const Var y = ag::log_sigmoid(ag::constant(Tensor({3}, std::vector<double>{-800.0, 0.0, 800.0})));
    EXPECT_NEAR(y.value()[0], -800.0, 1e-9);
    EXPECT_NEAR(y.value()[1], -std::log(2.0), 1e-15);
    EXPECT_NEAR(y.value()[2], 0.0, 1e-15);
}

TEST(Autograd, ShapeOps) {
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::upsample2x(x); }, {2, 2, 3, 3}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::concat_channels(x, ag::scale(x, 2.0)); }, {2, 3, 2, 2}),
              1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::slice_channels(x, 1, 2); }, {2, 4, 2, 2}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::reshape(x, {4, 6}); }, {2, 3, 4}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::global_avg_pool(x); }, {2, 3, 4, 4}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::to_tokens(x); }, {2, 3, 2, 4}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::from_tokens(x, 2, 3); }, {2, 6, 4}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::softmax_last(x); }, {2, 3, 5}), 1e-6);
    EXPECT_LT(input_gradient_error([](const Var& x) { return ag::mean(ag::square(x)); }, {3, 4}), 1e-6);
}

TEST(Autograd, TokenRoundTripIsIdentity) {
    Rng rng(3);
    const Tensor x = rng.normal_tensor({2, 3, 4, 5});
    const Var t = ag::to_tokens(ag::constant(x));
    ASSERT_EQ(t.shape(), (Shape{2, 20, 3}));
    EXPECT_EQ(t.value()[1], x[20]);  // token 0, channel 1
    EXPECT_EQ(ag::from_tokens(t, 4, 5).value().storage(), x.storage());
}

TEST(Autograd, SoftmaxRowsSumToOne) {
    Rng rng(4);
    const Var y = ag::softmax_last(ag::constant(rng.normal_tensor({3, 7}, 30.0)));
    for (int r = 0; r < 3; ++r) {
        double s = 0.0;
        for (int c = 0; c < 7; ++c) s += y.value()[static_cast<std::size_t>(r * 7 + c)];
        EXPECT_NEAR(s, 1.0, 1e-14);
    }
}

TEST(Autograd, ConvLinearAndBmmGradients) {
    Rng rng(5);
    nn::ParamSet ps;
    const nn::Conv2d conv = nn::make_conv(ps, "conv", 2, 3, 3, 2, 1, &rng);
    const nn::Linear lin = nn::make_linear(ps, "lin", 12, 4, &rng);
    const Tensor x = rng.normal_tensor({2, 2, 4, 4});
    const Tensor w = rng.normal_tensor({2, 4, 3});
    auto loss = [&] {
        const Var h = ag::silu(conv(ag::constant(x)));           // (2, 3, 2, 2)
        const Var f = lin(ag::reshape(h, {2, 12}));               // (2, 4)
        const Var t = ag::to_tokens(h);                           // (2, 4, 3)
        const Var att = ag::bmm(t, t, false, true);               // (2, 4, 4)
        const Var mix = ag::bmm(ag::softmax_last(att), t);        // (2, 4, 3)
        return ag::add(ag::mean(ag::square(f)), ag::sum(ag::mul_const(mix, w)));
    };
    EXPECT_LT(r2bd::testing::param_gradient_error(ps, loss), 1e-6);
}

TEST(Autograd, ChannelBiasAndInputGradientOfConv) {
    Rng rng(6);
    const Tensor wv = rng.normal_tensor({3, 2, 3, 3});
    const Tensor v = rng.normal_tensor({2, 3});
    EXPECT_LT(input_gradient_error(
                  [&](const Var& x) {
                      return ag::add_channel_bias(ag::conv2d(x, ag::constant(wv), Var(), {1, 1}), ag::constant(v));
                  },
                  {2, 2, 5, 5}),
              1e-6);
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
    Var x(Tensor({1}, 3.0), true);
    ag::backward(ag::add(ag::mul(x, x), x));  // d/dx (x^2 + x) = 2x + 1
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
    Var x(Tensor({2}, 1.0), true);
    {
        ag::NoGradGuard g;
        EXPECT_FALSE(ag::grad_enabled());
        const Var y = ag::square(x);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_TRUE(ag::grad_enabled());
}

TEST(Autograd, FrozenScopeBlocksAndRestores) {
    Rng rng(7);
    nn::ParamSet ps;
    const nn::Linear lin = nn::make_linear(ps, "l", 3, 2, &rng);
    {
        nn::FrozenScope freeze(ps);
        const Var x(rng.normal_tensor({4, 3}), true);
        ag::backward(ag::sum(lin(x)));
        EXPECT_EQ(ps.flat_grads(), std::vector<double>(ps.scalar_count(), 0.0));
        EXPECT_NE(x.grad().max_abs(), 0.0);
    }
    ag::backward(ag::sum(lin(ag::constant(rng.normal_tensor({4, 3})))));
    EXPECT_NE(ps.get("l.weight").grad().max_abs(), 0.0);
}

TEST(Adam, FirstStepMovesEachParameterByLearningRate) {
    nn::ParamSet ps;
    const Var p = ps.add("p", Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
    nn::Adam opt(ps, {.learning_rate = 0.1});
    ag::backward(ag::sum(ag::mul_const(p, Tensor({3}, std::vector<double>{2.0, -3.0, 0.0}))));
    opt.step(ps);
    // Bias-corrected first step is -lr * sign(g) (up to epsilon); zero gradient leaves it in place.
    EXPECT_NEAR(p.value()[0], 0.9, 1e-7);
    EXPECT_NEAR(p.value()[1], -1.9, 1e-7);
    EXPECT_DOUBLE_EQ(p.value()[2], 0.5);
    EXPECT_EQ(ps.flat_grads(), std::vector<double>(3, 0.0));
}
