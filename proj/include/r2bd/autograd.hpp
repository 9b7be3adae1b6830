#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "r2bd/kernels.hpp"
#include "r2bd/tensor.hpp"

/// Minimal reverse-mode automatic differentiation over `Tensor`.
///
/// A `Var` is a handle to a graph node. Operations record a backward closure on their output node
/// whenever gradient recording is enabled and at least one input requires a gradient. Calling
/// `backward(root)` runs the closures in reverse topological order and accumulates into `grad` of
/// every node that requires one. Parameters are long-lived leaf nodes owned by a `ParamSet`.
namespace r2bd::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor& g);
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    /// Accumulated gradient; a zero tensor when nothing has been accumulated.
    Tensor grad() const;
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    void zero_grad() { node_->grad = Tensor(); }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }

/// Back-propagates from `root`. A scalar root is seeded with 1; otherwise `seed` must be given.
void backward(const Var& root, const Tensor* seed = nullptr);

bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- operations ---------------------------------------------------------------------------

/// `bias` may be an undefined Var.
Var conv2d(const Var& x, const Var& w, const Var& bias, kernels::ConvGeometry g);
/// x (N, F), w (O, F), bias (O) or undefined -> (N, O)
Var linear(const Var& x, const Var& w, const Var& bias);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Elementwise product with a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& c);
/// x (N, C, H, W) + v (N, C) broadcast over space.
Var add_channel_bias(const Var& x, const Var& v);

Var silu(const Var& x);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
Var square(const Var& x);
/// 1 / sqrt(x) for strictly positive x.
Var rsqrt(const Var& x);
/// Numerically stable log(sigmoid(x)).
Var log_sigmoid(const Var& x);

Var upsample2x(const Var& x);
/// Concatenates along axis 1; all other dimensions must agree.
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int start, int count);
Var reshape(const Var& x, Shape shape);

Var sum(const Var& x);
Var mean(const Var& x);
/// (N, C, H, W) -> (N, C)
Var global_avg_pool(const Var& x);

Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
/// Softmax over the last dimension.
Var softmax_last(const Var& x);
/// (N, C, H, W) -> (N, H*W, C)
Var to_tokens(const Var& x);
/// (N, H*W, C) -> (N, C, H, W)
Var from_tokens(const Var& t, int h, int w);

Var mse(const Var& a, const Var& b);

}  // namespace r2bd::ag
