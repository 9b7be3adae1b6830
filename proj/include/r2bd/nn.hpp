#pragma once

#include <string>
#include <utility>
#include <vector>

#include "r2bd/autograd.hpp"
#include "r2bd/rng.hpp"

namespace r2bd::nn {

using ag::Var;

/// Ordered collection of named trainable tensors. Names are unique and stable; they are the keys
/// used by checkpoints.
class ParamSet {
public:
    /// Registers a trainable parameter initialised to `init`.
    Var add(std::string name, Tensor init);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
    std::size_t scalar_count() const;

    void zero_grad();
    /// Toggles `requires_grad` on every parameter. Frozen parameters receive no gradient.
    void set_trainable(bool trainable);

    /// Deep copies of every parameter value, in registration order.
    std::vector<Tensor> values() const;
    void assign(const std::vector<Tensor>& values);
    /// Copies values from a set with identical names and shapes.
    void copy_values_from(const ParamSet& other);
    bool bitwise_equal(const ParamSet& other) const;
    bool all_finite() const;

    /// Flattened view helpers for finite-difference checks.
    std::vector<double> flat_values() const;
    std::vector<double> flat_grads() const;
    void set_flat_values(const std::vector<double>& flat);

private:
    std::vector<std::pair<std::string, Var>> entries_;
};

/// Marks every parameter of a set as not requiring gradients for the scope's lifetime, restoring
/// the previous flags afterwards. Parameter values are untouched.
class FrozenScope {
public:
    explicit FrozenScope(const ParamSet& params);
    ~FrozenScope();
    FrozenScope(const FrozenScope&) = delete;
    FrozenScope& operator=(const FrozenScope&) = delete;

private:
    std::vector<std::pair<Var, bool>> saved_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; zero when `rng` is null.
Tensor init_weight(const Shape& shape, int fan_in, Rng* rng, double gain = 1.0);

struct Conv2d {
    Var weight;
    Var bias;
    kernels::ConvGeometry geometry;

    Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, geometry); }
};

struct Linear {
    Var weight;
    Var bias;

    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
};

Conv2d make_conv(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, int pad, Rng* rng,
                 double gain = 1.0);
Linear make_linear(ParamSet& ps, const std::string& name, int in, int out, Rng* rng, double gain = 1.0);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adaptive-moment optimizer bound to one parameter set.
class Adam {
public:
    Adam(const ParamSet& params, AdamConfig cfg);
    /// Applies one update from the accumulated gradients, then clears them.
    void step(ParamSet& params);
    long steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

}  // namespace r2bd::nn
