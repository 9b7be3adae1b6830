#include "r2bd/nn.hpp"

#include <cmath>
#include <cstring>

#include "r2bd/error.hpp"

namespace r2bd::nn {

Var ParamSet::add(std::string name, Tensor init) {
    require(!contains(name), "duplicate parameter name " + name);
    Var v(std::move(init), true);
    entries_.emplace_back(std::move(name), v);
    return v;
}

const Var& ParamSet::get(const std::string& name) const {
    for (const auto& [n, v] : entries_)
        if (n == name) return v;
    throw ValidationError("unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.first == name) return true;
    return false;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.value().size();
    return n;
}

void ParamSet::zero_grad() {
    for (auto& e : entries_) e.second.node()->grad = Tensor();
}

void ParamSet::set_trainable(bool trainable) {
    for (auto& e : entries_) e.second.node()->requires_grad = trainable;
}

FrozenScope::FrozenScope(const ParamSet& params) {
    saved_.reserve(params.entries().size());
    for (const auto& e : params.entries()) {
        saved_.emplace_back(e.second, e.second.requires_grad());
        e.second.node()->requires_grad = false;
    }
}

FrozenScope::~FrozenScope() {
    for (auto& [var, flag] : saved_) var.node()->requires_grad = flag;
}

std::vector<Tensor> ParamSet::values() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.second.value());
    return out;
}

void ParamSet::assign(const std::vector<Tensor>& values) {
    require(values.size() == entries_.size(), "parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
        require(values[i].same_shape(entries_[i].second.value()), "parameter shape mismatch for " + entries_[i].first);
        entries_[i].second.node()->value = values[i];
    }
}

void ParamSet::copy_values_from(const ParamSet& other) {
    require(other.entries_.size() == entries_.size(), "parameter set size mismatch");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        require(entries_[i].first == other.entries_[i].first, "parameter name mismatch: " + entries_[i].first);
    }
    assign(other.values());
}

bool ParamSet::bitwise_equal(const ParamSet& other) const {
    if (other.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const Tensor& a = entries_[i].second.value();
        const Tensor& b = other.entries_[i].second.value();
        if (!a.same_shape(b) || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

bool ParamSet::all_finite() const {
    for (const auto& e : entries_)
        if (!e.second.value().all_finite()) return false;
    return true;
}

std::vector<double> ParamSet::flat_values() const {
    std::vector<double> out;
    for (const auto& e : entries_) out.insert(out.end(), e.second.value().storage().begin(), e.second.value().storage().end());
    return out;
}

std::vector<double> ParamSet::flat_grads() const {
    std::vector<double> out;
    for (const auto& e : entries_) {
        const Tensor g = e.second.grad();
        out.insert(out.end(), g.storage().begin(), g.storage().end());
    }
    return out;
}

void ParamSet::set_flat_values(const std::vector<double>& flat) {
    require(flat.size() == scalar_count(), "flat parameter vector size mismatch");
    std::size_t off = 0;
    for (auto& e : entries_) {
        auto& dst = e.second.node()->value.storage();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
        off += dst.size();
    }
}

Tensor init_weight(const Shape& shape, int fan_in, Rng* rng, double gain) {
    if (!rng) return Tensor(shape);
    const double bound = gain / std::sqrt(static_cast<double>(fan_in));
    return rng->uniform_tensor(shape, -bound, bound);
}

Conv2d make_conv(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, int pad, Rng* rng,
                 double gain) {
    Conv2d c;
    c.weight = ps.add(name + ".weight", init_weight(Shape{out, in, kernel, kernel}, in * kernel * kernel, rng, gain));
    c.bias = ps.add(name + ".bias", Tensor(Shape{out}));
    c.geometry = {stride, pad};
    return c;
}

Linear make_linear(ParamSet& ps, const std::string& name, int in, int out, Rng* rng, double gain) {
    Linear l;
    l.weight = ps.add(name + ".weight", init_weight(Shape{out, in}, in, rng, gain));
    l.bias = ps.add(name + ".bias", Tensor(Shape{out}));
    return l;
}

Adam::Adam(const ParamSet& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& e : params.entries()) {
        m_.emplace_back(e.second.value().shape());
        v_.emplace_back(e.second.value().shape());
    }
}

void Adam::step(ParamSet& params) {
    require(params.entries().size() == m_.size(), "optimizer bound to a different parameter set");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
        auto& node = *params.entries()[i].second.node();
        if (node.grad.empty()) continue;
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double g = node.grad[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            node.value[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.epsilon);
        }
        node.grad = Tensor();
    }
}

}  // namespace r2bd::nn
