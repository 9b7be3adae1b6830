#include "r2bd/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "r2bd/error.hpp"

namespace r2bd::ag {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            for (auto& v : inputs) node->parents.push_back(v.node());
            node->backward = std::move(bw);
        }
    }
    return Var(std::move(node));
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }
inline bool wants(Node& self, std::size_t i) { return self.parents[i] && self.parents[i]->requires_grad; }

double stable_sigmoid(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

template <typename F, typename G>
Var unary(const Var& x, F f, G dfdx_from_x_y) {
    Tensor y = x.value();
    for (double& v : y.storage()) v = f(v);
    return make_op(std::move(y), {x}, [dfdx_from_x_y](Node& self) {
        Node& px = parent(self, 0);
        Tensor g(px.value.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * dfdx_from_x_y(px.value[i], self.value[i]);
        px.accumulate(g);
    });
}

void check_same(const Var& a, const Var& b, const char* op) {
    require(a.value().same_shape(b.value()), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                                 " vs " + shape_string(b.shape()));
}

}  // namespace

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
    } else {
        grad += g;
    }
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
    if (node_->grad.empty()) return Tensor(node_->value.shape());
    return node_->grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root, const Tensor* seed) {
    require(root.defined(), "backward on undefined Var");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    Node& r = *root.node();
    if (seed) {
        require(seed->same_shape(r.value), "backward seed shape mismatch");
        r.accumulate(*seed);
    } else {
        require(r.value.size() == 1, "backward without seed requires a scalar root");
        r.accumulate(Tensor(r.value.shape(), 1.0));
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---- convolution / linear -----------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& bias, kernels::ConvGeometry g) {
    Tensor y = kernels::conv2d_forward(x.value(), w.value(), bias.defined() ? bias.value() : Tensor(), g);
    std::vector<Var> in{x, w};
    if (bias.defined()) in.push_back(bias);
    return make_op(std::move(y), std::move(in), [g](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        if (wants(self, 0)) px.accumulate(kernels::conv2d_backward_input(self.grad, pw.value, px.value.shape(), g));
        if (wants(self, 1)) pw.accumulate(kernels::conv2d_backward_weight(self.grad, px.value, pw.value.dim(2), g));
        if (self.parents.size() > 2 && wants(self, 2)) parent(self, 2).accumulate(kernels::conv2d_backward_bias(self.grad));
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    require(x.value().ndim() == 2 && w.value().ndim() == 2 && x.dim(1) == w.dim(1),
            "linear: expected x (N, F) and w (O, F), got " + shape_string(x.shape()) + " and " + shape_string(w.shape()));
    const int n = x.dim(0), f = x.dim(1), o = w.dim(0);
    Tensor y(Shape{n, o});
    kernels::gemm(false, true, n, o, f, x.value().data(), w.value().data(), y.data());
    if (bias.defined()) {
        require(static_cast<int>(bias.value().size()) == o, "linear: bias size mismatch");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < o; ++j) y[static_cast<std::size_t>(i) * o + j] += bias.value()[static_cast<std::size_t>(j)];
    }
    std::vector<Var> in{x, w};
    if (bias.defined()) in.push_back(bias);
    return make_op(std::move(y), std::move(in), [n, f, o](Node& self) {
        Node& px = parent(self, 0);
        Node& pw = parent(self, 1);
        if (wants(self, 0)) {
            Tensor dx(px.value.shape());
            kernels::gemm(false, false, n, f, o, self.grad.data(), pw.value.data(), dx.data());
            px.accumulate(dx);
        }
        if (wants(self, 1)) {
            Tensor dw(pw.value.shape());
            kernels::gemm(true, false, o, f, n, self.grad.data(), px.value.data(), dw.data());
            pw.accumulate(dw);
        }
        if (self.parents.size() > 2 && wants(self, 2)) {
            Tensor db(Shape{o});
            for (int j = 0; j < o; ++j) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += self.grad[static_cast<std::size_t>(i) * o + j];
                db[static_cast<std::size_t>(j)] = acc;
            }
            parent(self, 2).accumulate(db);
        }
    });
}

// ---- elementwise --------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
        if (wants(self, 0)) parent(self, 0).accumulate(self.grad);
        if (wants(self, 1)) parent(self, 1).accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
        if (wants(self, 0)) parent(self, 0).accumulate(self.grad);
        if (wants(self, 1)) parent(self, 1).accumulate(self.grad * -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
    return make_op(std::move(y), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (wants(self, 0)) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pb.value[i];
            pa.accumulate(g);
        }
        if (wants(self, 1)) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= pa.value[i];
            pb.accumulate(g);
        }
    });
}

Var scale(const Var& a, double s) {
    return make_op(a.value() * s, {a}, [s](Node& self) { parent(self, 0).accumulate(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
    Tensor y = a.value();
    for (double& v : y.storage()) v += s;
    return make_op(std::move(y), {a}, [](Node& self) { parent(self, 0).accumulate(self.grad); });
}

Var mul_const(const Var& a, const Tensor& c) {
    require(a.value().same_shape(c), "mul_const: shape mismatch");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
    return make_op(std::move(y), {a}, [c](Node& self) {
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c[i];
        parent(self, 0).accumulate(g);
    });
}

Var add_channel_bias(const Var& x, const Var& v) {
    require(x.value().ndim() == 4 && v.value().ndim() == 2 && x.dim(0) == v.dim(0) && x.dim(1) == v.dim(1),
            "add_channel_bias: expected (N, C, H, W) and (N, C)");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y = x.value();
    for (int i = 0; i < n * c; ++i) {
        const double b = v.value()[static_cast<std::size_t>(i)];
        double* p = y.data() + static_cast<std::size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) p[j] += b;
    }
    return make_op(std::move(y), {x, v}, [n, c, hw](Node& self) {
        if (wants(self, 0)) parent(self, 0).accumulate(self.grad);
        if (wants(self, 1)) {
            Tensor g(Shape{n, c});
            for (int i = 0; i < n * c; ++i) {
                const double* p = self.grad.data() + static_cast<std::size_t>(i) * hw;
                double acc = 0.0;
                for (int j = 0; j < hw; ++j) acc += p[j];
                g[static_cast<std::size_t>(i)] = acc;
            }
            parent(self, 1).accumulate(g);
        }
    });
}

Var silu(const Var& x) {
    return unary(
        x, [](double v) { return v * stable_sigmoid(v); },
        [](double v, double) {
            const double s = stable_sigmoid(v);
            return s * (1.0 + v * (1.0 - s));
        });
}

Var tanh(const Var& x) {
    return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& x) {
    return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
    return unary(x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Var exp(const Var& x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(const Var& x) {
    return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var rsqrt(const Var& x) {
    for (double v : x.value().values()) require(v > 0.0, "rsqrt needs positive inputs");
    return unary(x, [](double v) { return 1.0 / std::sqrt(v); }, [](double v, double y) { return -0.5 * y / v; });
}

Var log_sigmoid(const Var& x) {
    return unary(
        x, [](double v) { return -stable_softplus(-v); }, [](double v, double) { return stable_sigmoid(-v); });
}

// ---- shape ops ----------------------------------------------------------------------------

Var upsample2x(const Var& x) {
    require(x.value().ndim() == 4, "upsample2x expects (N, C, H, W)");
    const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (int i = 0; i < nc; ++i) {
        const double* in = x.value().data() + static_cast<std::size_t>(i) * h * w;
        double* out = y.data() + static_cast<std::size_t>(i) * 4 * h * w;
        for (int r = 0; r < 2 * h; ++r)
            for (int c = 0; c < 2 * w; ++c) out[r * 2 * w + c] = in[(r / 2) * w + c / 2];
    }
    return make_op(std::move(y), {x}, [nc, h, w](Node& self) {
        Node& px = parent(self, 0);
        Tensor g(px.value.shape());
        for (int i = 0; i < nc; ++i) {
            const double* go = self.grad.data() + static_cast<std::size_t>(i) * 4 * h * w;
            double* gi = g.data() + static_cast<std::size_t>(i) * h * w;
            for (int r = 0; r < 2 * h; ++r)
                for (int c = 0; c < 2 * w; ++c) gi[(r / 2) * w + c / 2] += go[r * 2 * w + c];
        }
        px.accumulate(g);
    });
}

namespace {

// Views a tensor with ndim >= 2 as (outer=N, channels, inner).
struct AxisView {
    int outer, channels;
    std::size_t inner;
};

AxisView axis1(const Tensor& t) {
    require(t.ndim() >= 2, "axis-1 operation needs rank >= 2");
    std::size_t inner = 1;
    for (int i = 2; i < t.ndim(); ++i) inner *= static_cast<std::size_t>(t.dim(i));
    return {t.dim(0), t.dim(1), inner};
}

}  // namespace

Var concat_channels(const Var& a, const Var& b) {
    const AxisView va = axis1(a.value()), vb = axis1(b.value());
    require(va.outer == vb.outer && va.inner == vb.inner, "concat_channels: incompatible shapes " +
                                                              shape_string(a.shape()) + " and " + shape_string(b.shape()));
    Shape s = a.shape();
    s[1] = va.channels + vb.channels;
    Tensor y(s);
    const std::size_t ca = va.channels * va.inner, cb = vb.channels * vb.inner;
    for (int n = 0; n < va.outer; ++n) {
        std::copy_n(a.value().data() + n * ca, ca, y.data() + n * (ca + cb));
        std::copy_n(b.value().data() + n * cb, cb, y.data() + n * (ca + cb) + ca);
    }
    return make_op(std::move(y), {a, b}, [ca, cb, outer = va.outer](Node& self) {
        if (wants(self, 0)) {
            Tensor g(parent(self, 0).value.shape());
            for (int n = 0; n < outer; ++n) std::copy_n(self.grad.data() + n * (ca + cb), ca, g.data() + n * ca);
            parent(self, 0).accumulate(g);
        }
        if (wants(self, 1)) {
            Tensor g(parent(self, 1).value.shape());
            for (int n = 0; n < outer; ++n) std::copy_n(self.grad.data() + n * (ca + cb) + ca, cb, g.data() + n * cb);
            parent(self, 1).accumulate(g);
        }
    });
}

Var slice_channels(const Var& x, int start, int count) {
    const AxisView v = axis1(x.value());
    require(start >= 0 && count > 0 && start + count <= v.channels, "slice_channels out of range");
    Shape s = x.shape();
    s[1] = count;
    Tensor y(s);
    const std::size_t full = v.channels * v.inner, part = count * v.inner, off = start * v.inner;
    for (int n = 0; n < v.outer; ++n) std::copy_n(x.value().data() + n * full + off, part, y.data() + n * part);
    return make_op(std::move(y), {x}, [full, part, off, outer = v.outer](Node& self) {
        Tensor g(parent(self, 0).value.shape());
        for (int n = 0; n < outer; ++n) std::copy_n(self.grad.data() + n * part, part, g.data() + n * full + off);
        parent(self, 0).accumulate(g);
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    return make_op(std::move(y), {x}, [](Node& self) {
        Node& px = parent(self, 0);
        px.accumulate(self.grad.reshaped(px.value.shape()));
    });
}

// ---- reductions ---------------------------------------------------------------------------

Var sum(const Var& x) {
    return make_op(Tensor::scalar(x.value().sum()), {x}, [](Node& self) {
        Node& px = parent(self, 0);
        px.accumulate(Tensor(px.value.shape(), self.grad[0]));
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(x.value().size());
    return make_op(Tensor::scalar(x.value().sum() / n), {x}, [n](Node& self) {
        Node& px = parent(self, 0);
        px.accumulate(Tensor(px.value.shape(), self.grad[0] / n));
    });
}

Var global_avg_pool(const Var& x) {
    require(x.value().ndim() == 4, "global_avg_pool expects (N, C, H, W)");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y(Shape{n, c});
    for (int i = 0; i < n * c; ++i) {
        const double* p = x.value().data() + static_cast<std::size_t>(i) * hw;
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += p[j];
        y[static_cast<std::size_t>(i)] = acc / hw;
    }
    return make_op(std::move(y), {x}, [n, c, hw](Node& self) {
        Node& px = parent(self, 0);
        Tensor g(px.value.shape());
        for (int i = 0; i < n * c; ++i) {
            const double v = self.grad[static_cast<std::size_t>(i)] / hw;
            std::fill_n(g.data() + static_cast<std::size_t>(i) * hw, hw, v);
        }
        px.accumulate(g);
    });
}

// ---- attention building blocks ------------------------------------------------------------

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    Tensor y = kernels::bmm(a.value(), b.value(), trans_a, trans_b);
    return make_op(std::move(y), {a, b}, [trans_a, trans_b](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        const Tensor& dc = self.grad;
        if (wants(self, 0)) {
            if (!trans_a && !trans_b) pa.accumulate(kernels::bmm(dc, pb.value, false, true));
            if (!trans_a && trans_b) pa.accumulate(kernels::bmm(dc, pb.value, false, false));
            if (trans_a && !trans_b) pa.accumulate(kernels::bmm(pb.value, dc, false, true));
            if (trans_a && trans_b) pa.accumulate(kernels::bmm(pb.value, dc, true, true));
        }
        if (wants(self, 1)) {
            if (!trans_a && !trans_b) pb.accumulate(kernels::bmm(pa.value, dc, true, false));
            if (!trans_a && trans_b) pb.accumulate(kernels::bmm(dc, pa.value, true, false));
            if (trans_a && !trans_b) pb.accumulate(kernels::bmm(pa.value, dc, false, false));
            if (trans_a && trans_b) pb.accumulate(kernels::bmm(dc, pa.value, true, true));
        }
    });
}

Var softmax_last(const Var& x) {
    require(x.value().ndim() >= 1, "softmax_last on rank-0 tensor");
    const int last = x.dim(x.value().ndim() - 1);
    const std::size_t rows = x.value().size() / static_cast<std::size_t>(last);
    Tensor y = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = y.data() + r * last;
        const double m = *std::max_element(p, p + last);
        double z = 0.0;
        for (int j = 0; j < last; ++j) z += (p[j] = std::exp(p[j] - m));
        for (int j = 0; j < last; ++j) p[j] /= z;
    }
    return make_op(std::move(y), {x}, [rows, last](Node& self) {
        Tensor g(self.value.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yv = self.value.data() + r * last;
            const double* gy = self.grad.data() + r * last;
            double dot = 0.0;
            for (int j = 0; j < last; ++j) dot += gy[j] * yv[j];
            double* gx = g.data() + r * last;
            for (int j = 0; j < last; ++j) gx[j] = yv[j] * (gy[j] - dot);
        }
        parent(self, 0).accumulate(g);
    });
}

namespace {

// (N, A, B) -> (N, B, A)
Tensor swap_last2(const Tensor& t, int n, int a, int b) {
    Tensor out(Shape{n, b, a});
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < a; ++p)
            for (int q = 0; q < b; ++q)
                out[(static_cast<std::size_t>(i) * b + q) * a + p] = t[(static_cast<std::size_t>(i) * a + p) * b + q];
    return out;
}

}  // namespace

Var to_tokens(const Var& x) {
    require(x.value().ndim() == 4, "to_tokens expects (N, C, H, W)");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor y = swap_last2(x.value(), n, c, hw);
    return make_op(std::move(y), {x}, [n, c, hw](Node& self) {
        Node& px = parent(self, 0);
        px.accumulate(swap_last2(self.grad, n, hw, c).reshaped(px.value.shape()));
    });
}

Var from_tokens(const Var& t, int h, int w) {
    require(t.value().ndim() == 3 && t.dim(1) == h * w, "from_tokens: token count does not match H*W");
    const int n = t.dim(0), c = t.dim(2), hw = h * w;
    Tensor y = swap_last2(t.value(), n, hw, c).reshaped(Shape{n, c, h, w});
    return make_op(std::move(y), {t}, [n, c, hw](Node& self) {
        parent(self, 0).accumulate(swap_last2(self.grad, n, c, hw));
    });
}

Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

}  // namespace r2bd::ag
