#include "r2bd/kernels.hpp"

#include <algorithm>

#include "r2bd/error.hpp"

namespace r2bd::kernels {

int conv_out_size(int in, int kernel, ConvGeometry g) { return (in + 2 * g.pad - kernel) / g.stride + 1; }

namespace {

struct ConvDims {
    int n, ci, h, w, co, k, ho, wo;
};

ConvDims check_conv(const Shape& xs, const Shape& ws, ConvGeometry g) {
    require(xs.size() == 4, "conv2d input must be (N, C, H, W), got " + shape_string(xs));
    require(ws.size() == 4 && ws[2] == ws[3], "conv2d weight must be (Co, Ci, K, K), got " + shape_string(ws));
    require(xs[1] == ws[1], "conv2d channel mismatch: input " + shape_string(xs) + " weight " + shape_string(ws));
    require(g.stride >= 1 && g.pad >= 0, "conv2d stride must be >= 1 and pad >= 0");
    ConvDims d{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], 0, 0};
    d.ho = conv_out_size(d.h, d.k, g);
    d.wo = conv_out_size(d.w, d.k, g);
    require(d.ho > 0 && d.wo > 0, "conv2d output would be empty for input " + shape_string(xs));
    return d;
}

// Range of output indices o with 0 <= o*stride + offset < size.
inline void valid_range(int out, int size, int offset, int stride, int& lo, int& hi) {
    lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    hi = (size - 1 - offset) < 0 ? 0 : (size - 1 - offset) / stride + 1;
    hi = std::min(hi, out);
    if (lo > hi) lo = hi;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry g) {
    const ConvDims d = check_conv(x.shape(), w.shape(), g);
    require(bias.empty() || static_cast<int>(bias.size()) == d.co, "conv2d bias size mismatch");
    Tensor y(Shape{d.n, d.co, d.ho, d.wo});
    const double* xp = x.data();
    const double* wp = w.data();
    double* yp = y.data();
    const int s = g.stride;

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int co = 0; co < d.co; ++co) {
            double* out = yp + (static_cast<std::size_t>(n) * d.co + co) * d.ho * d.wo;
            const double b0 = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
            std::fill(out, out + d.ho * d.wo, b0);
            for (int ci = 0; ci < d.ci; ++ci) {
                const double* in = xp + (static_cast<std::size_t>(n) * d.ci + ci) * d.h * d.w;
                const double* wk = wp + (static_cast<std::size_t>(co) * d.ci + ci) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    int oy0, oy1;
                    valid_range(d.ho, d.h, ky - g.pad, s, oy0, oy1);
                    for (int kx = 0; kx < d.k; ++kx) {
                        const double wv = wk[ky * d.k + kx];
                        int ox0, ox1;
                        valid_range(d.wo, d.w, kx - g.pad, s, ox0, ox1);
                        for (int oy = oy0; oy < oy1; ++oy) {
                            const double* row = in + (oy * s + ky - g.pad) * d.w + (kx - g.pad);
                            double* orow = out + oy * d.wo;
                            if (s == 1) {
                                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * row[ox];
                            } else {
                                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * row[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const Shape& x_shape, ConvGeometry g) {
    const ConvDims d = check_conv(x_shape, w.shape(), g);
    require(dy.shape() == Shape({d.n, d.co, d.ho, d.wo}), "conv2d_backward_input: dy shape mismatch");
    Tensor dx(x_shape);
    const double* dyp = dy.data();
    const double* wp = w.data();
    double* dxp = dx.data();
    const int s = g.stride;

#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.n; ++n) {
        for (int ci = 0; ci < d.ci; ++ci) {
            double* gin = dxp + (static_cast<std::size_t>(n) * d.ci + ci) * d.h * d.w;
            for (int co = 0; co < d.co; ++co) {
                const double* gout = dyp + (static_cast<std::size_t>(n) * d.co + co) * d.ho * d.wo;
                const double* wk = wp + (static_cast<std::size_t>(co) * d.ci + ci) * d.k * d.k;
                for (int ky = 0; ky < d.k; ++ky) {
                    int oy0, oy1;
                    valid_range(d.ho, d.h, ky - g.pad, s, oy0, oy1);
                    for (int kx = 0; kx < d.k; ++kx) {
                        const double wv = wk[ky * d.k + kx];
                        int ox0, ox1;
                        valid_range(d.wo, d.w, kx - g.pad, s, ox0, ox1);
                        for (int oy = oy0; oy < oy1; ++oy) {
                            double* row = gin + (oy * s + ky - g.pad) * d.w + (kx - g.pad);
                            const double* grow = gout + oy * d.wo;
                            if (s == 1) {
                                for (int ox = ox0; ox < ox1; ++ox) row[ox] += wv * grow[ox];
                            } else {
                                for (int ox = ox0; ox < ox1; ++ox) row[ox * s] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    return dx;
}

Tensor conv2d_backward_weight(const Tensor& dy, const Tensor& x, int kernel, ConvGeometry g) {
    require(x.ndim() == 4 && dy.ndim() == 4, "conv2d_backward_weight expects 4-d tensors");
    const Shape ws{dy.dim(1), x.dim(1), kernel, kernel};
    const ConvDims d = check_conv(x.shape(), ws, g);
    require(dy.shape() == Shape({d.n, d.co, d.ho, d.wo}), "conv2d_backward_weight: dy shape mismatch");
    Tensor dw(ws);
    const double* dyp = dy.data();
    const double* xp = x.data();
    double* dwp = dw.data();
    const int s = g.stride;

#pragma omp parallel for collapse(2) schedule(static)
    for (int co = 0; co < d.co; ++co) {
        for (int ci = 0; ci < d.ci; ++ci) {
            double* wk = dwp + (static_cast<std::size_t>(co) * d.ci + ci) * d.k * d.k;
            for (int ky = 0; ky < d.k; ++ky) {
                int oy0, oy1;
                valid_range(d.ho, d.h, ky - g.pad, s, oy0, oy1);
                for (int kx = 0; kx < d.k; ++kx) {
                    int ox0, ox1;
                    valid_range(d.wo, d.w, kx - g.pad, s, ox0, ox1);
                    double acc = 0.0;
                    for (int n = 0; n < d.n; ++n) {
                        const double* gout = dyp + (static_cast<std::size_t>(n) * d.co + co) * d.ho * d.wo;
                        const double* in = xp + (static_cast<std::size_t>(n) * d.ci + ci) * d.h * d.w;
                        for (int oy = oy0; oy < oy1; ++oy) {
                            const double* row = in + (oy * s + ky - g.pad) * d.w + (kx - g.pad);
                            const double* grow = gout + oy * d.wo;
                            if (s == 1) {
                                for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * row[ox];
                            } else {
                                for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * row[ox * s];
                            }
                        }
                    }
                    wk[ky * d.k + kx] = acc;
                }
            }
        }
    }
    return dw;
}

Tensor conv2d_backward_bias(const Tensor& dy) {
    require(dy.ndim() == 4, "conv2d_backward_bias expects (N, C, H, W)");
    const int n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor db(Shape{c});
    for (int co = 0; co < c; ++co) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* p = dy.data() + (static_cast<std::size_t>(i) * c + co) * hw;
            for (int j = 0; j < hw; ++j) acc += p[j];
        }
        db[static_cast<std::size_t>(co)] = acc;
    }
    return db;
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, const double* b, double* c,
          bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, 0.0);
        if (!trans_b) {
            for (int p = 0; p < k; ++p) {
                const double av = trans_a ? a[static_cast<std::size_t>(p) * m + i] : a[static_cast<std::size_t>(i) * k + p];
                const double* brow = b + static_cast<std::size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (int j = 0; j < n; ++j) {
                const double* brow = b + static_cast<std::size_t>(j) * k;
                double acc = 0.0;
                if (trans_a) {
                    for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(p) * m + i] * brow[p];
                } else {
                    const double* arow = a + static_cast<std::size_t>(i) * k;
                    for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                }
                crow[j] += acc;
            }
        }
    }
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0), "bmm expects (B, M, K) and (B, K, N)");
    const int batch = a.dim(0);
    const int m = trans_a ? a.dim(2) : a.dim(1);
    const int k = trans_a ? a.dim(1) : a.dim(2);
    const int kb = trans_b ? b.dim(2) : b.dim(1);
    const int n = trans_b ? b.dim(1) : b.dim(2);
    require(k == kb, "bmm inner dimension mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    Tensor c(Shape{batch, m, n});
    for (int i = 0; i < batch; ++i) {
        gemm(trans_a, trans_b, m, n, k, a.data() + static_cast<std::size_t>(i) * m * k,
             b.data() + static_cast<std::size_t>(i) * k * n, c.data() + static_cast<std::size_t>(i) * m * n);
    }
    return c;
}

}  // namespace r2bd::kernels
