#include <cstddef>

#include "r2bd/error.hpp"
#include "r2bd/kernels.hpp"

namespace r2bd::kernels::reference {

namespace {

inline std::size_t idx4(const Shape& s, int a, int b, int c, int d) {
    return ((static_cast<std::size_t>(a) * s[1] + b) * s[2] + c) * s[3] + d;
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry g) {
    require(x.ndim() == 4 && w.ndim() == 4 && x.dim(1) == w.dim(1), "reference conv2d shape mismatch");
    const int k = w.dim(2);
    const int ho = conv_out_size(x.dim(2), k, g), wo = conv_out_size(x.dim(3), k, g);
    Tensor y(Shape{x.dim(0), w.dim(0), ho, wo});
    for (int n = 0; n < x.dim(0); ++n)
        for (int co = 0; co < w.dim(0); ++co)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < x.dim(1); ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad, ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || ix < 0 || iy >= x.dim(2) || ix >= x.dim(3)) continue;
                                acc += w[idx4(w.shape(), co, ci, ky, kx)] * x[idx4(x.shape(), n, ci, iy, ix)];
                            }
                    y[idx4(y.shape(), n, co, oy, ox)] = acc;
                }
    return y;
}

Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const Shape& x_shape, ConvGeometry g) {
    Tensor dx(x_shape);
    const int k = w.dim(2);
    for (int n = 0; n < dy.dim(0); ++n)
        for (int co = 0; co < dy.dim(1); ++co)
            for (int oy = 0; oy < dy.dim(2); ++oy)
                for (int ox = 0; ox < dy.dim(3); ++ox) {
                    const double gv = dy[idx4(dy.shape(), n, co, oy, ox)];
                    for (int ci = 0; ci < x_shape[1]; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad, ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || ix < 0 || iy >= x_shape[2] || ix >= x_shape[3]) continue;
                                dx[idx4(x_shape, n, ci, iy, ix)] += gv * w[idx4(w.shape(), co, ci, ky, kx)];
                            }
                }
    return dx;
}

Tensor conv2d_backward_weight(const Tensor& dy, const Tensor& x, int kernel, ConvGeometry g) {
    Tensor dw(Shape{dy.dim(1), x.dim(1), kernel, kernel});
    for (int n = 0; n < dy.dim(0); ++n)
        for (int co = 0; co < dy.dim(1); ++co)
            for (int oy = 0; oy < dy.dim(2); ++oy)
                for (int ox = 0; ox < dy.dim(3); ++ox) {
                    const double gv = dy[idx4(dy.shape(), n, co, oy, ox)];
                    for (int ci = 0; ci < x.dim(1); ++ci)
                        for (int ky = 0; ky < kernel; ++ky)
                            for (int kx = 0; kx < kernel; ++kx) {
                                const int iy = oy * g.stride + ky - g.pad, ix = ox * g.stride + kx - g.pad;
                                if (iy < 0 || ix < 0 || iy >= x.dim(2) || ix >= x.dim(3)) continue;
                                dw[idx4(dw.shape(), co, ci, ky, kx)] += gv * x[idx4(x.shape(), n, ci, iy, ix)];
                            }
                }
    return dw;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const int batch = a.dim(0);
    const int m = trans_a ? a.dim(2) : a.dim(1);
    const int k = trans_a ? a.dim(1) : a.dim(2);
    const int n = trans_b ? b.dim(1) : b.dim(2);
    Tensor c(Shape{batch, m, n});
    for (int bi = 0; bi < batch; ++bi)
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int p = 0; p < k; ++p) {
                    const double av = trans_a ? a[(static_cast<std::size_t>(bi) * k + p) * m + i]
                                              : a[(static_cast<std::size_t>(bi) * m + i) * k + p];
                    const double bv = trans_b ? b[(static_cast<std::size_t>(bi) * n + j) * k + p]
                                              : b[(static_cast<std::size_t>(bi) * k + p) * n + j];
                    acc += av * bv;
                }
                c[(static_cast<std::size_t>(bi) * m + i) * n + j] = acc;
            }
    return c;
}

}  // namespace r2bd::kernels::reference
