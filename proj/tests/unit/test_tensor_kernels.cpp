#include <gtest/gtest.h>
#include <omp.h>

#include <cmath>
#include <cstring>

#include "r2bd/kernels.hpp"
#include "r2bd/rng.hpp"

using namespace r2bd;
namespace k = r2bd::kernels;

namespace {

// Direct transcription of the convolution sum, written independently of both kernels.
double conv_at(const Tensor& x, const Tensor& w, const Tensor& b, int n, int co, int oy, int ox, k::ConvGeometry g) {
    const int ci_n = x.dim(1), H = x.dim(2), W = x.dim(3), K = w.dim(2);
    double s = b.empty() ? 0.0 : b[static_cast<std::size_t>(co)];
    for (int ci = 0; ci < ci_n; ++ci)
        for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
                s += x[((static_cast<std::size_t>(n) * ci_n + ci) * H + iy) * W + ix] *
                     w[((static_cast<std::size_t>(co) * ci_n + ci) * K + ky) * K + kx];
            }
    return s;
}

double max_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool bitwise_same(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

struct Geo {
    int n, ci, co, size, kernel, stride, pad;
};

class ConvKernels : public ::testing::TestWithParam<Geo> {};

}  // namespace

TEST_P(ConvKernels, ForwardMatchesDirectSum) {
    const Geo p = GetParam();
    Rng rng(1);
    const Tensor x = rng.normal_tensor({p.n, p.ci, p.size, p.size});
    const Tensor w = rng.normal_tensor({p.co, p.ci, p.kernel, p.kernel});
    const Tensor b = rng.normal_tensor({p.co});
    const k::ConvGeometry g{p.stride, p.pad};
    const Tensor y = k::conv2d_forward(x, w, b, g);
    const int o = k::conv_out_size(p.size, p.kernel, g);
    ASSERT_EQ(y.shape(), (Shape{p.n, p.co, o, o}));
    for (int n = 0; n < p.n; ++n)
        for (int co = 0; co < p.co; ++co)
            for (int oy = 0; oy < o; ++oy)
                for (int ox = 0; ox < o; ++ox)
                    EXPECT_NEAR(y[((static_cast<std::size_t>(n) * p.co + co) * o + oy) * o + ox],
                                conv_at(x, w, b, n, co, oy, ox, g), 1e-12);
    EXPECT_LT(max_diff(y, k::reference::conv2d_forward(x, w, b, g)), 1e-12);
}

TEST_P(ConvKernels, BackwardKernelsMatchReference) {
    const Geo p = GetParam();
    Rng rng(2);
    const Tensor x = rng.normal_tensor({p.n, p.ci, p.size, p.size});
    const Tensor w = rng.normal_tensor({p.co, p.ci, p.kernel, p.kernel});
    const k::ConvGeometry g{p.stride, p.pad};
    const int o = k::conv_out_size(p.size, p.kernel, g);
    const Tensor dy = rng.normal_tensor({p.n, p.co, o, o});
    EXPECT_LT(max_diff(k::conv2d_backward_input(dy, w, x.shape(), g),
                       k::reference::conv2d_backward_input(dy, w, x.shape(), g)),
              1e-12);
    EXPECT_LT(max_diff(k::conv2d_backward_weight(dy, x, p.kernel, g),
                       k::reference::conv2d_backward_weight(dy, x, p.kernel, g)),
              1e-11);
}

TEST_P(ConvKernels, BackwardIsAdjointOfForward) {
    // <conv(x), dy> = <x, conv^T(dy)> and likewise for the weights.
    const Geo p = GetParam();
    Rng rng(3);
    const Tensor x = rng.normal_tensor({p.n, p.ci, p.size, p.size});
    const Tensor w = rng.normal_tensor({p.co, p.ci, p.kernel, p.kernel});
    const k::ConvGeometry g{p.stride, p.pad};
    const Tensor y = k::conv2d_forward(x, w, Tensor(), g);
    const Tensor dy = rng.normal_tensor(y.shape());
    auto dot = [](const Tensor& a, const Tensor& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    const double lhs = dot(y, dy);
    EXPECT_NEAR(lhs, dot(x, k::conv2d_backward_input(dy, w, x.shape(), g)), 1e-9 * (1 + std::abs(lhs)));
    EXPECT_NEAR(lhs, dot(w, k::conv2d_backward_weight(dy, x, p.kernel, g)), 1e-9 * (1 + std::abs(lhs)));
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvKernels,
                         ::testing::Values(Geo{2, 3, 4, 8, 3, 1, 1}, Geo{1, 2, 5, 9, 4, 2, 1}, Geo{3, 4, 2, 6, 1, 1, 0},
                                           Geo{2, 1, 3, 7, 3, 2, 0}, Geo{1, 3, 3, 5, 5, 1, 2}));

TEST(ConvKernels, ResultsIndependentOfThreadCount) {
    Rng rng(4);
    const Tensor x = rng.normal_tensor({5, 6, 12, 12});
    const Tensor w = rng.normal_tensor({7, 6, 3, 3});
    const Tensor b = rng.normal_tensor({7});
    const k::ConvGeometry g{1, 1};
    const Tensor dy = rng.normal_tensor({5, 7, 12, 12});
    const int before = omp_get_max_threads();
    omp_set_num_threads(1);
    const Tensor y1 = k::conv2d_forward(x, w, b, g);
    const Tensor gi1 = k::conv2d_backward_input(dy, w, x.shape(), g);
    const Tensor gw1 = k::conv2d_backward_weight(dy, x, 3, g);
    omp_set_num_threads(4);
    const Tensor y4 = k::conv2d_forward(x, w, b, g);
    const Tensor gi4 = k::conv2d_backward_input(dy, w, x.shape(), g);
    const Tensor gw4 = k::conv2d_backward_weight(dy, x, 3, g);
    omp_set_num_threads(before);
    EXPECT_TRUE(bitwise_same(y1, y4));
    EXPECT_TRUE(bitwise_same(gi1, gi4));
    EXPECT_TRUE(bitwise_same(gw1, gw4));
}

TEST(ConvKernels, BiasGradientSumsOverBatchAndSpace) {
    Rng rng(5);
    const Tensor dy = rng.normal_tensor({3, 2, 4, 4});
    const Tensor gb = k::conv2d_backward_bias(dy);
    ASSERT_EQ(gb.shape(), Shape{2});
    for (int c = 0; c < 2; ++c) {
        double s = 0.0;
        for (int n = 0; n < 3; ++n)
            for (int i = 0; i < 16; ++i) s += dy[(static_cast<std::size_t>(n) * 2 + c) * 16 + i];
        EXPECT_NEAR(gb[static_cast<std::size_t>(c)], s, 1e-12);
    }
}

TEST(Gemm, AllTransposeCombinationsMatchNaive) {
    Rng rng(6);
    const int m = 5, n = 4, kk = 7;
    for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
            const Tensor a = rng.normal_tensor(ta ? Shape{kk, m} : Shape{m, kk});
            const Tensor b = rng.normal_tensor(tb ? Shape{n, kk} : Shape{kk, n});
            Tensor c({m, n}, 1.0);
            k::gemm(ta, tb, m, n, kk, a.data(), b.data(), c.data(), true);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double s = 1.0;
                    for (int q = 0; q < kk; ++q)
                        s += (ta ? a[q * m + i] : a[i * kk + q]) * (tb ? b[j * kk + q] : b[q * n + j]);
                    EXPECT_NEAR(c[i * n + j], s, 1e-12);
                }
        }
    }
}

TEST(Bmm, MatchesReferenceForEveryTransposeFlag) {
    Rng rng(7);
    for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
            const Tensor a = rng.normal_tensor(ta ? Shape{3, 6, 4} : Shape{3, 4, 6});
            const Tensor b = rng.normal_tensor(tb ? Shape{3, 5, 6} : Shape{3, 6, 5});
            const Tensor c = k::bmm(a, b, ta, tb);
            ASSERT_EQ(c.shape(), (Shape{3, 4, 5}));
            EXPECT_LT(max_diff(c, k::reference::bmm(a, b, ta, tb)), 1e-12);
        }
    }
}

TEST(Tensor, RowsStackAndConcat) {
    Tensor t({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
    const Tensor r = t.rows(1, 2);
    EXPECT_EQ(r.shape(), (Shape{2, 2}));
    EXPECT_EQ(r[0], 3);
    EXPECT_EQ(t.item(2).shape(), Shape{2});
    EXPECT_EQ(t.item(2)[1], 6);
    const Tensor s = stack({t.item(0), t.item(2)});
    EXPECT_EQ(s.shape(), (Shape{2, 2}));
    EXPECT_EQ(s[3], 6);
    const Tensor c = concat_rows({t, r});
    EXPECT_EQ(c.shape(), (Shape{5, 2}));
    EXPECT_EQ(c[9], 6);
    EXPECT_THROW(t.reshaped({4}), std::exception);
}

TEST(Tensor, RoundToFloatMatchesCast) {
    Rng rng(8);
    const Tensor t = rng.normal_tensor({100});
    const Tensor r = round_to_float(t);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(r[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(Rng, NamedSubstreamsAreStableAndDistinct) {
    EXPECT_EQ(derive_seed(5, "a"), derive_seed(5, "a"));
    EXPECT_NE(derive_seed(5, "a"), derive_seed(5, "b"));
    EXPECT_NE(derive_seed(5, "a"), derive_seed(6, "a"));
    EXPECT_NE(derive_seed(5, 0), derive_seed(5, 1));
    Rng a(9, "x"), b(9, "x");
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}
