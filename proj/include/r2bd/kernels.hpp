#pragma once

#include "r2bd/tensor.hpp"

/// Dense compute kernels. The functions in `r2bd::kernels` are OpenMP-parallel; every output
/// element is produced by exactly one thread in a fixed summation order, so results are bitwise
/// independent of the thread count. `r2bd::kernels::reference` holds straightforward serial
/// versions used by the tests and the benchmark.
namespace r2bd::kernels {

struct ConvGeometry {
    int stride = 1;
    int pad = 0;
};

int conv_out_size(int in, int kernel, ConvGeometry g);

/// x: (N, Ci, H, W), w: (Co, Ci, K, K), bias: (Co) or empty. Returns (N, Co, Ho, Wo).
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry g);
/// Gradient w.r.t. the input, shape `x_shape`.
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const Shape& x_shape, ConvGeometry g);
/// Gradient w.r.t. the weights, shape (Co, Ci, K, K).
Tensor conv2d_backward_weight(const Tensor& dy, const Tensor& x, int kernel, ConvGeometry g);
/// Gradient w.r.t. the bias: sum of dy over batch and spatial positions.
Tensor conv2d_backward_bias(const Tensor& dy);

/// C = op(A) * op(B) for row-major matrices; op(X) = X^T when the flag is set.
/// A is (M,K) or (K,M); B is (K,N) or (N,K). When `accumulate`, adds into C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, const double* b, double* c,
          bool accumulate = false);

/// Batched matmul: a (B, M, K) x b (B, K, N) -> (B, M, N), with optional transposes of the
/// trailing two dimensions.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

namespace reference {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry g);
Tensor conv2d_backward_input(const Tensor& dy, const Tensor& w, const Shape& x_shape, ConvGeometry g);
Tensor conv2d_backward_weight(const Tensor& dy, const Tensor& x, int kernel, ConvGeometry g);
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

}  // namespace reference

}  // namespace r2bd::kernels
