#pragma once

#include <cstdint>

#include "botkit/autodiff.hpp"
#include "botkit/tensor.hpp"

namespace botkit {

// Multiply-accumulate meter. Forward matmul/conv kernels add their exact MAC
// count while enabled; everything else (BN, activations, pooling, softmax,
// elementwise) is not counted, matching the cost-model convention.
namespace meter {
void enable(bool on);
bool enabled();
void reset();
uint64_t madds();
void add(uint64_t n);
}  // namespace meter

// Allocation accounting for attention logit tensors (n x n matrices).
namespace logit_alloc {
void reset();
uint64_t bytes();
void add(uint64_t n);
}  // namespace logit_alloc

// Eager kernels on plain tensors. Accumulation order per output element is
// fixed (left-to-right over the reduction axis) regardless of thread count.
namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);
// Batched matmul over matching leading dims; b may be rank-2 (broadcast).
// trans_a / trans_b transpose the trailing two dims of the operand.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor conv2d_grad_input(const Tensor& ct, const Tensor& w, int stride, int pad,
                         const std::vector<int64_t>& x_shape);
Tensor conv2d_grad_weight(const Tensor& ct, const Tensor& x, int stride, int pad,
                          const std::vector<int64_t>& w_shape);
Tensor avg_pool2d(const Tensor& x);                    // k=2, stride=2
Tensor max_pool2d(const Tensor& x);                    // k=3, stride=2, pad=1
Tensor batchnorm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const Tensor& mean, const Tensor& var, double eps);
Tensor softmax_lastdim(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);               // [N,C,H,W] -> [N,C]
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor sum_all(const Tensor& x);                       // -> [1]
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
Tensor transpose_last2(const Tensor& x);
Tensor swap_dims12(const Tensor& x);                   // [A,B,C,D] -> [A,C,B,D]
// out[.., p, p'] = qrh[.., p, row(p')-row(p)+H-1] + qrw[.., p, col(p')-col(p)+W-1]
Tensor rel_gather(const Tensor& qrh, const Tensor& qrw, int64_t H, int64_t W);
Tensor rel_scatter_h(const Tensor& ct, int64_t H, int64_t W);  // adjoint wrt qrh
Tensor rel_scatter_w(const Tensor& ct, int64_t H, int64_t W);  // adjoint wrt qrw
Tensor channel_scale(const Tensor& x, const Tensor& s);        // [N,C,H,W] * [N,C]
Tensor add_bias_rows(const Tensor& x, const Tensor& b);        // [N,M] + [M]

}  // namespace kernels

// Differentiable ops; each records a vector-Jacobian product on the tape.
namespace ops {

Var matmul(const Var& a, const Var& b);
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var avg_pool2d(const Var& x);
Var max_pool2d(const Var& x);
Var batchnorm_affine(const Var& x, const Var& gamma, const Var& beta,
                     const Var& mean, const Var& var, double eps);
Var softmax_lastdim(const Var& x);
Var relu(const Var& x);
Var silu(const Var& x);
Var sigmoid(const Var& x);
Var global_avg_pool(const Var& x);
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var sum_all(const Var& x);
Var reshape(const Var& x, std::vector<int64_t> shape);
Var transpose_last2(const Var& x);
Var swap_dims12(const Var& x);
Var rel_gather(const Var& qrh, const Var& qrw, int64_t H, int64_t W);
Var channel_scale(const Var& x, const Var& s);
Var add_bias_rows(const Var& x, const Var& b);

}  // namespace ops

}  // namespace botkit
