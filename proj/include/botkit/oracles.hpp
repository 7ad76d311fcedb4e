#pragma once

#include "botkit/attention.hpp"
#include "botkit/tensor.hpp"

namespace botkit {

// Independent brute-force reference implementations. These deliberately avoid
// the kernel/op code paths: plain nested loops, no blocking, no threading.
// They exist so the fast implementations have something honest to disagree
// with.
namespace oracles {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor batchnorm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const Tensor& mean, const Tensor& var, double eps);
Tensor global_avg_pool(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);

// Content-position logits by explicit loop over every (p, p') pair:
// out[b, p, p'] = q[b, p] . (R_h[row(p')-row(p)] + R_w[col(p')-col(p)]).
// q is [B, H*W, d]; tables are [2H-1, d] and [2W-1, d].
Tensor relative_logits_pairs(const Tensor& q, const Tensor& r_h, const Tensor& r_w,
                             int64_t H, int64_t W);

// out[b, p, p'] = q[b, p] . p_abs[p']
Tensor absolute_logits_pairs(const Tensor& q, const Tensor& p_abs);

// Fully naive MHSA: per sample, per head, per query position, build logits
// with scalar dot products, softmax with a scalar loop, then aggregate
// values. Input/output [N, C, H, W], raw parameter tensors.
Tensor mhsa2d_naive(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                    const Tensor& r_h, const Tensor& r_w, const Tensor& p_abs,
                    const MHSAConfig& cfg);

}  // namespace oracles

}  // namespace botkit
