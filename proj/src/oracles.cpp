#include "botkit/oracles.hpp"

#include <cmath>
#include <vector>

namespace botkit {
namespace oracles {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("oracle matmul: bad shapes");
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n}, common_dtype(a, b));
  double* o = out.mutable_data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += a.at({i, p}) * b.at({p, j});
      o[i * n + j] = acc;
    }
  finalize_dtype(out);
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != Ci) throw ShapeError("oracle conv2d: channel mismatch");
  int64_t Ho = (H + 2 * pad - KH) / stride + 1;
  int64_t Wo = (W + 2 * pad - KW) / stride + 1;
  Tensor out = Tensor::zeros({N, Co, Ho, Wo}, common_dtype(x, w));
  double* o = out.mutable_data();
  int64_t idx = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          double acc = 0.0;
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t kh = 0; kh < KH; ++kh)
              for (int64_t kw = 0; kw < KW; ++kw) {
                int64_t ih = ho * stride + kh - pad;
                int64_t iw = wo * stride + kw - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x.at({n, ci, ih, iw}) * w.at({co, ci, kh, kw});
              }
          o[idx++] = acc;
        }
  finalize_dtype(out);
  return out;
}

Tensor batchnorm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const Tensor& mean, const Tensor& var, double eps) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  double* o = out.mutable_data();
  int64_t idx = 0;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double inv = 1.0 / std::sqrt(var.at({c}) + eps);
      double g = gamma.at({c}), b = beta.at({c}), m = mean.at({c});
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) o[idx++] = (x.at({n, c, h, w}) - m) * inv * g + b;
    }
  finalize_dtype(out);
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::zeros({N, C}, x.dtype());
  double* o = out.mutable_data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) acc += x.at({n, c, h, w});
      o[n * C + c] = acc / static_cast<double>(H * W);
    }
  finalize_dtype(out);
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  int64_t last = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / last;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  const double* in = x.data();
  double* o = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = in + r * last;
    double mx = row[0];
    for (int64_t j = 1; j < last; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < last; ++j) {
      o[r * last + j] = std::exp(row[j] - mx);
      sum += o[r * last + j];
    }
    for (int64_t j = 0; j < last; ++j) o[r * last + j] /= sum;
  }
  finalize_dtype(out);
  return out;
}

Tensor relative_logits_pairs(const Tensor& q, const Tensor& r_h, const Tensor& r_w,
                             int64_t H, int64_t W) {
  int64_t B = q.dim(0), n = q.dim(1), d = q.dim(2);
  if (n != H * W) throw ShapeError("oracle relative_logits_pairs: positions mismatch");
  Tensor out = Tensor::zeros({B, n, n}, q.dtype());
  double* o = out.mutable_data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < n; ++p)
      for (int64_t pp = 0; pp < n; ++pp) {
        int64_t dh = pp / W - p / W + H - 1;
        int64_t dw = pp % W - p % W + W - 1;
        double acc = 0.0;
        for (int64_t k = 0; k < d; ++k)
          acc += q.at({b, p, k}) * (r_h.at({dh, k}) + r_w.at({dw, k}));
        o[(b * n + p) * n + pp] = acc;
      }
  finalize_dtype(out);
  return out;
}

Tensor absolute_logits_pairs(const Tensor& q, const Tensor& p_abs) {
  int64_t B = q.dim(0), n = q.dim(1), d = q.dim(2);
  Tensor out = Tensor::zeros({B, n, n}, q.dtype());
  double* o = out.mutable_data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < n; ++p)
      for (int64_t pp = 0; pp < n; ++pp) {
        double acc = 0.0;
        for (int64_t k = 0; k < d; ++k) acc += q.at({b, p, k}) * p_abs.at({pp, k});
        o[(b * n + p) * n + pp] = acc;
      }
  finalize_dtype(out);
  return out;
}

Tensor mhsa2d_naive(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                    const Tensor& r_h, const Tensor& r_w, const Tensor& p_abs,
                    const MHSAConfig& cfg) {
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != cfg.d_model || H != cfg.fm_h || W != cfg.fm_w)
    throw ShapeError("oracle mhsa2d_naive: input does not match config");
  int64_t n = H * W, d = cfg.d_model, heads = cfg.heads, dh = cfg.d_head();
  double scale = cfg.logit_scale();

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  double* o = out.mutable_data();
  // per-sample projected featuremaps, position-major [n][d]
  std::vector<double> q(static_cast<size_t>(n * d)), k(q.size()), v(q.size());
  for (int64_t b = 0; b < N; ++b) {
    for (int64_t p = 0; p < n; ++p)
      for (int64_t oc = 0; oc < d; ++oc) {
        double aq = 0.0, ak = 0.0, av = 0.0;
        for (int64_t c = 0; c < d; ++c) {
          double xv = x.at({b, c, p / W, p % W});
          aq += wq.at({oc, c}) * xv;
          ak += wk.at({oc, c}) * xv;
          av += wv.at({oc, c}) * xv;
        }
        q[static_cast<size_t>(p * d + oc)] = aq * scale;
        k[static_cast<size_t>(p * d + oc)] = ak;
        v[static_cast<size_t>(p * d + oc)] = av;
      }
    for (int64_t head = 0; head < heads; ++head) {
      int64_t c0 = head * dh;
      for (int64_t p = 0; p < n; ++p) {
        std::vector<double> logits(static_cast<size_t>(n));
        for (int64_t pp = 0; pp < n; ++pp) {
          double acc = 0.0;
          for (int64_t c = 0; c < dh; ++c)
            acc += q[static_cast<size_t>(p * d + c0 + c)] * k[static_cast<size_t>(pp * d + c0 + c)];
          if (cfg.pos_mode == PosMode::relative) {
            int64_t oh = pp / W - p / W + H - 1;
            int64_t ow = pp % W - p % W + W - 1;
            for (int64_t c = 0; c < dh; ++c)
              acc += q[static_cast<size_t>(p * d + c0 + c)] *
                     (r_h.at({oh, c}) + r_w.at({ow, c}));
          } else if (cfg.pos_mode == PosMode::absolute) {
            for (int64_t c = 0; c < dh; ++c)
              acc += q[static_cast<size_t>(p * d + c0 + c)] * p_abs.at({pp, c});
          }
          logits[static_cast<size_t>(pp)] = acc;
        }
        double mx = logits[0];
        for (double lv : logits) mx = std::max(mx, lv);
        double sum = 0.0;
        for (double& lv : logits) {
          lv = std::exp(lv - mx);
          sum += lv;
        }
        for (double& lv : logits) lv /= sum;
        for (int64_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (int64_t pp = 0; pp < n; ++pp)
            acc += logits[static_cast<size_t>(pp)] * v[static_cast<size_t>(pp * d + c0 + c)];
          o[((b * C + c0 + c) * H + p / W) * W + p % W] = acc;
        }
      }
    }
  }
  finalize_dtype(out);
  return out;
}

}  // namespace oracles
}  // namespace botkit
