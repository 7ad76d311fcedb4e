#include "botkit/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace botkit {

namespace meter {
namespace {
std::atomic<bool> g_enabled{false};
std::atomic<uint64_t> g_madds{0};
}  // namespace
void enable(bool on) { g_enabled.store(on); }
bool enabled() { return g_enabled.load(); }
void reset() { g_madds.store(0); }
uint64_t madds() { return g_madds.load(); }
void add(uint64_t n) {
  if (g_enabled.load()) g_madds.fetch_add(n);
}
}  // namespace meter

namespace logit_alloc {
namespace {
std::atomic<uint64_t> g_bytes{0};
}
void reset() { g_bytes.store(0); }
uint64_t bytes() { return g_bytes.load(); }
void add(uint64_t n) { g_bytes.fetch_add(n); }
}  // namespace logit_alloc

namespace kernels {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_nchw(const Tensor& x, const char* who) {
  require(x.rank() == 4, std::string(who) + ": expected NCHW tensor, got " + x.shape_str());
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require(a.rank() >= 2, "bmm: lhs rank < 2, shape " + a.shape_str());
  require(b.rank() == a.rank() || b.rank() == 2,
          "bmm: rhs rank must match lhs or be 2, got " + a.shape_str() + " x " + b.shape_str());
  DType dt = common_dtype(a, b);

  int64_t ra = a.dim(a.rank() - 2), ca = a.dim(a.rank() - 1);
  int64_t rb = b.dim(b.rank() - 2), cb = b.dim(b.rank() - 1);
  int64_t m = trans_a ? ca : ra;
  int64_t k = trans_a ? ra : ca;
  int64_t kb = trans_b ? cb : rb;
  int64_t n = trans_b ? rb : cb;
  require(k == kb, "matmul dimension mismatch: " + a.shape_str() + (trans_a ? "^T" : "") + " x " +
                       b.shape_str() + (trans_b ? "^T" : ""));

  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 2);
  int64_t batch = shape_numel(out_shape);
  if (b.rank() > 2) {
    std::vector<int64_t> b_lead(b.shape().begin(), b.shape().end() - 2);
    require(shape_numel(b_lead) == batch && std::equal(out_shape.begin(), out_shape.end(), b_lead.begin()),
            "bmm: batch dims differ: " + a.shape_str() + " vs " + b.shape_str());
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape, dt);

  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  int64_t a_bs = ra * ca;
  int64_t b_bs = b.rank() == 2 ? 0 : rb * cb;

  parallel_for(batch * m, [&](int64_t begin, int64_t end) {
    for (int64_t row = begin; row < end; ++row) {
      int64_t bi = row / m;
      int64_t i = row % m;
      const double* A = pa + bi * a_bs;
      const double* B = pb + bi * b_bs;
      double* orow = po + row * n;
      auto a_at = [&](int64_t kk) { return trans_a ? A[kk * ca + i] : A[i * ca + kk]; };
      if (trans_b) {
        for (int64_t j = 0; j < n; ++j) {
          const double* brow = B + j * cb;
          double s = 0.0;
          if (!trans_a) {
            const double* arow = A + i * ca;
            for (int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
          } else {
            for (int64_t kk = 0; kk < k; ++kk) s += a_at(kk) * brow[kk];
          }
          orow[j] = s;
        }
      } else {
        for (int64_t j = 0; j < n; ++j) orow[j] = 0.0;
        for (int64_t kk = 0; kk < k; ++kk) {
          double av = a_at(kk);
          const double* brow = B + kk * cb;
          for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      }
    }
  });
  finalize_dtype(out);
  meter::add(static_cast<uint64_t>(batch * m * n * k));
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: expected 2-d operands, got " + a.shape_str() + " x " + b.shape_str());
  return bmm(a, b, false, false);
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  require_nchw(x, "conv2d");
  require(w.rank() == 4, "conv2d: weight must be [Cout,Cin,kh,kw], got " + w.shape_str());
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == Cin,
          "conv2d channel mismatch: input " + x.shape_str() + " vs weight " + w.shape_str());
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  require(H + 2 * pad >= kh && W + 2 * pad >= kw && Ho >= 1 && Wo >= 1,
          "conv2d: non-positive output extent for input " + x.shape_str() + ", kernel " +
              w.shape_str() + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  DType dt = common_dtype(x, w);
  Tensor out({N, Cout, Ho, Wo}, dt);
  const double* px = x.data();
  const double* pw = w.data();
  double* po = out.mutable_data();

  parallel_for(N * Cout, [&](int64_t begin, int64_t end) {
    for (int64_t nc = begin; nc < end; ++nc) {
      int64_t n = nc / Cout, co = nc % Cout;
      for (int64_t ho = 0; ho < Ho; ++ho) {
        double* orow = po + ((nc)*Ho + ho) * Wo;
        for (int64_t j = 0; j < Wo; ++j) orow[j] = 0.0;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const double* xch = px + (n * Cin + ci) * H * W;
          const double* wch = pw + (co * Cin + ci) * kh * kw;
          for (int64_t fh = 0; fh < kh; ++fh) {
            int64_t h = ho * stride - pad + fh;
            if (h < 0 || h >= H) continue;
            const double* xrow = xch + h * W;
            for (int64_t fw = 0; fw < kw; ++fw) {
              double wv = wch[fh * kw + fw];
              // valid wo range: 0 <= wo*stride - pad + fw < W
              int64_t lo = 0;
              int64_t off = fw - pad;
              if (off < 0) lo = (-off + stride - 1) / stride;
              int64_t hi = Wo;
              if (off + (Wo - 1) * stride >= W) hi = (W - off + stride - 1) / stride;
              for (int64_t wo = lo; wo < hi; ++wo) orow[wo] += wv * xrow[wo * stride + off];
            }
          }
        }
      }
    }
  });
  finalize_dtype(out);
  meter::add(static_cast<uint64_t>(N * Cout * Cin * kh * kw * Ho * Wo));
  return out;
}

Tensor conv2d_grad_input(const Tensor& ct, const Tensor& w, int stride, int pad,
                         const std::vector<int64_t>& x_shape) {
  int64_t N = x_shape[0], Cin = x_shape[1], H = x_shape[2], W = x_shape[3];
  int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = ct.dim(2), Wo = ct.dim(3);
  Tensor dx(x_shape, ct.dtype());
  const double* pc = ct.data();
  const double* pw = w.data();
  double* pd = dx.mutable_data();
  parallel_for(N * Cin, [&](int64_t begin, int64_t end) {
    for (int64_t nc = begin; nc < end; ++nc) {
      int64_t n = nc / Cin, ci = nc % Cin;
      double* dch = pd + nc * H * W;
      for (int64_t co = 0; co < Cout; ++co) {
        const double* cch = pc + (n * Cout + co) * Ho * Wo;
        const double* wch = pw + (co * Cin + ci) * kh * kw;
        for (int64_t fh = 0; fh < kh; ++fh) {
          for (int64_t fw = 0; fw < kw; ++fw) {
            double wv = wch[fh * kw + fw];
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h = ho * stride - pad + fh;
              if (h < 0 || h >= H) continue;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t ww = wo * stride - pad + fw;
                if (ww < 0 || ww >= W) continue;
                dch[h * W + ww] += wv * cch[ho * Wo + wo];
              }
            }
          }
        }
      }
    }
  });
  finalize_dtype(dx);
  return dx;
}

Tensor conv2d_grad_weight(const Tensor& ct, const Tensor& x, int stride, int pad,
                          const std::vector<int64_t>& w_shape) {
  int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Cout = w_shape[0], kh = w_shape[2], kw = w_shape[3];
  int64_t Ho = ct.dim(2), Wo = ct.dim(3);
  Tensor dw(w_shape, ct.dtype());
  const double* pc = ct.data();
  const double* px = x.data();
  double* pd = dw.mutable_data();
  parallel_for(Cout * Cin, [&](int64_t begin, int64_t end) {
    for (int64_t cc = begin; cc < end; ++cc) {
      int64_t co = cc / Cin, ci = cc % Cin;
      double* wch = pd + cc * kh * kw;
      for (int64_t fh = 0; fh < kh; ++fh) {
        for (int64_t fw = 0; fw < kw; ++fw) {
          double s = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            const double* cch = pc + (n * Cout + co) * Ho * Wo;
            const double* xch = px + (n * Cin + ci) * H * W;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t h = ho * stride - pad + fh;
              if (h < 0 || h >= H) continue;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t ww = wo * stride - pad + fw;
                if (ww < 0 || ww >= W) continue;
                s += cch[ho * Wo + wo] * xch[h * W + ww];
              }
            }
          }
          wch[fh * kw + fw] = s;
        }
      }
    }
  });
  finalize_dtype(dw);
  return dw;
}

Tensor avg_pool2d(const Tensor& x) {
  require_nchw(x, "avg_pool2d");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("avg_pool2d: spatial extents must be even, got " + x.shape_str());
  }
  Tensor out({N, C, H / 2, W / 2}, x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  int64_t Ho = H / 2, Wo = W / 2;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* xch = px + nc * H * W;
    double* och = po + nc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho) {
      for (int64_t wo = 0; wo < Wo; ++wo) {
        const double* w0 = xch + (2 * ho) * W + 2 * wo;
        och[ho * Wo + wo] = (w0[0] + w0[1] + w0[W] + w0[W + 1]) * 0.25;
      }
    }
  }
  finalize_dtype(out);
  return out;
}

Tensor max_pool2d(const Tensor& x) {
  require_nchw(x, "max_pool2d");
  constexpr int64_t k = 3, stride = 2, pad = 1;
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "max_pool2d: input too small " + x.shape_str());
  Tensor out({N, C, Ho, Wo}, x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* xch = px + nc * H * W;
    double* och = po + nc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho) {
      for (int64_t wo = 0; wo < Wo; ++wo) {
        double m = -std::numeric_limits<double>::infinity();
        for (int64_t fh = 0; fh < k; ++fh) {
          int64_t h = ho * stride - pad + fh;
          if (h < 0 || h >= H) continue;
          for (int64_t fw = 0; fw < k; ++fw) {
            int64_t w = wo * stride - pad + fw;
            if (w < 0 || w >= W) continue;
            m = std::max(m, xch[h * W + w]);
          }
        }
        och[ho * Wo + wo] = m;
      }
    }
  }
  finalize_dtype(out);
  return out;
}

Tensor batchnorm_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const Tensor& mean, const Tensor& var, double eps) {
  require_nchw(x, "batchnorm_affine");
  int64_t C = x.dim(1);
  for (const Tensor* p : {&gamma, &beta, &mean, &var}) {
    if (p->rank() != 1 || p->dim(0) != C) {
      throw ConfigError("batchnorm_affine: parameter length " + p->shape_str() +
                        " != channel count " + std::to_string(C));
    }
  }
  if (eps < 0) throw ConfigError("batchnorm_affine: eps must be >= 0");
  for (int64_t c = 0; c < C; ++c) {
    if (var.data()[c] < 0) throw ConfigError("batchnorm_affine: negative variance");
    if (var.data()[c] + eps <= 0) throw ConfigError("batchnorm_affine: var + eps must be > 0");
  }
  int64_t N = x.dim(0), HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape(), x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      double inv = 1.0 / std::sqrt(var.data()[c] + eps);
      double g = gamma.data()[c], b = beta.data()[c], m = mean.data()[c];
      const double* xc = px + (n * C + c) * HW;
      double* oc = po + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) oc[i] = (xc[i] - m) * inv * g + b;
    }
  }
  finalize_dtype(out);
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  require(x.rank() >= 1 && x.dim(x.rank() - 1) >= 1, "softmax_lastdim: empty last dim");
  int64_t n = x.dim(x.rank() - 1);
  int64_t rows = x.numel() / n;
  Tensor out(x.shape(), x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * n;
    double* orow = po + r * n;
    double mx = xr[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      orow[i] = std::exp(xr[i] - mx);
      sum += orow[i];
    }
    double inv = 1.0 / sum;
    for (int64_t i = 0; i < n; ++i) orow[i] *= inv;
  }
  finalize_dtype(out);
  return out;
}

namespace {

template <typename F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape(), x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
  finalize_dtype(out);
  return out;
}

double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Tensor relu(const Tensor& x) {
  return map_unary(x, [](double v) { return v > 0 ? v : 0.0; });
}

Tensor silu(const Tensor& x) {
  return map_unary(x, [](double v) { return v * sigmoid_scalar(v); });
}

Tensor sigmoid(const Tensor& x) { return map_unary(x, sigmoid_scalar); }

Tensor global_avg_pool(const Tensor& x) {
  require_nchw(x, "global_avg_pool");
  int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out({N, C}, x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    const double* xc = px + nc * HW;
    for (int64_t i = 0; i < HW; ++i) s += xc[i];
    po[nc] = s / static_cast<double>(HW);
  }
  finalize_dtype(out);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  DType dt = common_dtype(a, b);
  Tensor out(a.shape(), dt);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  finalize_dtype(out);
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  DType dt = common_dtype(a, b);
  Tensor out(a.shape(), dt);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  finalize_dtype(out);
  return out;
}

Tensor scale(const Tensor& x, double c) {
  return map_unary(x, [c](double v) { return v * c; });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  const double* px = x.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += px[i];
  return Tensor::from_data({1}, {s}, x.dtype());
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + x.shape_str() + " as " + shape_to_string(shape));
  return Tensor::from_data(std::move(shape), std::vector<double>(x.data(), x.data() + x.numel()),
                           x.dtype());
}

Tensor transpose_last2(const Tensor& x) {
  require(x.rank() >= 2, "transpose_last2: rank < 2");
  int64_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  std::vector<int64_t> shape = x.shape();
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Tensor out(shape, x.dtype());
  int64_t batch = x.numel() / (r * c);
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t b = 0; b < batch; ++b) {
    const double* xm = px + b * r * c;
    double* om = po + b * r * c;
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) om[j * r + i] = xm[i * c + j];
  }
  return out;
}

Tensor swap_dims12(const Tensor& x) {
  require(x.rank() == 4, "swap_dims12: expected rank-4 tensor, got " + x.shape_str());
  int64_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  Tensor out({A, C, B, D}, x.dtype());
  const double* px = x.data();
  double* po = out.mutable_data();
  for (int64_t a = 0; a < A; ++a)
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const double* src = px + ((a * B + b) * C + c) * D;
        double* dst = po + ((a * C + c) * B + b) * D;
        std::copy(src, src + D, dst);
      }
  return out;
}

Tensor rel_gather(const Tensor& qrh, const Tensor& qrw, int64_t H, int64_t W) {
  int64_t n = H * W;
  require(qrh.rank() >= 2 && qrh.dim(qrh.rank() - 2) == n && qrh.dim(qrh.rank() - 1) == 2 * H - 1,
          "rel_gather: height logits shape " + qrh.shape_str());
  require(qrw.rank() == qrh.rank() && qrw.dim(qrw.rank() - 2) == n && qrw.dim(qrw.rank() - 1) == 2 * W - 1,
          "rel_gather: width logits shape " + qrw.shape_str());
  std::vector<int64_t> shape(qrh.shape().begin(), qrh.shape().end() - 1);
  shape.push_back(n);
  int64_t batch = shape_numel(shape) / (n * n);
  Tensor out(shape, common_dtype(qrh, qrw));
  const double* ph = qrh.data();
  const double* pw = qrw.data();
  double* po = out.mutable_data();
  int64_t hs = 2 * H - 1, ws = 2 * W - 1;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < n; ++p) {
      int64_t pi = p / W, pj = p % W;
      const double* hrow = ph + (b * n + p) * hs;
      const double* wrow = pw + (b * n + p) * ws;
      double* orow = po + (b * n + p) * n;
      for (int64_t q = 0; q < n; ++q) {
        int64_t qi = q / W, qj = q % W;
        orow[q] = hrow[qi - pi + H - 1] + wrow[qj - pj + W - 1];
      }
    }
  }
  finalize_dtype(out);
  return out;
}

Tensor rel_scatter_h(const Tensor& ct, int64_t H, int64_t W) {
  int64_t n = H * W;
  std::vector<int64_t> shape(ct.shape().begin(), ct.shape().end() - 1);
  shape.push_back(2 * H - 1);
  Tensor out(shape, ct.dtype());
  int64_t batch = ct.numel() / (n * n);
  const double* pc = ct.data();
  double* po = out.mutable_data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < n; ++p) {
      int64_t pi = p / W;
      const double* crow = pc + (b * n + p) * n;
      double* orow = po + (b * n + p) * (2 * H - 1);
      for (int64_t q = 0; q < n; ++q) orow[q / W - pi + H - 1] += crow[q];
    }
  }
  finalize_dtype(out);
  return out;
}

Tensor rel_scatter_w(const Tensor& ct, int64_t H, int64_t W) {
  int64_t n = H * W;
  std::vector<int64_t> shape(ct.shape().begin(), ct.shape().end() - 1);
  shape.push_back(2 * W - 1);
  Tensor out(shape, ct.dtype());
  int64_t batch = ct.numel() / (n * n);
  const double* pc = ct.data();
  double* po = out.mutable_data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < n; ++p) {
      int64_t pj = p % W;
      const double* crow = pc + (b * n + p) * n;
      double* orow = po + (b * n + p) * (2 * W - 1);
      for (int64_t q = 0; q < n; ++q) orow[q % W - pj + W - 1] += crow[q];
    }
  }
  finalize_dtype(out);
  return out;
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  require_nchw(x, "channel_scale");
  require(s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
          "channel_scale: scale shape " + s.shape_str() + " vs input " + x.shape_str());
  common_dtype(x, s);
  int64_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor out(x.shape(), x.dtype());
  const double* px = x.data();
  const double* ps = s.data();
  double* po = out.mutable_data();
  for (int64_t nc = 0; nc < NC; ++nc) {
    double v = ps[nc];
    const double* xc = px + nc * HW;
    double* oc = po + nc * HW;
    for (int64_t i = 0; i < HW; ++i) oc[i] = xc[i] * v;
  }
  finalize_dtype(out);
  return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
  require(x.rank() == 2 && b.rank() == 1 && b.dim(0) == x.dim(1),
          "add_bias_rows: " + x.shape_str() + " + " + b.shape_str());
  common_dtype(x, b);
  Tensor out(x.shape(), x.dtype());
  int64_t N = x.dim(0), M = x.dim(1);
  const double* px = x.data();
  const double* pb = b.data();
  double* po = out.mutable_data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t m = 0; m < M; ++m) po[n * M + m] = px[n * M + m] + pb[m];
  finalize_dtype(out);
  return out;
}

}  // namespace kernels

namespace ops {

namespace K = kernels;

namespace {

// Sums leading batch dims of t down to `target_shape` (rank-2 broadcast adjoint).
Tensor sum_to_rank2(const Tensor& t, const std::vector<int64_t>& target_shape) {
  if (t.shape() == target_shape) return t;
  int64_t r = target_shape[0], c = target_shape[1];
  int64_t batch = t.numel() / (r * c);
  Tensor out(target_shape, t.dtype());
  const double* pt = t.data();
  double* po = out.mutable_data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < r * c; ++i) po[i] += pt[b * r * c + i];
  finalize_dtype(out);
  return out;
}

}  // namespace

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  Tensor out = K::bmm(a.value(), b.value(), trans_a, trans_b);
  Tensor av = a.value(), bv = b.value();
  return make_op(std::move(out), {a, b}, [av, bv, trans_a, trans_b](const Tensor& ct) {
    Tensor da = trans_a ? K::bmm(bv, ct, trans_b, true) : K::bmm(ct, bv, false, !trans_b);
    if (da.shape() != av.shape()) da = sum_to_rank2(da, av.shape());
    Tensor db = trans_b ? K::bmm(ct, av, true, trans_a) : K::bmm(av, ct, !trans_a, false);
    if (db.shape() != bv.shape()) db = sum_to_rank2(db, bv.shape());
    return std::vector<Tensor>{std::move(da), std::move(db)};
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2) {
    throw ShapeError("matmul: expected 2-d operands, got " + a.value().shape_str() + " x " +
                     b.value().shape_str());
  }
  return bmm(a, b, false, false);
}

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
  Tensor out = K::conv2d(x.value(), w.value(), stride, pad);
  Tensor xv = x.value(), wv = w.value();
  return make_op(std::move(out), {x, w}, [xv, wv, stride, pad](const Tensor& ct) {
    return std::vector<Tensor>{K::conv2d_grad_input(ct, wv, stride, pad, xv.shape()),
                               K::conv2d_grad_weight(ct, xv, stride, pad, wv.shape())};
  });
}

Var avg_pool2d(const Var& x) {
  Tensor out = K::avg_pool2d(x.value());
  std::vector<int64_t> xshape = x.value().shape();
  DType dt = x.value().dtype();
  return make_op(std::move(out), {x}, [xshape, dt](const Tensor& ct) {
    Tensor dx(xshape, dt);
    int64_t NC = xshape[0] * xshape[1], H = xshape[2], W = xshape[3];
    int64_t Ho = H / 2, Wo = W / 2;
    const double* pc = ct.data();
    double* pd = dx.mutable_data();
    for (int64_t nc = 0; nc < NC; ++nc) {
      const double* cch = pc + nc * Ho * Wo;
      double* dch = pd + nc * H * W;
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          double v = cch[ho * Wo + wo] * 0.25;
          double* w0 = dch + (2 * ho) * W + 2 * wo;
          w0[0] += v;
          w0[1] += v;
          w0[W] += v;
          w0[W + 1] += v;
        }
    }
    finalize_dtype(dx);
    return std::vector<Tensor>{std::move(dx)};
  });
}

Var max_pool2d(const Var& x) {
  Tensor out = K::max_pool2d(x.value());
  Tensor xv = x.value();
  return make_op(std::move(out), {x}, [xv](const Tensor& ct) {
    constexpr int64_t k = 3, stride = 2, pad = 1;
    int64_t NC = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int64_t Ho = ct.dim(2), Wo = ct.dim(3);
    Tensor dx(xv.shape(), ct.dtype());
    const double* px = xv.data();
    const double* pc = ct.data();
    double* pd = dx.mutable_data();
    for (int64_t nc = 0; nc < NC; ++nc) {
      const double* xch = px + nc * H * W;
      const double* cch = pc + nc * Ho * Wo;
      double* dch = pd + nc * H * W;
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          // first element attaining the window max, fixed scan order
          double best = -std::numeric_limits<double>::infinity();
          int64_t bh = -1, bw = -1;
          for (int64_t fh = 0; fh < k; ++fh) {
            int64_t h = ho * stride - pad + fh;
            if (h < 0 || h >= H) continue;
            for (int64_t fw = 0; fw < k; ++fw) {
              int64_t w = wo * stride - pad + fw;
              if (w < 0 || w >= W) continue;
              if (xch[h * W + w] > best) {
                best = xch[h * W + w];
                bh = h;
                bw = w;
              }
            }
          }
          if (bh >= 0) dch[bh * W + bw] += cch[ho * Wo + wo];
        }
    }
    finalize_dtype(dx);
    return std::vector<Tensor>{std::move(dx)};
  });
}

Var batchnorm_affine(const Var& x, const Var& gamma, const Var& beta, const Var& mean,
                     const Var& var, double eps) {
  Tensor out = K::batchnorm_affine(x.value(), gamma.value(), beta.value(), mean.value(),
                                   var.value(), eps);
  Tensor xv = x.value(), gv = gamma.value(), mv = mean.value(), vv = var.value();
  return make_op(std::move(out), {x, gamma, beta, mean, var},
                 [xv, gv, mv, vv, eps](const Tensor& ct) {
                   int64_t N = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
                   Tensor dx(xv.shape(), ct.dtype());
                   Tensor dg({C}, ct.dtype()), db({C}, ct.dtype());
                   Tensor dm({C}, ct.dtype()), dv({C}, ct.dtype());
                   const double* pc = ct.data();
                   const double* px = xv.data();
                   double* pdx = dx.mutable_data();
                   for (int64_t c = 0; c < C; ++c) {
                     double inv = 1.0 / std::sqrt(vv.data()[c] + eps);
                     double g = gv.data()[c], m = mv.data()[c];
                     double sg = 0, sb = 0, sm = 0, sv = 0;
                     for (int64_t n = 0; n < N; ++n) {
                       const double* cc = pc + (n * C + c) * HW;
                       const double* xc = px + (n * C + c) * HW;
                       double* dxc = pdx + (n * C + c) * HW;
                       for (int64_t i = 0; i < HW; ++i) {
                         double xhat = (xc[i] - m) * inv;
                         dxc[i] = cc[i] * g * inv;
                         sg += cc[i] * xhat;
                         sb += cc[i];
                         sm += -cc[i] * g * inv;
                         sv += cc[i] * (xc[i] - m) * g * (-0.5) * inv * inv * inv;
                       }
                     }
                     dg.mutable_data()[c] = sg;
                     db.mutable_data()[c] = sb;
                     dm.mutable_data()[c] = sm;
                     dv.mutable_data()[c] = sv;
                   }
                   for (Tensor* t : {&dx, &dg, &db, &dm, &dv}) finalize_dtype(*t);
                   return std::vector<Tensor>{dx, dg, db, dm, dv};
                 });
}

Var softmax_lastdim(const Var& x) {
  Tensor out = K::softmax_lastdim(x.value());
  Tensor y = out;
  return make_op(std::move(out), {x}, [y](const Tensor& ct) {
    int64_t n = y.dim(y.rank() - 1);
    int64_t rows = y.numel() / n;
    Tensor dx(y.shape(), ct.dtype());
    const double* py = y.data();
    const double* pc = ct.data();
    double* pd = dx.mutable_data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* yr = py + r * n;
      const double* cr = pc + r * n;
      double* dr = pd + r * n;
      double dot = 0.0;
      for (int64_t i = 0; i < n; ++i) dot += cr[i] * yr[i];
      for (int64_t i = 0; i < n; ++i) dr[i] = yr[i] * (cr[i] - dot);
    }
    finalize_dtype(dx);
    return std::vector<Tensor>{std::move(dx)};
  });
}

namespace {

template <typename DF>
Var unary_op(const Var& x, Tensor out, DF df) {
  Tensor xv = x.value();
  return make_op(std::move(out), {x}, [xv, df](const Tensor& ct) {
    Tensor dx(xv.shape(), ct.dtype());
    const double* px = xv.data();
    const double* pc = ct.data();
    double* pd = dx.mutable_data();
    int64_t n = xv.numel();
    for (int64_t i = 0; i < n; ++i) pd[i] = pc[i] * df(px[i]);
    finalize_dtype(dx);
    return std::vector<Tensor>{std::move(dx)};
  });
}

double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Var relu(const Var& x) {
  return unary_op(x, K::relu(x.value()), [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Var silu(const Var& x) {
  return unary_op(x, K::silu(x.value()), [](double v) {
    double s = sigmoid_scalar(v);
    return s * (1.0 + v * (1.0 - s));
  });
}

Var sigmoid(const Var& x) {
  return unary_op(x, K::sigmoid(x.value()), [](double v) {
    double s = sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

Var global_avg_pool(const Var& x) {
  Tensor out = K::global_avg_pool(x.value());
  std::vector<int64_t> xshape = x.value().shape();
  return make_op(std::move(out), {x}, [xshape](const Tensor& ct) {
    int64_t NC = xshape[0] * xshape[1], HW = xshape[2] * xshape[3];
    Tensor dx(xshape, ct.dtype());
    const double* pc = ct.data();
    double* pd = dx.mutable_data();
    double inv = 1.0 / static_cast<double>(HW);
    for (int64_t nc = 0; nc < NC; ++nc) {
      double v = pc[nc] * inv;
      for (int64_t i = 0; i < HW; ++i) pd[nc * HW + i] = v;
    }
    finalize_dtype(dx);
    return std::vector<Tensor>{std::move(dx)};
  });
}

Var add(const Var& a, const Var& b) {
  return make_op(K::add(a.value(), b.value()), {a, b},
                 [](const Tensor& ct) { return std::vector<Tensor>{ct, ct}; });
}

Var mul(const Var& a, const Var& b) {
  Tensor av = a.value(), bv = b.value();
  return make_op(K::mul(av, bv), {a, b}, [av, bv](const Tensor& ct) {
    return std::vector<Tensor>{K::mul(ct, bv), K::mul(ct, av)};
  });
}

Var scale(const Var& x, double c) {
  return make_op(K::scale(x.value(), c), {x},
                 [c](const Tensor& ct) { return std::vector<Tensor>{K::scale(ct, c)}; });
}

Var sum_all(const Var& x) {
  std::vector<int64_t> xshape = x.value().shape();
  return make_op(K::sum_all(x.value()), {x}, [xshape](const Tensor& ct) {
    return std::vector<Tensor>{Tensor::full(xshape, ct.item(), ct.dtype())};
  });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
  std::vector<int64_t> xshape = x.value().shape();
  return make_op(K::reshape(x.value(), std::move(shape)), {x}, [xshape](const Tensor& ct) {
    return std::vector<Tensor>{K::reshape(ct, xshape)};
  });
}

Var transpose_last2(const Var& x) {
  return make_op(K::transpose_last2(x.value()), {x}, [](const Tensor& ct) {
    return std::vector<Tensor>{K::transpose_last2(ct)};
  });
}

Var swap_dims12(const Var& x) {
  return make_op(K::swap_dims12(x.value()), {x}, [](const Tensor& ct) {
    return std::vector<Tensor>{K::swap_dims12(ct)};
  });
}

Var rel_gather(const Var& qrh, const Var& qrw, int64_t H, int64_t W) {
  return make_op(K::rel_gather(qrh.value(), qrw.value(), H, W), {qrh, qrw},
                 [H, W](const Tensor& ct) {
                   return std::vector<Tensor>{K::rel_scatter_h(ct, H, W),
                                              K::rel_scatter_w(ct, H, W)};
                 });
}

Var channel_scale(const Var& x, const Var& s) {
  Tensor xv = x.value(), sv = s.value();
  return make_op(K::channel_scale(xv, sv), {x, s}, [xv, sv](const Tensor& ct) {
    Tensor dx = K::channel_scale(ct, sv);
    int64_t NC = xv.dim(0) * xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor ds({xv.dim(0), xv.dim(1)}, ct.dtype());
    const double* pc = ct.data();
    const double* px = xv.data();
    double* pd = ds.mutable_data();
    for (int64_t nc = 0; nc < NC; ++nc) {
      double v = 0.0;
      for (int64_t i = 0; i < HW; ++i) v += pc[nc * HW + i] * px[nc * HW + i];
      pd[nc] = v;
    }
    finalize_dtype(ds);
    return std::vector<Tensor>{std::move(dx), std::move(ds)};
  });
}

Var add_bias_rows(const Var& x, const Var& b) {
  int64_t M = b.value().dim(0);
  return make_op(K::add_bias_rows(x.value(), b.value()), {x, b}, [M](const Tensor& ct) {
    Tensor db({M}, ct.dtype());
    int64_t N = ct.dim(0);
    const double* pc = ct.data();
    double* pd = db.mutable_data();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t m = 0; m < M; ++m) pd[m] += pc[n * M + m];
    finalize_dtype(db);
    return std::vector<Tensor>{ct, std::move(db)};
  });
}

}  // namespace ops

}  // namespace botkit
