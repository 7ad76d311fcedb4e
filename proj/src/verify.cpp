#include "botkit/verify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "json.hpp"

#include "botkit/backbone.hpp"
#include "botkit/costmodel.hpp"
#include "botkit/gradcheck.hpp"
#include "botkit/oracles.hpp"

namespace botkit {

using json = nlohmann::json;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

void add_row(VerifyReport& r, const std::string& name, double measured, double threshold) {
  r.rows.push_back({name, measured <= threshold, measured, threshold});
}

double rel_to(double value, double anchor) { return std::abs(value / anchor - 1.0); }

Tensor rand_normal(uint64_t seed, const std::string& name, std::vector<int64_t> shape) {
  return CounterRng(seed, name).normal_tensor(std::move(shape), 1.0);
}

// fixed random weighting so scalar losses exercise non-uniform cotangents
Var weighted_sum(const Var& out, uint64_t seed, const std::string& name) {
  Var m(CounterRng(seed, name).normal_tensor(out.value().shape(), 1.0));
  return ops::sum_all(ops::mul(out, m));
}

std::vector<Var> trainable(const std::vector<Var>& vars) {
  std::vector<Var> out;
  for (const Var& v : vars)
    if (v.requires_grad()) out.push_back(v);
  return out;
}

double grad_mhsa(uint64_t seed, PosMode mode) {
  MHSAConfig cfg{.d_model = 8, .heads = 4, .fm_h = 4, .fm_w = 5, .pos_mode = mode};
  MHSAParams p = MHSAParams::init(cfg, seed, "vg.mhsa.", DType::f64, true);
  Var x(rand_normal(seed, "vg.mhsa.x", {2, 8, 4, 5}), true);
  std::vector<Var> leaves{x};
  for (auto& [n, v] : p.named(cfg)) leaves.push_back(v);
  auto fwd = [&](const std::vector<Var>& ls) {
    return weighted_sum(mhsa2d(ls[0], p, cfg), seed, "vg.mhsa.m");
  };
  return grad_check(fwd, leaves).max_rel_err;
}

double grad_nonlocal(uint64_t seed) {
  NonLocalParams p = NonLocalParams::init(8, seed, "vg.nl.", DType::f64, true);
  Var x(rand_normal(seed, "vg.nl.x", {2, 8, 4, 5}), true);
  std::vector<Var> leaves{x, p.w_theta, p.w_phi, p.w_z};
  auto fwd = [&](const std::vector<Var>& ls) {
    return weighted_sum(nonlocal_layer(ls[0], p), seed, "vg.nl.m");
  };
  return grad_check(fwd, leaves).max_rel_err;
}

double grad_block(uint64_t seed, BlockKind kind, int in, int mid, int out, int stride,
                  int se_ratio, int fm_h, int fm_w) {
  BlockSpec spec;
  spec.kind = kind;
  spec.in_channels = in;
  spec.mid_channels = mid;
  spec.out_channels = out;
  spec.stride = stride;
  spec.se_ratio = se_ratio;
  if (kind == BlockKind::bot)
    spec.attention = MHSAConfig{.d_model = mid, .heads = 4, .fm_h = fm_h, .fm_w = fm_w};
  spec.validate();
  BlockParams p = BlockParams::init(spec, seed, "vg.blk.", DType::f64, true);
  Var x(rand_normal(seed, "vg.blk.x", {1, in, fm_h, fm_w}), true);
  std::vector<Var> leaves{x};
  for (const Var& v : trainable(p.leaves(spec))) leaves.push_back(v);
  auto fwd = [&](const std::vector<Var>& ls) {
    return weighted_sum(run_block(ls[0], spec, p), seed, "vg.blk.m");
  };
  return grad_check(fwd, leaves).max_rel_err;
}

double grad_se(uint64_t seed) {
  SEParams p;
  p.w1 = Var(rand_normal(seed, "vg.se.w1", {2, 8}), true);
  p.w2 = Var(rand_normal(seed, "vg.se.w2", {8, 2}), true);
  Var x(rand_normal(seed, "vg.se.x", {2, 8, 4, 5}), true);
  std::vector<Var> leaves{x, p.w1, p.w2};
  auto fwd = [&](const std::vector<Var>& ls) {
    return weighted_sum(se_gate(ls[0], p, Activation::relu), seed, "vg.se.m");
  };
  return grad_check(fwd, leaves).max_rel_err;
}

void suite_grad(VerifyReport& r, uint64_t seed) {
  add_row(r, "grad.mhsa2d.relative", grad_mhsa(seed, PosMode::relative), 1e-6);
  add_row(r, "grad.mhsa2d.absolute", grad_mhsa(seed, PosMode::absolute), 1e-6);
  add_row(r, "grad.mhsa2d.none", grad_mhsa(seed, PosMode::none), 1e-6);
  add_row(r, "grad.nonlocal", grad_nonlocal(seed), 1e-6);
  add_row(r, "grad.bot_block.stride1",
          grad_block(seed, BlockKind::bot, 16, 4, 16, 1, 0, 4, 4), 1e-6);
  add_row(r, "grad.bot_block.stride2",
          grad_block(seed, BlockKind::bot, 8, 4, 16, 2, 0, 4, 4), 1e-6);
  add_row(r, "grad.bottleneck_block",
          grad_block(seed, BlockKind::conv_bottleneck, 16, 4, 16, 1, 0, 4, 5), 1e-6);
  add_row(r, "grad.se_gate", grad_se(seed), 1e-6);
}

// 4x4 matrix inverse by Gauss-Jordan; used only by the NL equivalence check.
std::vector<double> invert4(const std::vector<double>& m_in) {
  std::vector<double> a = m_in;
  std::vector<double> inv(16, 0.0);
  for (int i = 0; i < 4; ++i) inv[static_cast<size_t>(i * 4 + i)] = 1.0;
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int rr = col + 1; rr < 4; ++rr)
      if (std::abs(a[static_cast<size_t>(rr * 4 + col)]) >
          std::abs(a[static_cast<size_t>(piv * 4 + col)]))
        piv = rr;
    for (int j = 0; j < 4; ++j) {
      std::swap(a[static_cast<size_t>(col * 4 + j)], a[static_cast<size_t>(piv * 4 + j)]);
      std::swap(inv[static_cast<size_t>(col * 4 + j)], inv[static_cast<size_t>(piv * 4 + j)]);
    }
    double d = a[static_cast<size_t>(col * 4 + col)];
    for (int j = 0; j < 4; ++j) {
      a[static_cast<size_t>(col * 4 + j)] /= d;
      inv[static_cast<size_t>(col * 4 + j)] /= d;
    }
    for (int rr = 0; rr < 4; ++rr) {
      if (rr == col) continue;
      double f = a[static_cast<size_t>(rr * 4 + col)];
      for (int j = 0; j < 4; ++j) {
        a[static_cast<size_t>(rr * 4 + j)] -= f * a[static_cast<size_t>(col * 4 + j)];
        inv[static_cast<size_t>(rr * 4 + j)] -= f * inv[static_cast<size_t>(col * 4 + j)];
      }
    }
  }
  return inv;
}

// nonlocal_layer vs a config-matched single-head, position-free MHSA:
// feed z = phi(x) to the MHSA, pick Wq so the (scaled) queries reproduce
// theta(x), identity Wk/Wv, then apply the external Wz projection + residual.
double nonlocal_equivalence(uint64_t seed) {
  const int64_t C = 8, half = 4, H = 2, W = 2, n = H * W;
  NonLocalParams nl = NonLocalParams::init(static_cast<int>(C), seed, "vo.nl.", DType::f64);
  Var x(rand_normal(seed, "vo.nl.x", {1, C, H, W}));
  Tensor ref = nonlocal_layer(x, nl).value();

  // per-position embeddings z = phi(x), theta(x), both [n, half]
  std::vector<double> z(static_cast<size_t>(n * half)), th(z.size());
  for (int64_t p = 0; p < n; ++p)
    for (int64_t o = 0; o < half; ++o) {
      double az = 0.0, at = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        double xv = x.value().at({0, c, p / W, p % W});
        az += nl.w_phi.value().at({o, c}) * xv;
        at += nl.w_theta.value().at({o, c}) * xv;
      }
      z[static_cast<size_t>(p * half + o)] = az;
      th[static_cast<size_t>(p * half + o)] = at;
    }
  // Wq = scale^-1 * Theta * Z^-1 so that scale * Wq z_p = theta_p
  std::vector<double> zt(16);  // Z^T as a matrix whose columns are z_p
  for (int64_t p = 0; p < n; ++p)
    for (int64_t o = 0; o < half; ++o) zt[static_cast<size_t>(o * 4 + p)] = z[static_cast<size_t>(p * half + o)];
  std::vector<double> zinv = invert4(zt);
  MHSAConfig cfg{.d_model = static_cast<int>(half), .heads = 1, .fm_h = static_cast<int>(H),
                 .fm_w = static_cast<int>(W), .pos_mode = PosMode::none};
  std::vector<double> theta_mat(16);  // rows o of theta as matrix with columns p
  for (int64_t p = 0; p < n; ++p)
    for (int64_t o = 0; o < half; ++o)
      theta_mat[static_cast<size_t>(o * 4 + p)] = th[static_cast<size_t>(p * half + o)];
  std::vector<double> wq(16, 0.0);
  double inv_scale = 1.0 / cfg.logit_scale();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        acc += theta_mat[static_cast<size_t>(i * 4 + k)] * zinv[static_cast<size_t>(k * 4 + j)];
      wq[static_cast<size_t>(i * 4 + j)] = inv_scale * acc;
    }
  MHSAParams mp;
  mp.wq = Var(Tensor::from_data({half, half}, wq));
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[static_cast<size_t>(i * 4 + i)] = 1.0;
  mp.wk = Var(Tensor::from_data({half, half}, eye));
  mp.wv = Var(Tensor::from_data({half, half}, eye));

  Var zin(Tensor::zeros({1, half, H, W}));
  for (int64_t o = 0; o < half; ++o)
    for (int64_t p = 0; p < n; ++p)
      zin.node()->value.mutable_data()[o * n + p] = z[static_cast<size_t>(p * half + o)];
  Tensor attn_out = mhsa2d(zin, mp, cfg).value();  // [1, half, H, W] = A phi

  // external Wz + residual
  Tensor rebuilt = Tensor::zeros({1, C, H, W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t p = 0; p < n; ++p) {
      double acc = x.value().at({0, c, p / W, p % W});
      for (int64_t o = 0; o < half; ++o)
        acc += nl.w_z.value().at({c, o}) * attn_out.at({0, o, p / W, p % W});
      rebuilt.mutable_data()[c * n + p] = acc;
    }
  return max_abs_diff(ref, rebuilt);
}

void suite_oracle(VerifyReport& r, uint64_t seed) {
  {
    Tensor a = rand_normal(seed, "vo.mm.a", {7, 5}), b = rand_normal(seed, "vo.mm.b", {5, 4});
    add_row(r, "oracle.matmul", max_abs_diff(kernels::matmul(a, b), oracles::matmul(a, b)), 1e-14);
  }
  {
    Tensor x = rand_normal(seed, "vo.cv.x", {2, 4, 5, 5});
    Tensor w = rand_normal(seed, "vo.cv.w", {6, 4, 3, 3});
    add_row(r, "oracle.conv2d",
            max_abs_diff(kernels::conv2d(x, w, 1, 1), oracles::conv2d(x, w, 1, 1)), 1e-13);
  }
  {
    Tensor x = rand_normal(seed, "vo.bn.x", {2, 5, 3, 4});
    Tensor g = rand_normal(seed, "vo.bn.g", {5}), b = rand_normal(seed, "vo.bn.b", {5});
    Tensor m = rand_normal(seed, "vo.bn.m", {5});
    Tensor v = CounterRng(seed, "vo.bn.v").uniform_tensor({5}, 0.5, 2.0);
    add_row(r, "oracle.batchnorm",
            max_abs_diff(kernels::batchnorm_affine(x, g, b, m, v, 1e-5),
                         oracles::batchnorm_affine(x, g, b, m, v, 1e-5)),
            1e-13);
  }
  {
    Tensor x = rand_normal(seed, "vo.gap.x", {2, 5, 3, 4});
    add_row(r, "oracle.global_avg_pool",
            max_abs_diff(kernels::global_avg_pool(x), oracles::global_avg_pool(x)), 1e-14);
  }
  {
    Tensor x = rand_normal(seed, "vo.sm.x", {3, 7, 9});
    add_row(r, "oracle.softmax",
            max_abs_diff(kernels::softmax_lastdim(x), oracles::softmax_lastdim(x)), 1e-13);
  }
  {
    double worst = 0.0;
    for (int64_t H = 1; H <= 6; ++H)
      for (int64_t W = 1; W <= 6; ++W) {
        int64_t d = 3;
        Tensor q = rand_normal(seed + static_cast<uint64_t>(H * 16 + W), "vo.rel.q", {2, H * W, d});
        Tensor rh = rand_normal(seed, "vo.rel.rh", {2 * H - 1, d});
        Tensor rw = rand_normal(seed, "vo.rel.rw", {2 * W - 1, d});
        Tensor got = relative_logits_2d(Var(q), Var(rh), Var(rw), H, W).value();
        worst = std::max(worst, max_abs_diff(got, oracles::relative_logits_pairs(q, rh, rw, H, W)));
      }
    add_row(r, "oracle.relative_logits", worst, 1e-12);
  }
  {
    Tensor q = rand_normal(seed, "vo.abs.q", {2, 6, 3});
    Tensor t = rand_normal(seed, "vo.abs.t", {6, 3});
    add_row(r, "oracle.absolute_logits",
            max_abs_diff(absolute_logits(Var(q), Var(t)).value(),
                         oracles::absolute_logits_pairs(q, t)),
            1e-12);
  }
  {
    MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 3, .fm_w = 3, .pos_mode = PosMode::relative};
    MHSAParams p = MHSAParams::init(cfg, seed, "vo.mh1.", DType::f64);
    Tensor x = rand_normal(seed, "vo.mh1.x", {1, 8, 3, 3});
    Tensor naive = oracles::mhsa2d_naive(x, p.wq.value(), p.wk.value(), p.wv.value(),
                                         p.r_h.value(), p.r_w.value(), Tensor(), cfg);
    add_row(r, "oracle.mhsa2d.small", max_abs_diff(mhsa2d(Var(x), p, cfg).value(), naive), 1e-11);
  }
  {
    MHSAConfig cfg{.d_model = 8, .heads = 4, .fm_h = 4, .fm_w = 5, .pos_mode = PosMode::relative};
    MHSAParams p = MHSAParams::init(cfg, seed, "vo.mh2.", DType::f64);
    Tensor x = rand_normal(seed, "vo.mh2.x", {2, 8, 4, 5});
    Tensor naive = oracles::mhsa2d_naive(x, p.wq.value(), p.wk.value(), p.wv.value(),
                                         p.r_h.value(), p.r_w.value(), Tensor(), cfg);
    add_row(r, "oracle.mhsa2d", max_abs_diff(mhsa2d(Var(x), p, cfg).value(), naive), 1e-11);
  }
  add_row(r, "oracle.nonlocal_equivalence", nonlocal_equivalence(seed), 1e-11);
}

void suite_invariants(VerifyReport& r, uint64_t seed) {
  {
    Tensor x = rand_normal(seed, "vi.sm.x", {3, 7, 9});
    Tensor s = kernels::softmax_lastdim(x);
    double worst = 0.0;
    for (int64_t row = 0; row < 21; ++row) {
      double sum = 0.0;
      for (int64_t j = 0; j < 9; ++j) sum += s.data()[row * 9 + j];
      worst = std::max(worst, std::abs(sum - 1.0));
    }
    add_row(r, "invariants.softmax_rows_sum_1", worst, 1e-9);
  }
  {
    // permutation equivariance of position-free attention
    MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 2, .fm_w = 3, .pos_mode = PosMode::none};
    MHSAParams p = MHSAParams::init(cfg, seed, "vi.pe.", DType::f64);
    Tensor x = rand_normal(seed, "vi.pe.x", {1, 8, 2, 3});
    Tensor y = mhsa2d(Var(x), p, cfg).value();
    const int64_t n = 6, C = 8;
    CounterRng rng(seed, "vi.pe.perm");
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<int64_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      for (int64_t i = n - 1; i > 0; --i) {
        auto j = static_cast<int64_t>(
            rng.uniform(static_cast<uint64_t>(rep * 16 + i)) * static_cast<double>(i + 1));
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
      }
      Tensor xp = Tensor::zeros(x.shape());
      for (int64_t c = 0; c < C; ++c)
        for (int64_t pos = 0; pos < n; ++pos)
          xp.mutable_data()[c * n + pos] = x.data()[c * n + perm[static_cast<size_t>(pos)]];
      Tensor yp = mhsa2d(Var(xp), p, cfg).value();
      for (int64_t c = 0; c < C; ++c)
        for (int64_t pos = 0; pos < n; ++pos)
          worst = std::max(worst, std::abs(yp.data()[c * n + pos] -
                                           y.data()[c * n + perm[static_cast<size_t>(pos)]]));
    }
    add_row(r, "invariants.permutation_equivariance", worst, 1e-9);
  }
  {
    // zero relative tables reduce relative mode to none mode exactly
    MHSAConfig rel{.d_model = 8, .heads = 2, .fm_h = 3, .fm_w = 2, .pos_mode = PosMode::relative};
    MHSAConfig none = rel;
    none.pos_mode = PosMode::none;
    MHSAParams p = MHSAParams::init(rel, seed, "vi.z.", DType::f64);
    p.r_h = Var(Tensor::zeros(p.r_h.value().shape()));
    p.r_w = Var(Tensor::zeros(p.r_w.value().shape()));
    Tensor x = rand_normal(seed, "vi.z.x", {1, 8, 3, 2});
    Tensor a = mhsa2d(Var(x), p, rel).value();
    Tensor b = mhsa2d(Var(x), p, none).value();
    add_row(r, "invariants.zero_rel_equals_none", max_abs_diff(a, b), 0.0);
  }
  {
    // replacement [0,0,0] is a plain resnet
    ArchSpec bot = build_backbone(Family::botnet, "50", ReplacementConfig{{0, 0, 0}, {}},
                                  224, 224);
    ArchSpec res = build_backbone(Family::resnet, "50", {}, 224, 224);
    bool same_params = count_params(bot).totals().params == count_params(res).totals().params;
    bool same_shapes = stage_shapes(bot) == stage_shapes(res);
    add_row(r, "invariants.replacement_zero_is_resnet", (same_params && same_shapes) ? 0.0 : 1.0,
            0.0);
  }
  {
    // single-position featuremap: attention is the identity mixing, out = Wv x
    MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 1, .fm_w = 1, .pos_mode = PosMode::relative};
    MHSAParams p = MHSAParams::init(cfg, seed, "vi.sp.", DType::f64);
    Tensor x = rand_normal(seed, "vi.sp.x", {1, 8, 1, 1});
    Tensor y = mhsa2d(Var(x), p, cfg).value();
    Tensor expect = Tensor::zeros({1, 8, 1, 1});
    for (int64_t o = 0; o < 8; ++o) {
      double acc = 0.0;
      for (int64_t c = 0; c < 8; ++c) acc += p.wv.value().at({o, c}) * x.at({0, c, 0, 0});
      expect.mutable_data()[o] = acc;
    }
    add_row(r, "invariants.single_position_is_wv", max_abs_diff(y, expect), 1e-12);
  }
  {
    Tensor x = rand_normal(seed, "vi.nan.x", {1, 2, 2, 2});
    x.mutable_data()[3] = std::nan("");
    Tensor g = Tensor::full({2}, 1.0), b = Tensor::zeros({2});
    Tensor m = Tensor::zeros({2}), v = Tensor::full({2}, 1.0);
    Tensor y = kernels::batchnorm_affine(x, g, b, m, v, 1e-5);
    bool has_nan = false;
    for (int64_t i = 0; i < y.numel(); ++i) has_nan = has_nan || std::isnan(y.data()[i]);
    add_row(r, "invariants.batchnorm_nan_propagates", has_nan ? 0.0 : 1.0, 0.0);
  }
}

void suite_cost(VerifyReport& r) {
  ArchSpec r50 = build_backbone(Family::resnet, "50", {}, 224, 224);
  ArchSpec b50 = build_backbone(Family::botnet, "50", {}, 224, 224);
  ArchSpec s50 = build_backbone(Family::botnet_s1, "50", {}, 224, 224);

  auto params = [](const ArchSpec& a) { return static_cast<double>(count_params(a).totals().params); };
  auto madds = [](const ArchSpec& a, int res) {
    return static_cast<double>(count_madds(a, res).totals().madds);
  };

  add_row(r, "cost.resnet50.params", rel_to(params(r50), 25.5e6), 0.01);
  add_row(r, "cost.botnet50.params", rel_to(params(b50), 20.8e6), 0.01);
  {
    bool ok = true;
    for (const char* depth : {"50", "101", "152"}) {
      ArchSpec cr = build_backbone(Family::resnet, depth, {}, 224, 224);
      ArchSpec cb = build_backbone(Family::botnet, depth, {}, 224, 224);
      ok = ok && params(cb) < params(cr);
    }
    add_row(r, "cost.bot_params_strictly_smaller", ok ? 0.0 : 1.0, 0.0);
  }
  add_row(r, "cost.resnet50.madds224", rel_to(madds(r50, 224), 3.86e9), 0.10);
  add_row(r, "cost.botnet50.madds224", rel_to(madds(b50, 224), 3.79e9), 0.10);
  add_row(r, "cost.ordering224",
          (madds(b50, 224) < madds(r50, 224) && madds(r50, 224) < madds(s50, 224)) ? 0.0 : 1.0,
          0.0);
  add_row(r, "cost.resnet50.madds1024", rel_to(madds(r50, 1024), 85.4e9), 0.10);
  add_row(r, "cost.botnet50.madds1024", rel_to(madds(b50, 1024), 102.98e9), 0.10);
  add_row(r, "cost.delta1024", rel_to(madds(b50, 1024) - madds(r50, 1024), 17.58e9), 0.10);
}

}  // namespace

bool VerifyReport::pass() const {
  for (const CheckRow& row : rows)
    if (!row.passed) return false;
  return true;
}

std::string VerifyReport::to_json_string(int indent) const {
  json j;
  j["suite"] = suite;
  j["seed"] = seed;
  j["pass"] = pass();
  json rows_json = json::array();
  for (const CheckRow& row : rows) {
    rows_json.push_back({{"name", row.name},
                         {"status", row.passed ? "pass" : "fail"},
                         {"measured", row.measured},
                         {"threshold", row.threshold}});
  }
  j["rows"] = rows_json;
  return j.dump(indent);
}

VerifyReport run_verify_suite(const std::string& suite, uint64_t seed) {
  VerifyReport report;
  report.suite = suite;
  report.seed = seed;
  if (suite == "grad") {
    suite_grad(report, seed);
  } else if (suite == "oracle") {
    suite_oracle(report, seed);
  } else if (suite == "invariants") {
    suite_invariants(report, seed);
  } else if (suite == "cost") {
    suite_cost(report);
  } else if (suite == "all") {
    suite_grad(report, seed);
    suite_oracle(report, seed);
    suite_invariants(report, seed);
    suite_cost(report);
  } else {
    throw ConfigError("unknown verify suite: " + suite +
                      " (expected grad, oracle, invariants, cost, all)");
  }
  return report;
}

}  // namespace botkit
