#include "botkit/attention.hpp"

#include <cmath>

namespace botkit {

const char* pos_mode_name(PosMode m) {
  switch (m) {
    case PosMode::relative: return "relative";
    case PosMode::absolute: return "absolute";
    case PosMode::none: return "none";
  }
  return "?";
}

PosMode pos_mode_from_name(const std::string& s) {
  if (s == "relative") return PosMode::relative;
  if (s == "absolute") return PosMode::absolute;
  if (s == "none") return PosMode::none;
  throw ConfigError("unknown position mode '" + s + "'");
}

double MHSAConfig::logit_scale() const { return 1.0 / std::sqrt(static_cast<double>(d_head())); }

void MHSAConfig::validate() const {
  if (d_model < 1 || heads < 1 || d_model % heads != 0) {
    throw ConfigError("mhsa: d_model " + std::to_string(d_model) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (fm_h < 1 || fm_w < 1) throw ConfigError("mhsa: featuremap extents must be >= 1");
}

namespace {

void check_tables(const MHSAParams& p, const MHSAConfig& cfg) {
  if (cfg.pos_mode == PosMode::relative) {
    if (!p.r_h.defined() || !p.r_w.defined() ||
        p.r_h.value().dim(0) != 2 * cfg.fm_h - 1 || p.r_w.value().dim(0) != 2 * cfg.fm_w - 1 ||
        p.r_h.value().dim(1) != cfg.d_head() || p.r_w.value().dim(1) != cfg.d_head()) {
      throw ConfigError("mhsa: relative tables must be [2*fm_h-1, d_head] and [2*fm_w-1, d_head]");
    }
  }
  if (cfg.pos_mode == PosMode::absolute) {
    if (!p.p_abs.defined() || p.p_abs.value().dim(0) != cfg.positions() ||
        p.p_abs.value().dim(1) != cfg.d_head()) {
      throw ConfigError("mhsa: absolute table must be [fm_h*fm_w, d_head]");
    }
  }
}

}  // namespace

MHSAParams MHSAParams::init(const MHSAConfig& cfg, uint64_t seed, const std::string& prefix,
                            DType dtype, bool requires_grad) {
  cfg.validate();
  MHSAParams p;
  double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  double table_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_head()));
  int64_t d = cfg.d_model;
  auto mat = [&](const char* name) {
    return Var(CounterRng(seed, prefix + name).normal_tensor({d, d}, proj_std, dtype),
               requires_grad);
  };
  p.wq = mat("wq");
  p.wk = mat("wk");
  p.wv = mat("wv");
  if (cfg.pos_mode == PosMode::relative) {
    p.r_h = Var(CounterRng(seed, prefix + "r_h")
                    .normal_tensor({2 * cfg.fm_h - 1, cfg.d_head()}, table_std, dtype),
                requires_grad);
    p.r_w = Var(CounterRng(seed, prefix + "r_w")
                    .normal_tensor({2 * cfg.fm_w - 1, cfg.d_head()}, table_std, dtype),
                requires_grad);
  } else if (cfg.pos_mode == PosMode::absolute) {
    p.p_abs = Var(CounterRng(seed, prefix + "p_abs")
                      .normal_tensor({cfg.positions(), cfg.d_head()}, table_std, dtype),
                  requires_grad);
  }
  return p;
}

std::vector<std::pair<std::string, Var>> MHSAParams::named(const MHSAConfig& cfg) const {
  std::vector<std::pair<std::string, Var>> out{{"wq", wq}, {"wk", wk}, {"wv", wv}};
  if (cfg.pos_mode == PosMode::relative) {
    out.emplace_back("r_h", r_h);
    out.emplace_back("r_w", r_w);
  } else if (cfg.pos_mode == PosMode::absolute) {
    out.emplace_back("p_abs", p_abs);
  }
  return out;
}

std::array<Var, 3> project_qkv(const Var& x, const MHSAParams& params, const MHSAConfig& cfg) {
  cfg.validate();
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != cfg.d_model) {
    throw ConfigError("mhsa: input " + xv.shape_str() + " does not carry d_model=" +
                      std::to_string(cfg.d_model) + " channels");
  }
  if (xv.dim(2) != cfg.fm_h || xv.dim(3) != cfg.fm_w) {
    throw ResolutionError("mhsa: input featuremap " + std::to_string(xv.dim(2)) + "x" +
                          std::to_string(xv.dim(3)) + " does not match the " +
                          std::to_string(cfg.fm_h) + "x" + std::to_string(cfg.fm_w) +
                          " resolution the position encodings were built for");
  }
  int64_t N = xv.dim(0), d = cfg.d_model, n = cfg.positions();
  int64_t heads = cfg.heads, dh = cfg.d_head();
  // [N,d,H,W] -> [N,n,d] rows of per-position channel vectors
  Var flat = ops::transpose_last2(ops::reshape(x, {N, d, n}));
  auto project = [&](const Var& w) {
    Var y = ops::bmm(flat, w, false, true);                    // [N,n,d]
    return ops::swap_dims12(ops::reshape(y, {N, n, heads, dh}));  // [N,heads,n,d_head]
  };
  Var q = ops::scale(project(params.wq), cfg.logit_scale());
  Var k = project(params.wk);
  Var v = project(params.wv);
  return {q, k, v};
}

Var relative_logits_2d(const Var& q, const Var& r_h, const Var& r_w, int64_t H, int64_t W) {
  const Tensor& rh = r_h.value();
  const Tensor& rw = r_w.value();
  if (rh.rank() != 2 || rh.dim(0) != 2 * H - 1 || rw.rank() != 2 || rw.dim(0) != 2 * W - 1) {
    throw ConfigError("relative_logits_2d: tables " + rh.shape_str() + "/" + rw.shape_str() +
                      " do not match featuremap " + std::to_string(H) + "x" + std::to_string(W));
  }
  if (q.value().dim(q.value().rank() - 2) != H * W) {
    throw ConfigError("relative_logits_2d: q rows " + q.value().shape_str() + " != H*W");
  }
  Var qrh = ops::bmm(q, r_h, false, true);  // [..., n, 2H-1]
  Var qrw = ops::bmm(q, r_w, false, true);  // [..., n, 2W-1]
  return ops::rel_gather(qrh, qrw, H, W);
}

Var absolute_logits(const Var& q, const Var& p_abs) {
  if (p_abs.value().rank() != 2 ||
      p_abs.value().dim(0) != q.value().dim(q.value().rank() - 2)) {
    throw ConfigError("absolute_logits: table " + p_abs.value().shape_str() +
                      " must have one row per position");
  }
  return ops::bmm(q, p_abs, false, true);
}

Var mhsa2d(const Var& x, const MHSAParams& params, const MHSAConfig& cfg) {
  check_tables(params, cfg);
  auto [q, k, v] = project_qkv(x, params, cfg);
  int64_t N = x.value().dim(0), n = cfg.positions();
  Var logits = ops::bmm(q, k, false, true);  // [N,heads,n,n]
  logit_alloc::add(static_cast<uint64_t>(logits.value().numel()) * sizeof(double));
  if (cfg.pos_mode == PosMode::relative) {
    Var rel = relative_logits_2d(q, params.r_h, params.r_w, cfg.fm_h, cfg.fm_w);
    logit_alloc::add(static_cast<uint64_t>(rel.value().numel()) * sizeof(double));
    logits = ops::add(logits, rel);
    logit_alloc::add(static_cast<uint64_t>(logits.value().numel()) * sizeof(double));
  } else if (cfg.pos_mode == PosMode::absolute) {
    Var abs = absolute_logits(q, params.p_abs);
    logit_alloc::add(static_cast<uint64_t>(abs.value().numel()) * sizeof(double));
    logits = ops::add(logits, abs);
    logit_alloc::add(static_cast<uint64_t>(logits.value().numel()) * sizeof(double));
  }
  Var attn = ops::softmax_lastdim(logits);
  logit_alloc::add(static_cast<uint64_t>(attn.value().numel()) * sizeof(double));
  Var y = ops::bmm(attn, v);  // [N,heads,n,d_head]
  // heads back to contiguous channels: [N,heads,d_head,n] -> [N,d,H,W]
  return ops::reshape(ops::transpose_last2(y), {N, cfg.d_model, cfg.fm_h, cfg.fm_w});
}

NonLocalParams NonLocalParams::init(int channels, uint64_t seed, const std::string& prefix,
                                    DType dtype, bool requires_grad) {
  if (channels % 2 != 0) throw ConfigError("nonlocal: channel count must be even");
  NonLocalParams p;
  int64_t c = channels, half = channels / 2;
  double std_in = 1.0 / std::sqrt(static_cast<double>(c));
  double std_half = 1.0 / std::sqrt(static_cast<double>(half));
  p.w_theta = Var(CounterRng(seed, prefix + "w_theta").normal_tensor({half, c}, std_in, dtype),
                  requires_grad);
  p.w_phi = Var(CounterRng(seed, prefix + "w_phi").normal_tensor({half, c}, std_in, dtype),
                requires_grad);
  p.w_z = Var(CounterRng(seed, prefix + "w_z").normal_tensor({c, half}, std_half, dtype),
              requires_grad);
  return p;
}

std::vector<std::pair<std::string, Var>> NonLocalParams::named() const {
  return {{"w_theta", w_theta}, {"w_phi", w_phi}, {"w_z", w_z}};
}

Var nonlocal_layer(const Var& x, const NonLocalParams& params) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("nonlocal_layer: expected NCHW input");
  int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (C % 2 != 0) throw ConfigError("nonlocal_layer: channel count must be even");
  if (params.w_theta.value().dim(1) != C) {
    throw ConfigError("nonlocal_layer: params built for " +
                      std::to_string(params.w_theta.value().dim(1)) + " channels, input has " +
                      std::to_string(C));
  }
  int64_t n = H * W;
  Var flat = ops::transpose_last2(ops::reshape(x, {N, C, n}));   // [N,n,C]
  Var theta = ops::bmm(flat, params.w_theta, false, true);       // [N,n,C/2]
  Var phi = ops::bmm(flat, params.w_phi, false, true);           // [N,n,C/2]
  Var attn = ops::softmax_lastdim(ops::bmm(theta, phi, false, true));  // [N,n,n]
  Var y = ops::bmm(attn, phi);                                   // values reuse phi
  Var z = ops::bmm(y, params.w_z, false, true);                  // [N,n,C]
  Var z_map = ops::reshape(ops::transpose_last2(z), {N, C, H, W});
  return ops::add(x, z_map);
}

}  // namespace botkit
