#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "botkit/autodiff.hpp"
#include "botkit/ops.hpp"
#include "botkit/rng.hpp"

namespace botkit {

enum class PosMode { relative, absolute, none };

const char* pos_mode_name(PosMode m);
PosMode pos_mode_from_name(const std::string& s);

struct MHSAConfig {
  int d_model = 0;
  int heads = 4;
  int fm_h = 0;
  int fm_w = 0;
  PosMode pos_mode = PosMode::relative;

  int d_head() const { return d_model / heads; }
  // Query scale d_head^(-1/2), applied once so it affects both the
  // content-content and content-position logits.
  double logit_scale() const;
  int64_t positions() const { return static_cast<int64_t>(fm_h) * fm_w; }
  void validate() const;
};

// Projection matrices plus position tables. There is intentionally no output
// projection. R_h/R_w are shared across heads with embedding dim d_head;
// the absolute table has one d_head row per spatial position.
struct MHSAParams {
  Var wq, wk, wv;  // [d_model, d_model]
  Var r_h;         // [2*fm_h-1, d_head]
  Var r_w;         // [2*fm_w-1, d_head]
  Var p_abs;       // [fm_h*fm_w, d_head]

  static MHSAParams init(const MHSAConfig& cfg, uint64_t seed, const std::string& prefix,
                         DType dtype = DType::f64, bool requires_grad = false);
  std::vector<std::pair<std::string, Var>> named(const MHSAConfig& cfg) const;
};

// 1x1 projections; positions flattened row-major (p = h*W + w), heads are
// contiguous channel slices. q is pre-scaled by logit_scale.
std::array<Var, 3> project_qkv(const Var& x, const MHSAParams& params, const MHSAConfig& cfg);

// Content-position logits: out[p,p'] = q_p . (R_h[row(p')-row(p)] + R_w[col(p')-col(p)]).
Var relative_logits_2d(const Var& q, const Var& r_h, const Var& r_w, int64_t H, int64_t W);

// out[p,p'] = q_p . abspos[p']
Var absolute_logits(const Var& q, const Var& p_abs);

// softmax(q k^T + position logits) v per head, heads concatenated back to
// d_model channels. No output projection, no residual.
Var mhsa2d(const Var& x, const MHSAParams& params, const MHSAConfig& cfg);

// Non-Local comparison layer: single head, no position encodings, bottleneck
// channel reduction 2; values reuse the phi embedding. Residual inside.
struct NonLocalParams {
  Var w_theta;  // [C/2, C]
  Var w_phi;    // [C/2, C]
  Var w_z;      // [C, C/2]

  static NonLocalParams init(int channels, uint64_t seed, const std::string& prefix,
                             DType dtype = DType::f64, bool requires_grad = false);
  std::vector<std::pair<std::string, Var>> named() const;
};

Var nonlocal_layer(const Var& x, const NonLocalParams& params);

}  // namespace botkit
