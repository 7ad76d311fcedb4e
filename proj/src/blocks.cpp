#include "botkit/blocks.hpp"

#include <cmath>

namespace botkit {

const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "silu"; }

Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + s + "'");
}

Var apply_activation(const Var& x, Activation a) {
  return a == Activation::relu ? ops::relu(x) : ops::silu(x);
}

void BlockSpec::validate() const {
  if (in_channels < 1 || mid_channels < 1 || out_channels < 1) {
    throw ConfigError("block: channel counts must be >= 1");
  }
  if (stride != 1 && stride != 2) throw ConfigError("block: stride must be 1 or 2");
  if (kind == BlockKind::conv_bottleneck || kind == BlockKind::bot) {
    if (out_channels != 4 * mid_channels) {
      throw ConfigError("bottleneck block: out_channels must equal 4*mid_channels, got " +
                        std::to_string(out_channels) + " vs mid " + std::to_string(mid_channels));
    }
  }
  if (kind == BlockKind::bot && !attention.has_value()) {
    throw ConfigError("bot block: attention config required");
  }
  if (kind == BlockKind::nl_insert) {
    if (in_channels != out_channels || in_channels % 2 != 0) {
      throw ConfigError("nl_insert block: requires even, shape-preserving channel count");
    }
    if (stride != 1) throw ConfigError("nl_insert block: stride must be 1");
  }
  if (se_ratio < 0) throw ConfigError("block: se_ratio must be >= 0");
  if (kind == BlockKind::bot && se_ratio != 0) {
    throw ConfigError("SE gates attach to convolutional bottleneck blocks only");
  }
}

namespace {

BNParams init_bn(int64_t channels, DType dtype, bool requires_grad) {
  BNParams bn;
  bn.gamma = Var(Tensor::full({channels}, 1.0, dtype), requires_grad);
  bn.beta = Var(Tensor::zeros({channels}, dtype), requires_grad);
  // Inference-mode statistics are inputs, not trainables.
  bn.mean = Var(Tensor::zeros({channels}, dtype));
  bn.variance = Var(Tensor::full({channels}, 1.0, dtype));
  return bn;
}

ConvBNParams init_conv_bn(int64_t cout, int64_t cin, int64_t k, uint64_t seed,
                          const std::string& name, DType dtype, bool requires_grad) {
  ConvBNParams p;
  double std = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  p.w = Var(CounterRng(seed, name).normal_tensor({cout, cin, k, k}, std, dtype), requires_grad);
  p.bn = init_bn(cout, dtype, requires_grad);
  return p;
}

void push_conv_bn(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix,
                  const ConvBNParams& p) {
  out.emplace_back(prefix + ".w", p.w);
  out.emplace_back(prefix + ".bn.gamma", p.bn.gamma);
  out.emplace_back(prefix + ".bn.beta", p.bn.beta);
}

void push_bn(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix,
             const BNParams& p) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}

}  // namespace

BlockParams BlockParams::init(const BlockSpec& spec, uint64_t seed, const std::string& prefix,
                              DType dtype, bool requires_grad) {
  spec.validate();
  BlockParams p;
  if (spec.kind == BlockKind::nl_insert) {
    p.nl = NonLocalParams::init(spec.in_channels, seed, prefix + ".nl.", dtype, requires_grad);
    return p;
  }
  p.reduce = init_conv_bn(spec.mid_channels, spec.in_channels, 1, seed, prefix + ".reduce.w",
                          dtype, requires_grad);
  if (spec.kind == BlockKind::conv_bottleneck) {
    p.spatial = init_conv_bn(spec.mid_channels, spec.mid_channels, 3, seed, prefix + ".spatial.w",
                             dtype, requires_grad);
    p.mid_bn = p.spatial->bn;
  } else {
    p.attn = MHSAParams::init(*spec.attention, seed, prefix + ".attn.", dtype, requires_grad);
    p.mid_bn = init_bn(spec.mid_channels, dtype, requires_grad);
  }
  p.expand = init_conv_bn(spec.out_channels, spec.mid_channels, 1, seed, prefix + ".expand.w",
                          dtype, requires_grad);
  if (spec.has_shortcut_projection()) {
    p.shortcut = init_conv_bn(spec.out_channels, spec.in_channels, 1, seed, prefix + ".shortcut.w",
                              dtype, requires_grad);
  }
  if (spec.se_ratio > 0) {
    int64_t c = spec.out_channels;
    int64_t cr = std::max<int64_t>(1, c / spec.se_ratio);
    SEParams se;
    se.w1 = Var(CounterRng(seed, prefix + ".se.w1")
                    .normal_tensor({cr, c}, 1.0 / std::sqrt(static_cast<double>(c)), dtype),
                requires_grad);
    se.w2 = Var(CounterRng(seed, prefix + ".se.w2")
                    .normal_tensor({c, cr}, 1.0 / std::sqrt(static_cast<double>(cr)), dtype),
                requires_grad);
    p.se = se;
  }
  return p;
}

std::vector<std::pair<std::string, Var>> BlockParams::named(const BlockSpec& spec) const {
  std::vector<std::pair<std::string, Var>> out;
  if (spec.kind == BlockKind::nl_insert) {
    for (auto& [n, v] : nl->named()) out.emplace_back("nl." + n, v);
    return out;
  }
  push_conv_bn(out, "reduce", reduce);
  if (spec.kind == BlockKind::conv_bottleneck) {
    out.emplace_back("spatial.w", spatial->w);
    push_bn(out, "spatial.bn", mid_bn);
  } else {
    for (auto& [n, v] : attn->named(*spec.attention)) out.emplace_back("attn." + n, v);
    push_bn(out, "attn.bn", mid_bn);
  }
  push_conv_bn(out, "expand", expand);
  if (shortcut) push_conv_bn(out, "shortcut", *shortcut);
  if (se) {
    out.emplace_back("se.w1", se->w1);
    out.emplace_back("se.w2", se->w2);
  }
  return out;
}

std::vector<Var> BlockParams::leaves(const BlockSpec& spec) const {
  std::vector<Var> out;
  for (auto& [n, v] : named(spec)) out.push_back(v);
  return out;
}

Var conv_bn(const Var& x, const ConvBNParams& p, int stride, int pad) {
  Var y = ops::conv2d(x, p.w, stride, pad);
  return ops::batchnorm_affine(y, p.bn.gamma, p.bn.beta, p.bn.mean, p.bn.variance, p.bn.eps);
}

Var se_gate(const Var& x, const SEParams& params, Activation act) {
  Var pooled = ops::global_avg_pool(x);                       // [N,C]
  Var h = apply_activation(ops::bmm(pooled, params.w1, false, true), act);
  Var s = ops::sigmoid(ops::bmm(h, params.w2, false, true));  // [N,C]
  return ops::channel_scale(x, s);
}

namespace {

Var block_shortcut(const Var& x, const BlockSpec& spec, const BlockParams& params) {
  if (!spec.has_shortcut_projection()) return x;
  if (!params.shortcut) throw ConfigError("block: shortcut projection parameters missing");
  return conv_bn(x, *params.shortcut, spec.stride, 0);
}

Var finish_block(const Var& residual, const Var& x, const BlockSpec& spec,
                 const BlockParams& params) {
  Var r = residual;
  if (params.se) r = se_gate(r, *params.se, spec.act);
  return apply_activation(ops::add(r, block_shortcut(x, spec, params)), spec.act);
}

void check_in_channels(const Var& x, const BlockSpec& spec) {
  if (x.value().rank() != 4 || x.value().dim(1) != spec.in_channels) {
    throw ConfigError("block: input " + x.value().shape_str() + " does not carry " +
                      std::to_string(spec.in_channels) + " channels");
  }
}

}  // namespace

Var bottleneck_block(const Var& x, const BlockSpec& spec, const BlockParams& params) {
  spec.validate();
  check_in_channels(x, spec);
  Var r = apply_activation(conv_bn(x, params.reduce, 1, 0), spec.act);
  Var s = ops::conv2d(r, params.spatial->w, spec.stride, 1);
  s = ops::batchnorm_affine(s, params.mid_bn.gamma, params.mid_bn.beta, params.mid_bn.mean,
                            params.mid_bn.variance, params.mid_bn.eps);
  s = apply_activation(s, spec.act);
  Var e = conv_bn(s, params.expand, 1, 0);
  return finish_block(e, x, spec, params);
}

Var bot_block(const Var& x, const BlockSpec& spec, const BlockParams& params) {
  spec.validate();
  check_in_channels(x, spec);
  if (spec.kind != BlockKind::bot) throw ConfigError("bot_block: spec kind is not bot");
  Var r = apply_activation(conv_bn(x, params.reduce, 1, 0), spec.act);
  Var a = mhsa2d(r, *params.attn, *spec.attention);
  if (spec.stride == 2) a = ops::avg_pool2d(a);  // all2all attention is never strided
  a = ops::batchnorm_affine(a, params.mid_bn.gamma, params.mid_bn.beta, params.mid_bn.mean,
                            params.mid_bn.variance, params.mid_bn.eps);
  a = apply_activation(a, spec.act);
  Var e = conv_bn(a, params.expand, 1, 0);
  return finish_block(e, x, spec, params);
}

Var run_block(const Var& x, const BlockSpec& spec, const BlockParams& params) {
  switch (spec.kind) {
    case BlockKind::conv_bottleneck: return bottleneck_block(x, spec, params);
    case BlockKind::bot: return bot_block(x, spec, params);
    case BlockKind::nl_insert: return nonlocal_layer(x, *params.nl);
  }
  throw ConfigError("run_block: unknown block kind");
}

}  // namespace botkit
