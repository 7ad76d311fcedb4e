#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "botkit/blocks.hpp"
#include "botkit/gradcheck.hpp"

using namespace botkit;

namespace {

Tensor randn(uint64_t seed, const char* name, std::vector<int64_t> shape) {
  return CounterRng(seed, name).normal_tensor(std::move(shape), 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

BlockSpec conv_spec(int in, int mid, int stride, int se = 0) {
  BlockSpec s;
  s.kind = BlockKind::conv_bottleneck;
  s.in_channels = in;
  s.mid_channels = mid;
  s.out_channels = 4 * mid;
  s.stride = stride;
  s.se_ratio = se;
  return s;
}

BlockSpec bot_spec(int in, int mid, int stride, int fm_h, int fm_w) {
  BlockSpec s;
  s.kind = BlockKind::bot;
  s.in_channels = in;
  s.mid_channels = mid;
  s.out_channels = 4 * mid;
  s.stride = stride;
  s.attention = MHSAConfig{.d_model = mid, .heads = 4, .fm_h = fm_h, .fm_w = fm_w};
  return s;
}

}  // namespace

TEST_CASE("bottleneck zero residual branch reduces to act(shortcut)") {
  BlockSpec spec = conv_spec(16, 4, 1);
  BlockParams p = BlockParams::init(spec, 1, "b.z.", DType::f64);
  p.expand.w = Var(Tensor::zeros(p.expand.w.value().shape()));
  p.expand.bn.beta = Var(Tensor::zeros({16}));
  Tensor x = randn(1, "b.z.x", {1, 16, 4, 4});
  Tensor y = bottleneck_block(Var(x), spec, p).value();
  // in == out and stride 1: shortcut is the identity, so y == relu(x) exactly
  CHECK(y.bit_equal(kernels::relu(x)));
}

TEST_CASE("bottleneck shapes follow the spec") {
  BlockSpec spec = conv_spec(256, 64, 1);
  BlockParams p = BlockParams::init(spec, 2, "b.s.", DType::f32);
  Tensor x = CounterRng(2, "b.s.x").normal_tensor({1, 256, 16, 16}, 1.0, DType::f32);
  CHECK(bottleneck_block(Var(x), spec, p).value().shape() ==
        std::vector<int64_t>{1, 256, 16, 16});

  BlockSpec strided = conv_spec(256, 128, 2);
  BlockParams ps = BlockParams::init(strided, 2, "b.s2.", DType::f32);
  CHECK(bottleneck_block(Var(x), strided, ps).value().shape() ==
        std::vector<int64_t>{1, 512, 8, 8});
}

TEST_CASE("bottleneck equals the composed-op oracle bit for bit") {
  BlockSpec spec = conv_spec(8, 4, 2);
  BlockParams p = BlockParams::init(spec, 3, "b.c.", DType::f64);
  Var x(randn(3, "b.c.x", {2, 8, 6, 6}));
  Tensor got = bottleneck_block(x, spec, p).value();

  auto bn = [](const Var& v, const BNParams& b) {
    return ops::batchnorm_affine(v, b.gamma, b.beta, b.mean, b.variance, b.eps);
  };
  Var r = ops::relu(bn(ops::conv2d(x, p.reduce.w, 1, 0), p.reduce.bn));
  r = ops::relu(bn(ops::conv2d(r, p.spatial->w, 2, 1), p.mid_bn));
  r = bn(ops::conv2d(r, p.expand.w, 1, 0), p.expand.bn);
  Var sc = bn(ops::conv2d(x, p.shortcut->w, 2, 0), p.shortcut->bn);
  Tensor want = ops::relu(ops::add(r, sc)).value();
  CHECK(got.bit_equal(want));
}

TEST_CASE("bot block at a single position equals a conv bottleneck") {
  // at H=W=1 the MHSA output is Wv x, i.e. a 1x1 conv; embed Wv into the
  // 3x3 center of a conv bottleneck and compare
  BlockSpec bspec = bot_spec(16, 4, 1, 1, 1);
  BlockParams bp = BlockParams::init(bspec, 4, "b.e.", DType::f64);
  BlockSpec cspec = conv_spec(16, 4, 1);
  BlockParams cp = BlockParams::init(cspec, 4, "b.e.", DType::f64);  // same seed: same reduce/expand
  Tensor wv = bp.attn->wv.value();
  Tensor center = Tensor::zeros({4, 4, 3, 3});
  for (int64_t o = 0; o < 4; ++o)
    for (int64_t c = 0; c < 4; ++c)
      center.mutable_data()[((o * 4 + c) * 3 + 1) * 3 + 1] = wv.at({o, c});
  cp.spatial->w = Var(center);
  cp.mid_bn = bp.mid_bn;

  Tensor x = randn(4, "b.e.x", {1, 16, 1, 1});
  Tensor yb = bot_block(Var(x), bspec, bp).value();
  Tensor yc = bottleneck_block(Var(x), cspec, cp).value();
  CHECK(max_abs_diff(yb, yc) < 1e-12);
}

TEST_CASE("bot block stride 2 keeps c5 stage geometry") {
  // full d_model with a small featuremap: checks channels x spatial handling
  BlockSpec spec = bot_spec(1024, 512, 2, 8, 8);
  BlockParams p = BlockParams::init(spec, 5, "b.g.", DType::f32);
  Tensor x = CounterRng(5, "b.g.x").normal_tensor({1, 1024, 8, 8}, 1.0, DType::f32);
  CHECK(bot_block(Var(x), spec, p).value().shape() == std::vector<int64_t>{1, 2048, 4, 4});
}

TEST_CASE("bot block zero expand weights reduce to act(projected shortcut)") {
  BlockSpec spec = bot_spec(8, 4, 2, 4, 4);
  BlockParams p = BlockParams::init(spec, 6, "b.zs.", DType::f64);
  p.expand.w = Var(Tensor::zeros(p.expand.w.value().shape()));
  p.expand.bn.beta = Var(Tensor::zeros({16}));
  Tensor x = randn(6, "b.zs.x", {1, 8, 4, 4});
  Tensor y = bot_block(Var(x), spec, p).value();
  Var sc = ops::conv2d(Var(x), p.shortcut->w, 2, 0);
  sc = ops::batchnorm_affine(sc, p.shortcut->bn.gamma, p.shortcut->bn.beta, p.shortcut->bn.mean,
                             p.shortcut->bn.variance, p.shortcut->bn.eps);
  CHECK(y.bit_equal(ops::relu(sc).value()));
}

TEST_CASE("strided bot block equals the explicit op composition") {
  BlockSpec spec = bot_spec(8, 4, 2, 4, 4);
  BlockParams p = BlockParams::init(spec, 7, "b.sc.", DType::f64);
  Var x(randn(7, "b.sc.x", {1, 8, 4, 4}));
  Tensor got = bot_block(x, spec, p).value();

  auto bn = [](const Var& v, const BNParams& b) {
    return ops::batchnorm_affine(v, b.gamma, b.beta, b.mean, b.variance, b.eps);
  };
  Var r = ops::relu(bn(ops::conv2d(x, p.reduce.w, 1, 0), p.reduce.bn));
  r = mhsa2d(r, *p.attn, *spec.attention);   // attention at full resolution
  r = ops::avg_pool2d(r);                    // then the 2x2/2 pool
  r = ops::relu(bn(r, p.mid_bn));
  r = bn(ops::conv2d(r, p.expand.w, 1, 0), p.expand.bn);
  Var sc = bn(ops::conv2d(x, p.shortcut->w, 2, 0), p.shortcut->bn);
  CHECK(got.bit_equal(ops::relu(ops::add(r, sc)).value()));
}

TEST_CASE("se gate hand cases and loop oracle") {
  SEParams p;
  p.w1 = Var(randn(8, "b.se.w1", {2, 8}));
  p.w2 = Var(Tensor::zeros({8, 2}));
  Tensor x = randn(8, "b.se.x", {2, 8, 3, 3});
  // W2 = 0 -> sigmoid(0) = 0.5 everywhere
  Tensor half = se_gate(Var(x), p, Activation::relu).value();
  CHECK(max_abs_diff(half, kernels::scale(x, 0.5)) < 1e-15);

  p.w2 = Var(randn(8, "b.se.w2", {8, 2}));
  Tensor y = se_gate(Var(x), p, Activation::relu).value();
  for (int64_t n = 0; n < 2; ++n) {
    // loop oracle: pooled -> w1 -> relu -> w2 -> sigmoid -> scale
    std::vector<double> pooled(8, 0.0), hcode(2, 0.0), gate(8, 0.0);
    for (int64_t c = 0; c < 8; ++c) {
      for (int64_t i = 0; i < 9; ++i) pooled[static_cast<size_t>(c)] += x.at({n, c, i / 3, i % 3});
      pooled[static_cast<size_t>(c)] /= 9.0;
    }
    for (int64_t o = 0; o < 2; ++o) {
      for (int64_t c = 0; c < 8; ++c)
        hcode[static_cast<size_t>(o)] += p.w1.value().at({o, c}) * pooled[static_cast<size_t>(c)];
      hcode[static_cast<size_t>(o)] = std::max(hcode[static_cast<size_t>(o)], 0.0);
    }
    for (int64_t c = 0; c < 8; ++c) {
      double acc = 0.0;
      for (int64_t o = 0; o < 2; ++o) acc += p.w2.value().at({c, o}) * hcode[static_cast<size_t>(o)];
      gate[static_cast<size_t>(c)] = 1.0 / (1.0 + std::exp(-acc));
    }
    for (int64_t c = 0; c < 8; ++c)
      for (int64_t i = 0; i < 9; ++i)
        CHECK(std::abs(y.at({n, c, i / 3, i % 3}) -
                       x.at({n, c, i / 3, i % 3}) * gate[static_cast<size_t>(c)]) < 1e-12);
  }

  // constant channels: gating equals the gate of the pooled 1x1 tensor
  Tensor xc = Tensor::zeros({1, 8, 2, 2});
  for (int64_t c = 0; c < 8; ++c)
    for (int64_t i = 0; i < 4; ++i) xc.mutable_data()[c * 4 + i] = 0.25 * static_cast<double>(c);
  Tensor x1 = Tensor::zeros({1, 8, 1, 1});
  for (int64_t c = 0; c < 8; ++c) x1.mutable_data()[c] = 0.25 * static_cast<double>(c);
  Tensor yc = se_gate(Var(xc), p, Activation::relu).value();
  Tensor y1 = se_gate(Var(x1), p, Activation::relu).value();
  for (int64_t c = 0; c < 8; ++c)
    CHECK(std::abs(yc.at({0, c, 0, 0}) - y1.at({0, c, 0, 0})) < 1e-12);
}

TEST_CASE("blocks preserve batch, channels, and stride arithmetic") {
  for (int stride : {1, 2}) {
    BlockSpec spec = conv_spec(8, 4, stride);
    BlockParams p = BlockParams::init(spec, 9, "b.inv.", DType::f64);
    Tensor x = randn(9, "b.inv.x", {3, 8, 4, 4});
    Tensor y = run_block(Var(x), spec, p).value();
    CHECK(y.dim(0) == 3);
    CHECK(y.dim(1) == spec.out_channels);
    CHECK(y.dim(2) == 4 / stride);
    CHECK(y.dim(3) == 4 / stride);
  }
}

TEST_CASE("bot block with zero tables and one head is content-only, grads pass") {
  BlockSpec spec = bot_spec(16, 4, 1, 3, 3);
  spec.attention->heads = 1;
  BlockParams p = BlockParams::init(spec, 10, "b.co.", DType::f64, true);
  p.attn->r_h = Var(Tensor::zeros(p.attn->r_h.value().shape()), true);
  p.attn->r_w = Var(Tensor::zeros(p.attn->r_w.value().shape()), true);
  Var x(randn(10, "b.co.x", {1, 16, 3, 3}), true);
  std::vector<Var> leaves{x};
  for (const Var& v : p.leaves(spec))
    if (v.requires_grad()) leaves.push_back(v);
  Var mask(randn(10, "b.co.m", {1, 16, 3, 3}));
  auto fwd = [&](const std::vector<Var>& ls) {
    return ops::sum_all(ops::mul(run_block(ls[0], spec, p), mask));
  };
  CHECK(grad_check(fwd, leaves).max_rel_err < 1e-6);
}

TEST_CASE("spec validation rejects malformed blocks") {
  BlockSpec bad = conv_spec(8, 4, 1);
  bad.out_channels = 12;  // not 4 * mid
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  BlockSpec se_on_bot = bot_spec(8, 4, 1, 2, 2);
  se_on_bot.se_ratio = 16;
  CHECK_THROWS_AS(se_on_bot.validate(), ConfigError);

  BlockSpec nl;
  nl.kind = BlockKind::nl_insert;
  nl.in_channels = 8;
  nl.out_channels = 10;  // must preserve shape
  nl.mid_channels = 4;
  CHECK_THROWS_AS(nl.validate(), ConfigError);
}

TEST_CASE("nl_insert block runs the non-local layer with residual") {
  BlockSpec spec;
  spec.kind = BlockKind::nl_insert;
  spec.in_channels = spec.out_channels = 8;
  spec.mid_channels = 4;
  spec.stride = 1;
  BlockParams p = BlockParams::init(spec, 11, "b.nl.", DType::f64);
  Tensor x = randn(11, "b.nl.x", {1, 8, 2, 2});
  Tensor y = run_block(Var(x), spec, p).value();
  CHECK(y.shape() == x.shape());
  CHECK(y.bit_equal(nonlocal_layer(Var(x), *p.nl).value()));
}
