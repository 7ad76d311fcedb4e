#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "botkit/attention.hpp"
#include "botkit/gradcheck.hpp"
#include "botkit/oracles.hpp"
#include "botkit/verify.hpp"

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

Tensor eye(int64_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (int64_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

}  // namespace

TEST_CASE("project_qkv with identity projections scales q") {
  MHSAConfig cfg{.d_model = 4, .heads = 1, .fm_h = 2, .fm_w = 2, .pos_mode = PosMode::none};
  MHSAParams p;
  p.wq = Var(eye(4));
  p.wk = Var(eye(4));
  p.wv = Var(eye(4));
  Tensor x = Tensor::zeros({1, 4, 2, 2});
  x.mutable_data()[2 * 4 + 1] = 1.0;  // channel 2, position (0,1) one-hot
  auto [q, k, v] = project_qkv(Var(x), p, cfg);
  CHECK(q.value().shape() == std::vector<int64_t>{1, 1, 4, 4});
  // position index 1 = row 0, col 1; channel 2
  CHECK(q.value().at({0, 0, 1, 2}) == doctest::Approx(cfg.logit_scale()).epsilon(1e-15));
  CHECK(k.value().at({0, 0, 1, 2}) == 1.0);
  double sum = 0.0;
  for (int64_t i = 0; i < q.value().numel(); ++i) sum += std::abs(q.value().data()[i]);
  CHECK(sum == doctest::Approx(cfg.logit_scale()).epsilon(1e-15));
}

TEST_CASE("project_qkv shapes at c5 geometry") {
  MHSAConfig cfg{.d_model = 512, .heads = 4, .fm_h = 64, .fm_w = 64};
  MHSAParams p = MHSAParams::init(cfg, 1, "t.q5.", DType::f32);
  Tensor x = CounterRng(1, "t.q5.x").normal_tensor({2, 512, 64, 64}, 1.0, DType::f32);
  auto [q, k, v] = project_qkv(Var(x), p, cfg);
  std::vector<int64_t> want{2, 4, 4096, 128};
  CHECK(q.value().shape() == want);
  CHECK(k.value().shape() == want);
  CHECK(v.value().shape() == want);
}

TEST_CASE("project_qkv matches a per-position matrix-vector oracle") {
  MHSAConfig cfg{.d_model = 6, .heads = 2, .fm_h = 2, .fm_w = 3, .pos_mode = PosMode::none};
  MHSAParams p = MHSAParams::init(cfg, 2, "t.qkv.", DType::f64);
  Tensor x = randn(2, "t.qkv.x", {1, 6, 2, 3});
  auto [q, k, v] = project_qkv(Var(x), p, cfg);
  for (int64_t pos = 0; pos < 6; ++pos)
    for (int64_t o = 0; o < 6; ++o) {
      double acc = 0.0;
      for (int64_t c = 0; c < 6; ++c)
        acc += p.wq.value().at({o, c}) * x.at({0, c, pos / 3, pos % 3});
      acc *= cfg.logit_scale();
      CHECK(std::abs(q.value().at({0, o / 3, pos, o % 3}) - acc) < 1e-13);
    }
}

TEST_CASE("project_qkv raises a resolution error on featuremap mismatch") {
  MHSAConfig cfg{.d_model = 4, .heads = 1, .fm_h = 2, .fm_w = 2};
  MHSAParams p = MHSAParams::init(cfg, 3, "t.res.", DType::f64);
  Tensor x = Tensor::zeros({1, 4, 4, 4});
  CHECK_THROWS_AS(project_qkv(Var(x), p, cfg), ResolutionError);
}

TEST_CASE("relative_logits_2d trivial cases") {
  // H=W=1: single logit q . (R_h[0] + R_w[0])
  Tensor q = randn(4, "t.rl.q", {1, 1, 3});
  Tensor rh = randn(4, "t.rl.rh", {1, 3});
  Tensor rw = randn(4, "t.rl.rw", {1, 3});
  Tensor out = relative_logits_2d(Var(q), Var(rh), Var(rw), 1, 1).value();
  double expect = 0.0;
  for (int64_t c = 0; c < 3; ++c)
    expect += q.at({0, 0, c}) * (rh.at({0, c}) + rw.at({0, c}));
  CHECK(out.item() == doctest::Approx(expect).epsilon(1e-14));

  // zero tables -> zero logits
  Tensor q2 = randn(4, "t.rl.q2", {1, 6, 3});
  Tensor z = relative_logits_2d(Var(q2), Var(Tensor::zeros({3, 3})), Var(Tensor::zeros({5, 3})),
                                2, 3).value();
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("relative_logits_2d equals the all-pairs oracle for H,W <= 6") {
  for (int64_t H = 1; H <= 6; ++H)
    for (int64_t W = 1; W <= 6; ++W) {
      Tensor q = randn(static_cast<uint64_t>(10 + H * 8 + W), "t.rl.sweep", {2, H * W, 4});
      Tensor rh = randn(5, "t.rl.sh", {2 * H - 1, 4});
      Tensor rw = randn(5, "t.rl.sw", {2 * W - 1, 4});
      Tensor got = relative_logits_2d(Var(q), Var(rh), Var(rw), H, W).value();
      CHECK(max_abs_diff(got, oracles::relative_logits_pairs(q, rh, rw, H, W)) < 1e-12);
    }
}

TEST_CASE("relative_logits_2d rejects mis-sized tables") {
  Tensor q = Tensor::zeros({1, 6, 4});
  CHECK_THROWS_AS(
      relative_logits_2d(Var(q), Var(Tensor::zeros({4, 4})), Var(Tensor::zeros({5, 4})), 2, 3),
      ConfigError);
}

TEST_CASE("absolute_logits trivial cases and oracle") {
  Tensor q = randn(6, "t.al.q", {1, 4, 1});
  Tensor zero = Tensor::zeros({4, 1});
  Tensor z = absolute_logits(Var(q), Var(zero)).value();
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(z.data()[i] == 0.0);

  // d_head=1, q=1 everywhere: each row equals the table transposed
  Tensor ones = Tensor::full({1, 4, 1}, 1.0);
  Tensor tab = randn(6, "t.al.t", {4, 1});
  Tensor rows = absolute_logits(Var(ones), Var(tab)).value();
  for (int64_t p = 0; p < 4; ++p)
    for (int64_t pp = 0; pp < 4; ++pp) CHECK(rows.at({0, p, pp}) == tab.at({pp, 0}));

  Tensor qr = randn(6, "t.al.qr", {2, 6, 3});
  Tensor tr = randn(6, "t.al.tr", {6, 3});
  CHECK(max_abs_diff(absolute_logits(Var(qr), Var(tr)).value(),
                     oracles::absolute_logits_pairs(qr, tr)) < 1e-12);

  CHECK_THROWS_AS(absolute_logits(Var(qr), Var(Tensor::zeros({5, 3}))), ConfigError);
}

TEST_CASE("mhsa2d single position is Wv * x") {
  MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 1, .fm_w = 1, .pos_mode = PosMode::relative};
  MHSAParams p = MHSAParams::init(cfg, 7, "t.sp.", DType::f64);
  Tensor x = randn(7, "t.sp.x", {1, 8, 1, 1});
  Tensor y = mhsa2d(Var(x), p, cfg).value();
  for (int64_t o = 0; o < 8; ++o) {
    double acc = 0.0;
    for (int64_t c = 0; c < 8; ++c) acc += p.wv.value().at({o, c}) * x.at({0, c, 0, 0});
    CHECK(y.at({0, o, 0, 0}) == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("mhsa2d equals the fully naive oracle") {
  for (PosMode mode : {PosMode::relative, PosMode::absolute, PosMode::none}) {
    MHSAConfig small{.d_model = 8, .heads = 2, .fm_h = 3, .fm_w = 3, .pos_mode = mode};
    MHSAParams p = MHSAParams::init(small, 8, "t.nv.", DType::f64);
    Tensor x = randn(8, "t.nv.x", {1, 8, 3, 3});
    Tensor naive = oracles::mhsa2d_naive(
        x, p.wq.value(), p.wk.value(), p.wv.value(),
        mode == PosMode::relative ? p.r_h.value() : Tensor(),
        mode == PosMode::relative ? p.r_w.value() : Tensor(),
        mode == PosMode::absolute ? p.p_abs.value() : Tensor(), small);
    CHECK(max_abs_diff(mhsa2d(Var(x), p, small).value(), naive) < 1e-11);
  }
  MHSAConfig big{.d_model = 8, .heads = 4, .fm_h = 4, .fm_w = 5, .pos_mode = PosMode::relative};
  MHSAParams p = MHSAParams::init(big, 9, "t.nv2.", DType::f64);
  Tensor x = randn(9, "t.nv2.x", {2, 8, 4, 5});
  Tensor naive = oracles::mhsa2d_naive(x, p.wq.value(), p.wk.value(), p.wv.value(), p.r_h.value(),
                                       p.r_w.value(), Tensor(), big);
  CHECK(max_abs_diff(mhsa2d(Var(x), p, big).value(), naive) < 1e-11);
}

TEST_CASE("mhsa2d position-free mode is permutation equivariant") {
  MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 2, .fm_w = 3, .pos_mode = PosMode::none};
  MHSAParams p = MHSAParams::init(cfg, 10, "t.pe.", DType::f64);
  Tensor x = randn(10, "t.pe.x", {1, 8, 2, 3});
  Tensor y = mhsa2d(Var(x), p, cfg).value();
  CounterRng rng(10, "t.pe.perm");
  const int64_t n = 6;
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<int64_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (int64_t i = n - 1; i > 0; --i) {
      auto j = static_cast<int64_t>(rng.uniform(static_cast<uint64_t>(rep * 8 + i)) *
                                    static_cast<double>(i + 1));
      std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }
    Tensor xp = Tensor::zeros(x.shape());
    for (int64_t c = 0; c < 8; ++c)
      for (int64_t pos = 0; pos < n; ++pos)
        xp.mutable_data()[c * n + pos] = x.data()[c * n + perm[static_cast<size_t>(pos)]];
    Tensor yp = mhsa2d(Var(xp), p, cfg).value();
    for (int64_t c = 0; c < 8; ++c)
      for (int64_t pos = 0; pos < n; ++pos)
        CHECK(std::abs(yp.data()[c * n + pos] -
                       y.data()[c * n + perm[static_cast<size_t>(pos)]]) < 1e-9);
  }
}

TEST_CASE("mhsa2d with zero relative tables equals none mode exactly") {
  MHSAConfig rel{.d_model = 8, .heads = 2, .fm_h = 3, .fm_w = 2, .pos_mode = PosMode::relative};
  MHSAConfig none = rel;
  none.pos_mode = PosMode::none;
  MHSAParams p = MHSAParams::init(rel, 11, "t.z.", DType::f64);
  p.r_h = Var(Tensor::zeros(p.r_h.value().shape()));
  p.r_w = Var(Tensor::zeros(p.r_w.value().shape()));
  Tensor x = randn(11, "t.z.x", {2, 8, 3, 2});
  CHECK(mhsa2d(Var(x), p, rel).value().bit_equal(mhsa2d(Var(x), p, none).value()));
}

TEST_CASE("mhsa2d shape preservation and attention row sums") {
  MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 3, .fm_w = 4, .pos_mode = PosMode::relative};
  MHSAParams p = MHSAParams::init(cfg, 12, "t.shape.", DType::f64);
  Tensor x = randn(12, "t.shape.x", {2, 8, 3, 4});
  CHECK(mhsa2d(Var(x), p, cfg).value().shape() == x.shape());
}

TEST_CASE("logits memory accounting scales as n^2") {
  std::vector<double> per_n2;
  for (int H : {4, 8, 16}) {
    MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = H, .fm_w = H, .pos_mode = PosMode::relative};
    MHSAParams p = MHSAParams::init(cfg, 13, "t.mem.", DType::f64);
    Tensor x = randn(13, "t.mem.x", {1, 8, H, H});
    logit_alloc::reset();
    mhsa2d(Var(x), p, cfg);
    double n2 = std::pow(static_cast<double>(H) * H, 2.0);
    per_n2.push_back(static_cast<double>(logit_alloc::bytes()) / n2);
  }
  for (double v : per_n2) {
    CHECK(v <= per_n2[0] * 1.1);
    CHECK(v >= per_n2[0] / 1.1);
  }
}

TEST_CASE("mhsa2d gradient check in every position mode") {
  for (PosMode mode : {PosMode::relative, PosMode::absolute, PosMode::none}) {
    MHSAConfig cfg{.d_model = 8, .heads = 4, .fm_h = 4, .fm_w = 5, .pos_mode = mode};
    MHSAParams p = MHSAParams::init(cfg, 14, "t.g.", DType::f64, true);
    Var x(randn(14, "t.g.x", {2, 8, 4, 5}), true);
    std::vector<Var> leaves{x};
    for (auto& [n, v] : p.named(cfg)) leaves.push_back(v);
    Var mask(randn(14, "t.g.m", {2, 8, 4, 5}));
    auto fwd = [&](const std::vector<Var>& ls) {
      return ops::sum_all(ops::mul(mhsa2d(ls[0], p, cfg), mask));
    };
    CHECK(grad_check(fwd, leaves).max_rel_err < 1e-6);
  }
}

TEST_CASE("nonlocal_layer trivial cases") {
  NonLocalParams p = NonLocalParams::init(8, 15, "t.nl.", DType::f64);
  // Wz = 0 -> pure residual
  NonLocalParams zeroed = p;
  zeroed.w_z = Var(Tensor::zeros({8, 4}));
  Tensor x = randn(15, "t.nl.x", {1, 8, 2, 2});
  CHECK(max_abs_diff(nonlocal_layer(Var(x), zeroed).value(), x) == 0.0);

  // single position: out = x + Wz phi(x)
  Tensor x1 = randn(15, "t.nl.x1", {1, 8, 1, 1});
  Tensor y1 = nonlocal_layer(Var(x1), p).value();
  for (int64_t c = 0; c < 8; ++c) {
    double acc = x1.at({0, c, 0, 0});
    for (int64_t o = 0; o < 4; ++o) {
      double phi = 0.0;
      for (int64_t ci = 0; ci < 8; ++ci)
        phi += p.w_phi.value().at({o, ci}) * x1.at({0, ci, 0, 0});
      acc += p.w_z.value().at({c, o}) * phi;
    }
    CHECK(y1.at({0, c, 0, 0}) == doctest::Approx(acc).epsilon(1e-12));
  }

  CHECK_THROWS_AS(NonLocalParams::init(7, 1, "odd.", DType::f64), ConfigError);
}

TEST_CASE("nonlocal_layer matches the config-matched MHSA construction") {
  // the structural equivalence lives in the verify suite so the CLI exposes it
  VerifyReport r = run_verify_suite("oracle", 16);
  bool found = false;
  for (const CheckRow& row : r.rows) {
    if (row.name == "oracle.nonlocal_equivalence") {
      found = true;
      CHECK(row.passed);
      CHECK(row.measured < 1e-11);
    }
  }
  CHECK(found);
}

TEST_CASE("parameter record names are stable") {
  MHSAConfig cfg{.d_model = 8, .heads = 2, .fm_h = 2, .fm_w = 2, .pos_mode = PosMode::relative};
  MHSAParams p = MHSAParams::init(cfg, 17, "t.n.", DType::f64);
  auto named = p.named(cfg);
  REQUIRE(named.size() == 5);
  CHECK(named[0].first == "wq");
  CHECK(named[1].first == "wk");
  CHECK(named[2].first == "wv");
  CHECK(named[3].first == "r_h");
  CHECK(named[4].first == "r_w");
  CHECK(named[3].second.value().shape() == std::vector<int64_t>{3, 4});
  CHECK(named[4].second.value().shape() == std::vector<int64_t>{3, 4});

  MHSAConfig abs = cfg;
  abs.pos_mode = PosMode::absolute;
  MHSAParams pa = MHSAParams::init(abs, 17, "t.n.", DType::f64);
  auto named_abs = pa.named(abs);
  REQUIRE(named_abs.size() == 4);
  CHECK(named_abs[3].first == "p_abs");
  CHECK(named_abs[3].second.value().shape() == std::vector<int64_t>{4, 4});
}

TEST_CASE("config validation") {
  MHSAConfig bad{.d_model = 10, .heads = 4, .fm_h = 2, .fm_w = 2};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  MHSAConfig flat{.d_model = 8, .heads = 4, .fm_h = 0, .fm_w = 2};
  CHECK_THROWS_AS(flat.validate(), ConfigError);
}
