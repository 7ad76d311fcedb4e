#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>

#include "botkit/backbone.hpp"
#include "botkit/costmodel.hpp"

using namespace botkit;

TEST_CASE("blockgroup depth tables") {
  CHECK(blockgroups_for(Family::resnet, "50") == std::array<int, 4>{3, 4, 6, 3});
  CHECK(blockgroups_for(Family::resnet, "101") == std::array<int, 4>{3, 4, 23, 3});
  CHECK(blockgroups_for(Family::resnet, "152") == std::array<int, 4>{3, 8, 36, 3});
  CHECK(blockgroups_for(Family::resnet, "200") == std::array<int, 4>{3, 24, 36, 3});
  CHECK(blockgroups_for(Family::botnet_s1, "S1-59") == std::array<int, 4>{3, 4, 6, 6});
  CHECK(blockgroups_for(Family::botnet_s1, "S1-77") == std::array<int, 4>{3, 4, 6, 12});
  CHECK(blockgroups_for(Family::botnet_s1, "S1-110") == std::array<int, 4>{3, 4, 23, 6});
  CHECK(blockgroups_for(Family::botnet_s1, "S1-128") == std::array<int, 4>{3, 4, 23, 12});
  CHECK(blockgroups_for(Family::senet, "350") == std::array<int, 4>{4, 40, 60, 12});
  CHECK_THROWS_AS(blockgroups_for(Family::resnet, "51"), ConfigError);
}

TEST_CASE("botnet-50 at 1024 puts MHSA at 64x64 then 32x32") {
  ArchSpec arch = build_backbone(Family::botnet, "50", {}, 1024, 1024);
  const auto& c5 = arch.groups[3];
  REQUIRE(c5.size() == 3);
  for (const BlockSpec& b : c5) CHECK(b.kind == BlockKind::bot);
  CHECK(c5[0].attention->fm_h == 64);
  CHECK(c5[0].attention->fm_w == 64);
  CHECK(c5[0].stride == 2);
  CHECK(c5[1].attention->fm_h == 32);
  CHECK(c5[2].attention->fm_h == 32);
  CHECK(c5[0].attention->heads == 4);
  CHECK(c5[0].attention->d_model == 512);
}

TEST_CASE("empty replacement config is a plain resnet") {
  ArchSpec bot = build_backbone(Family::botnet, "50", ReplacementConfig{{0, 0, 0}, {}}, 1024, 1024);
  ArchSpec res = build_backbone(Family::resnet, "50", {}, 1024, 1024);
  CHECK(count_params(bot).totals().params == count_params(res).totals().params);
  CHECK(stage_shapes(bot) == stage_shapes(res));
  for (const BlockSpec& b : bot.groups[3]) CHECK(b.kind == BlockKind::conv_bottleneck);
}

TEST_CASE("botnet_s1 keeps c5 at stride 1 and sizes tables from c4 output") {
  ArchSpec s59 = build_backbone(Family::botnet_s1, "S1-59", {}, 224, 224);
  CHECK(s59.blockgroups == std::array<int, 4>{3, 4, 6, 6});
  for (const BlockSpec& b : s59.groups[3]) {
    CHECK(b.stride == 1);
    CHECK(b.attention->fm_h == 14);
    CHECK(b.attention->fm_w == 14);
    // (2r-1)-row tables with r = 224/16
    CHECK(2 * b.attention->fm_h - 1 == 27);
  }
  std::vector<StageShape> shapes = stage_shapes(s59);
  CHECK(shapes.back().h == 14);
  CHECK(shapes.back().w == 14);
}

TEST_CASE("builder rejects invalid configurations") {
  CHECK_THROWS_AS(build_backbone(Family::resnet, "50", {}, 200, 200), ConfigError);
  CHECK_THROWS_AS(build_backbone(Family::botnet_s1, "50", ReplacementConfig{{1, 1, 0}, {}},
                                 224, 224),
                  ConfigError);
  CHECK_THROWS_AS(build_backbone(Family::resnet, "50", ReplacementConfig{{1, 0, 0}, {}},
                                 224, 224),
                  ConfigError);
  CHECK_THROWS_AS(build_backbone(Family::botnet, "50", ReplacementConfig{{1, 1}, {}}, 224, 224),
                  ConfigError);
}

TEST_CASE("stage shape inference matches the published output column") {
  ArchSpec r50 = build_backbone(Family::resnet, "50", {}, 1024, 1024);
  std::vector<StageShape> got = stage_shapes(r50);
  std::vector<StageShape> want{{"c1", 512, 512, 64},
                               {"c2", 256, 256, 256},
                               {"c3", 128, 128, 512},
                               {"c4", 64, 64, 1024},
                               {"c5", 32, 32, 2048}};
  CHECK(got == want);

  ArchSpec r224 = build_backbone(Family::resnet, "50", {}, 224, 224);
  CHECK(stage_shapes(r224).back() == StageShape{"c5", 7, 7, 2048});
}

TEST_CASE("forward produces finite logits and matches shape inference") {
  // width-reduced so the executed forward stays fast; shape ratios unchanged
  ArchSpec arch = build_backbone(Family::botnet, "50", {}, 224, 224, 1000, Activation::relu, -1, 8);
  BackboneParams params = BackboneParams::init(arch, 1, DType::f32);
  Tensor x = CounterRng(1, "fw.x").normal_tensor({1, 3, 224, 224}, 1.0, DType::f32);
  std::vector<StageShape> trace;
  Tensor logits = forward_classifier(arch, params, Var(x), &trace).value();
  CHECK(logits.shape() == std::vector<int64_t>{1, 1000});
  for (int64_t i = 0; i < logits.numel(); ++i) CHECK(std::isfinite(logits.data()[i]));
  CHECK(trace == stage_shapes(arch));
}

TEST_CASE("botnet_s1 c5 stays at 14x14 in an executed forward") {
  ArchSpec arch =
      build_backbone(Family::botnet_s1, "50", {}, 224, 224, 10, Activation::relu, -1, 8);
  BackboneParams params = BackboneParams::init(arch, 2, DType::f32);
  Tensor x = CounterRng(2, "fw.s1.x").normal_tensor({1, 3, 224, 224}, 1.0, DType::f32);
  std::vector<StageShape> trace;
  forward_classifier(arch, params, Var(x), &trace);
  CHECK(trace.back().h == 14);
  CHECK(trace.back().w == 14);
}

TEST_CASE("forward rejects mismatched input resolutions") {
  ArchSpec arch = build_backbone(Family::botnet, "50", {}, 224, 224, 10, Activation::relu, -1, 8);
  BackboneParams params = BackboneParams::init(arch, 3, DType::f32);
  Tensor x = Tensor::zeros({1, 3, 256, 256}, DType::f32);
  try {
    forward_classifier(arch, params, Var(x));
    FAIL("expected ResolutionError");
  } catch (const ResolutionError& e) {
    CHECK(std::string(e.what()).find("position encodings") != std::string::npos);
  }
}

TEST_CASE("arch spec JSON round-trips and rejects unknown fields") {
  ArchSpec arch = build_backbone(Family::botnet, "50", ReplacementConfig{{0, 1, 1}, {}}, 224, 224,
                                 100, Activation::silu);
  std::string text = arch.to_json_string();
  ArchSpec back = ArchSpec::from_json_string(text);
  CHECK(back.name == arch.name);
  CHECK(back.family == arch.family);
  CHECK(back.blockgroups == arch.blockgroups);
  CHECK(back.replacement_flags == arch.replacement_flags);
  CHECK(back.input_h == 224);
  CHECK(back.n_classes == 100);
  CHECK(back.act == Activation::silu);
  CHECK(count_params(back).totals().params == count_params(arch).totals().params);

  CHECK_THROWS_AS(ArchSpec::from_json_string(R"({"family":"resnet","blockgroups":[3,4,6,3],
      "input_res":[224,224],"bogus":1})"),
                  ConfigError);
}

TEST_CASE("NL insertion adds parameters, replacement removes them") {
  ArchSpec base = build_backbone(Family::resnet, "50", {}, 224, 224);
  ArchSpec with_nl =
      build_backbone(Family::resnet, "50", ReplacementConfig{{}, {{4, 5}}}, 224, 224);
  CHECK(with_nl.groups[2].size() == base.groups[2].size() + 1);
  CHECK(count_params(with_nl).totals().params > count_params(base).totals().params);

  ArchSpec bot = build_backbone(Family::botnet, "50", {}, 224, 224);
  CHECK(count_params(bot).totals().params < count_params(base).totals().params);
}

TEST_CASE("parameter archives round-trip bit-exactly") {
  ArchSpec arch = build_backbone(Family::botnet, "50", {}, 224, 224, 10, Activation::relu, -1, 8);
  BackboneParams params = BackboneParams::init(arch, 7, DType::f32);
  std::string path = "test_params_tmp.botk";
  params.save(path, arch);
  BackboneParams loaded = BackboneParams::init(arch, 8, DType::f32);
  loaded.load(path, arch);
  auto a = params.named(arch);
  auto b = loaded.named(arch);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.value().bit_equal(b[i].second.value()));
  }
  std::remove(path.c_str());
}

TEST_CASE("forward is bit-identical across thread counts") {
  ArchSpec arch = build_backbone(Family::botnet, "50", {}, 96, 96, 10, Activation::relu, -1, 8);
  BackboneParams params = BackboneParams::init(arch, 9, DType::f32);
  Tensor x = CounterRng(9, "det.x").normal_tensor({1, 3, 96, 96}, 1.0, DType::f32);
  int saved = num_threads();
  set_num_threads(1);
  Tensor y1 = forward_classifier(arch, params, Var(x)).value();
  set_num_threads(4);
  Tensor y4 = forward_classifier(arch, params, Var(x)).value();
  set_num_threads(saved);
  CHECK(y1.bit_equal(y4));
}

TEST_CASE("instantiated parameter tensors agree with the cost model") {
  for (const char* fam : {"resnet", "botnet"}) {
    ArchSpec arch = build_backbone(family_from_name(fam), "50", {}, 224, 224);
    BackboneParams params = BackboneParams::init(arch, 1, DType::f32);
    CHECK(params.total_param_count(arch) ==
          static_cast<int64_t>(count_params(arch).totals().params));
  }
}
