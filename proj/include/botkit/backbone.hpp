#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "botkit/blocks.hpp"

namespace botkit {

enum class Family { resnet, botnet, botnet_s1, senet };

const char* family_name(Family f);
Family family_from_name(const std::string& s);

struct ReplacementConfig {
  std::vector<int> flags;                          // one per c5 block; empty = family default
  std::vector<std::pair<int, int>> nl_insertions;  // (group 2..5, position within group)
};

struct StageShape {
  std::string stage;
  int64_t h = 0, w = 0, c = 0;
  bool operator==(const StageShape&) const = default;
};

struct ArchSpec {
  std::string name;
  Family family = Family::resnet;
  std::array<int, 4> blockgroups{};  // c2..c5 depths
  std::vector<int> replacement_flags;
  std::vector<std::pair<int, int>> nl_insertions;
  int input_h = 224, input_w = 224;
  int n_classes = 1000;
  Activation act = Activation::relu;
  int se_ratio = 0;   // applied to conv bottleneck blocks when > 0
  int width_div = 1;  // reduced-width variants for smoke testing

  std::vector<std::vector<BlockSpec>> groups;  // elaborated c2..c5 block specs
  int stem_channels() const { return 64 / width_div; }
  int group_out_channels(int gi) const;  // gi in [0,4)

  std::string to_json_string(int indent = 2) const;
  static ArchSpec from_json_string(const std::string& text);
};

// Known depth tables for the published family configurations.
std::array<int, 4> blockgroups_for(Family family, const std::string& depth_or_name);

ArchSpec build_backbone(Family family, const std::string& depth_or_name,
                        ReplacementConfig replacement, int input_res_h, int input_res_w,
                        int n_classes = 1000, Activation act = Activation::relu,
                        int se_ratio = -1, int width_div = 1);

// Re-derives block specs (strides, attention featuremap sizes) on an already
// populated ArchSpec; build_backbone and JSON loading both end here.
void elaborate(ArchSpec& arch);

struct BackboneParams {
  ConvBNParams stem;
  std::vector<std::vector<BlockParams>> groups;
  Var fc_w;  // [n_classes, c5_out]
  Var fc_b;  // [n_classes]

  static BackboneParams init(const ArchSpec& arch, uint64_t seed, DType dtype = DType::f32,
                             bool requires_grad = false);
  std::vector<std::pair<std::string, Var>> named(const ArchSpec& arch) const;
  int64_t total_param_count(const ArchSpec& arch) const;
  void save(const std::string& path, const ArchSpec& arch) const;
  void load(const std::string& path, const ArchSpec& arch);
};

// stem -> c2..c5 -> global average pool -> fully connected; returns logits.
// When trace is non-null it receives the executed c1..c5 output shapes.
Var forward_classifier(const ArchSpec& arch, const BackboneParams& params, const Var& x,
                       std::vector<StageShape>* trace = nullptr);

// Pure shape inference; must match forward_classifier's executed shapes.
std::vector<StageShape> stage_shapes(const ArchSpec& arch);
std::vector<StageShape> stage_shapes(const ArchSpec& arch, int res_h, int res_w);

}  // namespace botkit
