#include "botkit/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "json.hpp"

namespace botkit {

using json = nlohmann::json;

const char* family_name(Family f) {
  switch (f) {
    case Family::resnet: return "resnet";
    case Family::botnet: return "botnet";
    case Family::botnet_s1: return "botnet_s1";
    case Family::senet: return "senet";
  }
  return "?";
}

Family family_from_name(const std::string& s) {
  if (s == "resnet") return Family::resnet;
  if (s == "botnet") return Family::botnet;
  if (s == "botnet_s1") return Family::botnet_s1;
  if (s == "senet") return Family::senet;
  throw ConfigError("unknown family '" + s + "'");
}

int ArchSpec::group_out_channels(int gi) const {
  static constexpr int kOut[4] = {256, 512, 1024, 2048};
  return kOut[gi] / width_div;
}

std::array<int, 4> blockgroups_for(Family family, const std::string& depth_or_name) {
  std::string key = depth_or_name;
  if (key.rfind("S1-", 0) == 0 || key.rfind("s1-", 0) == 0) key = key.substr(3);
  static const std::map<std::string, std::array<int, 4>> kCommon = {
      {"50", {3, 4, 6, 3}}, {"101", {3, 4, 23, 3}}, {"152", {3, 8, 36, 3}},
      {"200", {3, 24, 36, 3}}};
  static const std::map<std::string, std::array<int, 4>> kS1 = {
      {"50", {3, 4, 6, 3}}, {"59", {3, 4, 6, 6}}, {"77", {3, 4, 6, 12}},
      {"110", {3, 4, 23, 6}}, {"128", {3, 4, 23, 12}}};
  if (family == Family::botnet_s1) {
    auto it = kS1.find(key);
    if (it != kS1.end()) return it->second;
  } else {
    auto it = kCommon.find(key);
    if (it != kCommon.end()) return it->second;
    if (family == Family::senet && key == "350") return {4, 40, 60, 12};
  }
  throw ConfigError("unknown depth '" + depth_or_name + "' for family " +
                    family_name(family));
}

void elaborate(ArchSpec& arch) {
  if (arch.input_h % 32 != 0 || arch.input_w % 32 != 0) {
    throw ConfigError("input resolution " + std::to_string(arch.input_h) + "x" +
                      std::to_string(arch.input_w) + " must be divisible by 32");
  }
  if (arch.width_div < 1 || 64 % arch.width_div != 0) {
    throw ConfigError("width_div must divide the stage widths");
  }
  for (int d : arch.blockgroups) {
    if (d < 1) throw ConfigError("block group depths must be >= 1");
  }
  int c5_blocks = arch.blockgroups[3];
  if (arch.replacement_flags.empty()) {
    bool attn = arch.family == Family::botnet || arch.family == Family::botnet_s1;
    arch.replacement_flags.assign(static_cast<size_t>(c5_blocks), attn ? 1 : 0);
  }
  if (static_cast<int>(arch.replacement_flags.size()) != c5_blocks) {
    throw ConfigError("replacement config has " + std::to_string(arch.replacement_flags.size()) +
                      " flags for " + std::to_string(c5_blocks) + " c5 blocks");
  }
  for (int f : arch.replacement_flags) {
    if (f != 0 && f != 1) throw ConfigError("replacement flags must be 0 or 1");
  }
  if (arch.family == Family::resnet || arch.family == Family::senet) {
    if (std::any_of(arch.replacement_flags.begin(), arch.replacement_flags.end(),
                    [](int f) { return f != 0; })) {
      throw ConfigError("replacement flags require a botnet family");
    }
  }
  if (arch.family == Family::botnet_s1) {
    if (std::any_of(arch.replacement_flags.begin(), arch.replacement_flags.end(),
                    [](int f) { return f != 1; })) {
      throw ConfigError("botnet_s1 requires the all-ones replacement config");
    }
  }

  static constexpr int kMid[4] = {64, 128, 256, 512};
  arch.groups.assign(4, {});
  int h = arch.input_h / 4, w = arch.input_w / 4;  // c2 input resolution
  for (int gi = 0; gi < 4; ++gi) {
    int mid = kMid[gi] / arch.width_div;
    int out = arch.group_out_channels(gi);
    int in = gi == 0 ? arch.stem_channels() : arch.group_out_channels(gi - 1);
    bool s1_group = gi == 3 && arch.family == Family::botnet_s1;
    int first_stride = gi == 0 || s1_group ? 1 : 2;
    for (int bi = 0; bi < arch.blockgroups[static_cast<size_t>(gi)]; ++bi) {
      BlockSpec spec;
      spec.in_channels = bi == 0 ? in : out;
      spec.mid_channels = mid;
      spec.out_channels = out;
      spec.stride = bi == 0 ? first_stride : 1;
      spec.act = arch.act;
      bool replaced = gi == 3 && arch.replacement_flags[static_cast<size_t>(bi)] == 1;
      if (replaced) {
        spec.kind = BlockKind::bot;
        MHSAConfig cfg;
        cfg.d_model = mid;
        cfg.heads = 4;
        // MHSA sees the block's input resolution (the 1x1 reduce is stride 1,
        // and the strided block pools after attention).
        cfg.fm_h = h;
        cfg.fm_w = w;
        cfg.pos_mode = PosMode::relative;
        cfg.validate();
        spec.attention = cfg;
      } else {
        spec.kind = BlockKind::conv_bottleneck;
        if (arch.se_ratio > 0) spec.se_ratio = arch.se_ratio;
      }
      spec.validate();
      arch.groups[static_cast<size_t>(gi)].push_back(spec);
      if (bi == 0) {
        h /= first_stride;
        w /= first_stride;
      }
    }
  }

  for (auto& [gi, pos] : arch.nl_insertions) {
    if (gi < 2 || gi > 5) throw ConfigError("nl insertion group must be in [2,5]");
    auto& group = arch.groups[static_cast<size_t>(gi - 2)];
    int p = pos >= 0 ? pos : static_cast<int>(group.size()) - 1;
    if (p < 1 || p > static_cast<int>(group.size())) {
      throw ConfigError("nl insertion position out of range");
    }
    BlockSpec spec;
    spec.kind = BlockKind::nl_insert;
    spec.in_channels = spec.out_channels = group.front().out_channels;
    spec.mid_channels = spec.in_channels / 2;
    spec.act = arch.act;
    spec.validate();
    group.insert(group.begin() + p, spec);
  }
}

ArchSpec build_backbone(Family family, const std::string& depth_or_name,
                        ReplacementConfig replacement, int input_res_h, int input_res_w,
                        int n_classes, Activation act, int se_ratio, int width_div) {
  ArchSpec arch;
  arch.family = family;
  arch.blockgroups = blockgroups_for(family, depth_or_name);
  arch.replacement_flags = std::move(replacement.flags);
  arch.nl_insertions = std::move(replacement.nl_insertions);
  arch.input_h = input_res_h;
  arch.input_w = input_res_w;
  arch.n_classes = n_classes;
  arch.act = act;
  arch.se_ratio = se_ratio >= 0 ? se_ratio : (family == Family::senet ? 16 : 0);
  arch.width_div = width_div;
  arch.name = std::string(family_name(family)) + "-" + depth_or_name;
  // A botnet with no replacements is structurally a plain resnet; keep the
  // requested family name but allow the all-zero config.
  if (family == Family::botnet &&
      !arch.replacement_flags.empty() &&
      std::all_of(arch.replacement_flags.begin(), arch.replacement_flags.end(),
                  [](int f) { return f == 0; })) {
    arch.family = Family::resnet;
  }
  elaborate(arch);
  return arch;
}

// ---- JSON ----

std::string ArchSpec::to_json_string(int indent) const {
  json j;
  j["name"] = name;
  j["family"] = family_name(family);
  j["blockgroups"] = blockgroups;
  j["replacement_flags"] = replacement_flags;
  j["input_res"] = {input_h, input_w};
  j["n_classes"] = n_classes;
  j["activation"] = activation_name(act);
  if (se_ratio > 0) j["se_ratio"] = se_ratio;
  if (!nl_insertions.empty()) {
    json arr = json::array();
    for (auto& [g, p] : nl_insertions) arr.push_back({g, p});
    j["nl_insertions"] = arr;
  }
  if (width_div != 1) j["width_div"] = width_div;
  return j.dump(indent);
}

ArchSpec ArchSpec::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid arch JSON: ") + e.what());
  }
  static const std::vector<std::string> kKnown = {
      "name", "family", "blockgroups", "replacement_flags", "input_res",
      "n_classes", "activation", "se_ratio", "nl_insertions", "width_div"};
  for (auto& [key, _] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      throw ConfigError("unknown field '" + key + "' in arch JSON");
    }
  }
  ArchSpec arch;
  try {
    arch.name = j.at("name").get<std::string>();
    arch.family = family_from_name(j.at("family").get<std::string>());
    auto bg = j.at("blockgroups").get<std::vector<int>>();
    if (bg.size() != 4) throw ConfigError("blockgroups must list 4 depths");
    std::copy(bg.begin(), bg.end(), arch.blockgroups.begin());
    arch.replacement_flags = j.at("replacement_flags").get<std::vector<int>>();
    if (j.at("input_res").is_array()) {
      auto res = j.at("input_res").get<std::vector<int>>();
      if (res.size() != 2) throw ConfigError("input_res must be [H, W]");
      arch.input_h = res[0];
      arch.input_w = res[1];
    } else {
      arch.input_h = arch.input_w = j.at("input_res").get<int>();
    }
    arch.n_classes = j.at("n_classes").get<int>();
    arch.act = activation_from_name(j.at("activation").get<std::string>());
    if (j.contains("se_ratio")) arch.se_ratio = j.at("se_ratio").get<int>();
    if (j.contains("width_div")) arch.width_div = j.at("width_div").get<int>();
    if (j.contains("nl_insertions")) {
      for (auto& e : j.at("nl_insertions")) {
        arch.nl_insertions.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid arch JSON: ") + e.what());
  }
  elaborate(arch);
  return arch;
}

// ---- parameters ----

BackboneParams BackboneParams::init(const ArchSpec& arch, uint64_t seed, DType dtype,
                                    bool requires_grad) {
  BackboneParams p;
  int64_t stem_c = arch.stem_channels();
  double stem_std = 1.0 / std::sqrt(3.0 * 49.0);
  p.stem.w = Var(CounterRng(seed, "stem.w").normal_tensor({stem_c, 3, 7, 7}, stem_std, dtype),
                 requires_grad);
  p.stem.bn.gamma = Var(Tensor::full({stem_c}, 1.0, dtype), requires_grad);
  p.stem.bn.beta = Var(Tensor::zeros({stem_c}, dtype), requires_grad);
  p.stem.bn.mean = Var(Tensor::zeros({stem_c}, dtype));
  p.stem.bn.variance = Var(Tensor::full({stem_c}, 1.0, dtype));
  for (size_t gi = 0; gi < arch.groups.size(); ++gi) {
    std::vector<BlockParams> group;
    for (size_t bi = 0; bi < arch.groups[gi].size(); ++bi) {
      std::string prefix = "c" + std::to_string(gi + 2) + ".b" + std::to_string(bi);
      group.push_back(BlockParams::init(arch.groups[gi][bi], seed, prefix, dtype, requires_grad));
    }
    p.groups.push_back(std::move(group));
  }
  int64_t c5_out = arch.group_out_channels(3);
  double fc_std = 1.0 / std::sqrt(static_cast<double>(c5_out));
  p.fc_w = Var(CounterRng(seed, "fc.w").normal_tensor({arch.n_classes, c5_out}, fc_std, dtype),
               requires_grad);
  p.fc_b = Var(Tensor::zeros({arch.n_classes}, dtype), requires_grad);
  return p;
}

std::vector<std::pair<std::string, Var>> BackboneParams::named(const ArchSpec& arch) const {
  std::vector<std::pair<std::string, Var>> out;
  out.emplace_back("stem.w", stem.w);
  out.emplace_back("stem.bn.gamma", stem.bn.gamma);
  out.emplace_back("stem.bn.beta", stem.bn.beta);
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    for (size_t bi = 0; bi < groups[gi].size(); ++bi) {
      std::string prefix = "c" + std::to_string(gi + 2) + ".b" + std::to_string(bi) + ".";
      for (auto& [n, v] : groups[gi][bi].named(arch.groups[gi][bi])) {
        out.emplace_back(prefix + n, v);
      }
    }
  }
  out.emplace_back("fc.w", fc_w);
  out.emplace_back("fc.b", fc_b);
  return out;
}

int64_t BackboneParams::total_param_count(const ArchSpec& arch) const {
  int64_t total = 0;
  for (auto& [n, v] : named(arch)) total += v.value().numel();
  return total;
}

void BackboneParams::save(const std::string& path, const ArchSpec& arch) const {
  std::vector<std::pair<std::string, Tensor>> records;
  for (auto& [n, v] : named(arch)) records.emplace_back(n, v.value());
  save_named_tensors(path, records);
}

void BackboneParams::load(const std::string& path, const ArchSpec& arch) {
  std::map<std::string, Tensor> loaded;
  for (auto& [n, t] : load_named_tensors(path)) loaded.emplace(n, t);
  for (auto& [n, v] : named(arch)) {
    auto it = loaded.find(n);
    if (it == loaded.end()) throw IoError("parameter file missing record '" + n + "'");
    if (it->second.shape() != v.value().shape()) {
      throw IoError("parameter '" + n + "' has shape " + it->second.shape_str() + ", expected " +
                    v.value().shape_str());
    }
    const_cast<Var&>(v).set_value(it->second);
  }
}

// ---- forward ----

Var forward_classifier(const ArchSpec& arch, const BackboneParams& params, const Var& x,
                       std::vector<StageShape>* trace) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != 3) {
    throw ShapeError("forward_classifier: expected [N,3,H,W] input, got " + xv.shape_str());
  }
  if (xv.dim(2) != arch.input_h || xv.dim(3) != arch.input_w) {
    throw ResolutionError(
        "input resolution " + std::to_string(xv.dim(2)) + "x" + std::to_string(xv.dim(3)) +
        " does not match the " + std::to_string(arch.input_h) + "x" +
        std::to_string(arch.input_w) +
        " resolution this architecture's position encodings were built for");
  }
  Var y = apply_activation(conv_bn(x, params.stem, 2, 3), arch.act);
  if (trace) {
    trace->push_back({"c1", y.value().dim(2), y.value().dim(3), y.value().dim(1)});
  }
  y = ops::max_pool2d(y);
  for (size_t gi = 0; gi < arch.groups.size(); ++gi) {
    for (size_t bi = 0; bi < arch.groups[gi].size(); ++bi) {
      y = run_block(y, arch.groups[gi][bi], params.groups[gi][bi]);
    }
    if (trace) {
      trace->push_back({"c" + std::to_string(gi + 2), y.value().dim(2), y.value().dim(3),
                        y.value().dim(1)});
    }
  }
  Var pooled = ops::global_avg_pool(y);
  return ops::add_bias_rows(ops::bmm(pooled, params.fc_w, false, true), params.fc_b);
}

std::vector<StageShape> stage_shapes(const ArchSpec& arch) {
  return stage_shapes(arch, arch.input_h, arch.input_w);
}

std::vector<StageShape> stage_shapes(const ArchSpec& arch, int res_h, int res_w) {
  if (res_h % 32 != 0 || res_w % 32 != 0) {
    throw ConfigError("stage_shapes: resolution must be divisible by 32");
  }
  std::vector<StageShape> shapes;
  int64_t h = res_h / 2, w = res_w / 2;
  shapes.push_back({"c1", h, w, arch.stem_channels()});
  h /= 2;
  w /= 2;  // max pool
  for (int gi = 0; gi < 4; ++gi) {
    int stride = arch.groups[static_cast<size_t>(gi)].front().stride;
    h /= stride;
    w /= stride;
    shapes.push_back({"c" + std::to_string(gi + 2), h, w, arch.group_out_channels(gi)});
  }
  return shapes;
}

}  // namespace botkit
