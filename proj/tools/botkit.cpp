#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "botkit/backbone.hpp"
#include "botkit/costmodel.hpp"
#include "botkit/verify.hpp"
#include "json.hpp"

namespace {

using namespace botkit;
using json = nlohmann::json;

constexpr int kExitInternal = 1;
constexpr int kExitInvalid = 2;

std::vector<int> parse_flags(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item != "0" && item != "1") throw ConfigError("replacement flags must be 0 or 1");
    out.push_back(item == "1");
  }
  return out;
}

std::vector<int64_t> parse_dims(const std::string& spec) {
  std::vector<int64_t> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, 'x')) out.push_back(std::stoll(item));
  if (out.size() != 4) throw ConfigError("expected NxCxHxW, got '" + spec + "'");
  return out;
}

// "family-depth" shorthand (e.g. botnet-50, botnet_s1-50) or a JSON spec file.
ArchSpec resolve_arch(const std::string& spec, int res, const std::string& replacement,
                      int width_div) {
  if (spec.size() > 5 && spec.substr(spec.size() - 5) == ".json") {
    std::ifstream in(spec);
    if (!in) throw IoError("cannot open spec file: " + spec);
    std::stringstream buf;
    buf << in.rdbuf();
    ArchSpec arch = ArchSpec::from_json_string(buf.str());
    if (res > 0 && (res != arch.input_h || res != arch.input_w)) {
      arch.input_h = arch.input_w = res;
      arch.groups.clear();
      elaborate(arch);
    }
    return arch;
  }
  size_t dash = spec.rfind('-');
  if (dash == std::string::npos)
    throw ConfigError("arch spec must be family-depth (e.g. botnet-50) or a .json file");
  Family family = family_from_name(spec.substr(0, dash));
  std::string depth = spec.substr(dash + 1);
  ReplacementConfig rc;
  if (!replacement.empty()) rc.flags = parse_flags(replacement);
  int r = res > 0 ? res : 224;
  return build_backbone(family, depth, rc, r, r, 1000, Activation::relu, -1, width_div);
}

const char* block_label(const BlockSpec& spec) {
  switch (spec.kind) {
    case BlockKind::bot: return "MHSA";
    case BlockKind::nl_insert: return "NL";
    default: return spec.se_ratio > 0 ? "conv3x3+SE" : "conv3x3";
  }
}

void print_describe(const ArchSpec& arch) {
  CostReport cost = cost_report(arch, arch.input_h, arch.input_w);
  std::vector<StageShape> shapes = stage_shapes(arch);
  std::cout << arch.name << " @ " << arch.input_h << "x" << arch.input_w << "  ("
            << kCostConvention << ")\n";
  std::cout << std::left << std::setw(8) << "stage" << std::setw(14) << "output"
            << std::setw(16) << "blocks" << std::right << std::setw(14) << "params"
            << std::setw(16) << "M.Adds" << "\n";
  for (size_t i = 0; i < cost.rows.size(); ++i) {
    const CostRow& row = cost.rows[i];
    std::string out_str = "-", blocks = "-";
    if (row.stage == "head") {
      out_str = "1x1x" + std::to_string(arch.n_classes);
      blocks = "fc";
    } else {
      const StageShape& s = shapes[i];
      out_str = std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
      if (row.stage == "c1") {
        blocks = "conv7x7";
      } else {
        const auto& group = arch.groups[i - 1];
        blocks = std::to_string(group.size()) + " x " + block_label(group.back());
      }
    }
    std::cout << std::left << std::setw(8) << row.stage << std::setw(14) << out_str
              << std::setw(16) << blocks << std::right << std::setw(14) << row.params
              << std::setw(16) << row.madds << "\n";
  }
  CostRow t = cost.totals();
  std::cout << std::left << std::setw(8) << "total" << std::setw(14) << "" << std::setw(16) << ""
            << std::right << std::setw(14) << t.params << std::setw(16) << t.madds << "\n";
  std::cout << "# params " << std::setprecision(3) << static_cast<double>(t.params) / 1e6
            << "e6   M.Adds " << static_cast<double>(t.madds) / 1e9 << "e9\n";
}

int cmd_infer(const std::string& spec, int res, int width_div, uint64_t seed,
              const std::string& params_path, const std::string& input_path,
              const std::string& random_dims, const std::string& output_path) {
  ArchSpec arch = resolve_arch(spec, res, "", width_div);
  BackboneParams params = BackboneParams::init(arch, seed, DType::f32);
  if (!params_path.empty()) params.load(params_path, arch);

  Tensor input;
  if (!input_path.empty()) {
    input = load_tensor_file(input_path);
  } else if (!random_dims.empty()) {
    std::vector<int64_t> dims = parse_dims(random_dims);
    input = CounterRng(seed, "infer.input").normal_tensor(dims, 1.0, DType::f32);
  } else {
    throw ConfigError("infer: provide --input or --random");
  }

  std::vector<StageShape> trace;
  Var logits = forward_classifier(arch, params, Var(input), &trace);
  const Tensor& out = logits.value();
  save_tensor_file(output_path, out);

  double mn = out.data()[0], mx = out.data()[0], sum = 0.0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    mn = std::min(mn, out.data()[i]);
    mx = std::max(mx, out.data()[i]);
    sum += out.data()[i];
  }
  json j;
  j["arch"] = arch.name;
  j["seed"] = seed;
  j["input_shape"] = input.shape();
  j["output_shape"] = out.shape();
  j["output_file"] = output_path;
  j["stats"] = {{"min", mn}, {"max", mx}, {"mean", sum / static_cast<double>(out.numel())}};
  json stages = json::array();
  for (const StageShape& s : trace)
    stages.push_back({{"stage", s.stage}, {"h", s.h}, {"w", s.w}, {"c", s.c}});
  j["stages"] = stages;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"botkit: bottleneck-transformer architecture toolkit"};
  app.require_subcommand(1);

  std::string arch_spec, arch_b, json_out, replacement, params_path, input_path, random_dims;
  std::string output_path = "out.botk";
  std::string suite = "all";
  int res = 0, width_div = 1;
  uint64_t seed = 0;

  CLI::App* describe = app.add_subcommand("describe", "print the stage table for an architecture");
  describe->add_option("arch", arch_spec, "family-depth shorthand or spec JSON file")->required();
  describe->add_option("--res", res, "input resolution (square)");
  describe->add_option("--replacement", replacement, "comma list of c5 block flags, e.g. 0,1,1");
  describe->add_option("--width-div", width_div, "divide all channel widths (smoke testing)");
  describe->add_option("--json", json_out, "also write the ArchSpec JSON to this path");

  CLI::App* compare_cmd = app.add_subcommand("compare", "per-stage cost delta of two architectures");
  compare_cmd->add_option("arch_a", arch_spec)->required();
  compare_cmd->add_option("arch_b", arch_b)->required();
  compare_cmd->add_option("--res", res, "resolution to cost at (default 224)");

  CLI::App* verify = app.add_subcommand("verify", "run the verification suites");
  verify->add_option("--suite", suite, "grad, oracle, invariants, cost, all");
  verify->add_option("--seed", seed);

  CLI::App* infer = app.add_subcommand("infer", "forward inference on a serialized/random tensor");
  infer->add_option("arch", arch_spec)->required();
  infer->add_option("--res", res, "architecture input resolution");
  infer->add_option("--width-div", width_div);
  infer->add_option("--seed", seed, "seed for generated parameters and --random input");
  infer->add_option("--params", params_path, "load parameters from a named-tensor archive");
  infer->add_option("--input", input_path, "input tensor file (.botk)");
  infer->add_option("--random", random_dims, "generate a random NxCxHxW input");
  infer->add_option("--output", output_path, "output tensor file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitInvalid;
  }

  try {
    if (describe->parsed()) {
      ArchSpec arch = resolve_arch(arch_spec, res, replacement, width_div);
      print_describe(arch);
      if (!json_out.empty()) {
        std::ofstream out(json_out);
        if (!out) throw IoError("cannot write " + json_out);
        out << arch.to_json_string() << "\n";
      }
      return 0;
    }
    if (compare_cmd->parsed()) {
      ArchSpec a = resolve_arch(arch_spec, res, "", 1);
      ArchSpec b = resolve_arch(arch_b, res, "", 1);
      CompareReport rep = compare(a, b, res > 0 ? res : 224);
      std::cout << rep.to_table();
      return 0;
    }
    if (verify->parsed()) {
      VerifyReport report = run_verify_suite(suite, seed);
      std::cout << report.to_json_string() << "\n";
      return report.pass() ? 0 : kExitInternal;
    }
    if (infer->parsed()) {
      return cmd_infer(arch_spec, res, width_div, seed, params_path, input_path, random_dims,
                       output_path);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
