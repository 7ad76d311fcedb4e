#pragma once

#include <optional>
#include <string>
#include <vector>

#include "botkit/attention.hpp"

namespace botkit {

enum class BlockKind { conv_bottleneck, bot, nl_insert };
enum class Activation { relu, silu };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& s);
Var apply_activation(const Var& x, Activation a);

struct BlockSpec {
  BlockKind kind = BlockKind::conv_bottleneck;
  int in_channels = 0;
  int mid_channels = 0;   // out/4 for bottleneck blocks, C/2 for nl_insert
  int out_channels = 0;
  int stride = 1;
  std::optional<MHSAConfig> attention;
  int se_ratio = 0;       // 0 = no SE gate
  Activation act = Activation::relu;

  void validate() const;
  bool has_shortcut_projection() const {
    return stride != 1 || in_channels != out_channels;
  }
};

struct BNParams {
  Var gamma, beta, mean, variance;
  double eps = 1e-5;
};

struct ConvBNParams {
  Var w;
  BNParams bn;
};

struct SEParams {
  Var w1;  // [C/ratio, C]
  Var w2;  // [C, C/ratio]
};

struct BlockParams {
  ConvBNParams reduce;                    // 1x1 in -> mid
  std::optional<ConvBNParams> spatial;    // 3x3 mid -> mid (conv blocks)
  std::optional<MHSAParams> attn;         // BoT blocks
  BNParams mid_bn;                        // BN after the spatial/MHSA stage
  ConvBNParams expand;                    // 1x1 mid -> out
  std::optional<ConvBNParams> shortcut;   // strided 1x1 projection
  std::optional<SEParams> se;
  std::optional<NonLocalParams> nl;       // nl_insert blocks

  static BlockParams init(const BlockSpec& spec, uint64_t seed, const std::string& prefix,
                          DType dtype = DType::f64, bool requires_grad = false);
  std::vector<std::pair<std::string, Var>> named(const BlockSpec& spec) const;
  std::vector<Var> leaves(const BlockSpec& spec) const;
};

Var conv_bn(const Var& x, const ConvBNParams& p, int stride, int pad);

// s = sigmoid(W2 act(W1 gap(x))); output = x scaled per channel by s.
Var se_gate(const Var& x, const SEParams& params, Activation act);

Var bottleneck_block(const Var& x, const BlockSpec& spec, const BlockParams& params);
Var bot_block(const Var& x, const BlockSpec& spec, const BlockParams& params);
// Dispatch on spec.kind (nl_insert runs the non-local layer).
Var run_block(const Var& x, const BlockSpec& spec, const BlockParams& params);

}  // namespace botkit
