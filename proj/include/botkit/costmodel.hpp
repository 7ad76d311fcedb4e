#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "botkit/backbone.hpp"

namespace botkit {

// Counting convention "conv-fc-attn-v1": one M.Add is one multiply-accumulate.
// Counted: convolutions (Cout*Cin*k^2*Hout*Wout), fully connected weights,
// attention projections and logit/aggregation products, SE projections.
// Not counted: BN, activations, pooling, softmax, biases, residual adds.
inline constexpr const char* kCostConvention = "conv-fc-attn-v1";

struct CostRow {
  std::string stage;
  uint64_t params = 0;
  uint64_t madds = 0;
  // convention-internal split, used by the scaling assertions
  uint64_t conv_madds = 0;        // convolutions (stem, block convs, shortcuts)
  uint64_t attn_logit_madds = 0;  // n^2 terms: q k^T, A v, absolute logits
  uint64_t attn_linear_madds = 0; // qkv projections, relative-table products, NL embeds
  uint64_t fc_madds = 0;
  uint64_t se_madds = 0;
};

struct CostReport {
  std::string arch;
  int res_h = 0, res_w = 0;
  std::string convention = kCostConvention;
  std::vector<CostRow> rows;

  CostRow totals() const;
  std::string to_json_string(int indent = 2) const;
  std::string to_table() const;
};

// Per-stage parameter and multiply-add accounting at the given resolution.
// Attention featuremap sizes are re-derived from the resolution, so the same
// family can be costed at several input sizes.
CostReport cost_report(const ArchSpec& arch, int res_h, int res_w);

CostReport count_params(const ArchSpec& arch);             // at arch.input res
CostReport count_madds(const ArchSpec& arch, int res);     // square resolution

struct CompareRow {
  std::string stage;
  int64_t d_params = 0;
  int64_t d_madds = 0;
};

struct CompareReport {
  std::string arch_a, arch_b;
  int res = 0;
  std::vector<CompareRow> rows;
  int64_t total_d_params = 0;
  int64_t total_d_madds = 0;
  double params_ratio = 0.0;  // a / b
  double madds_ratio = 0.0;

  std::string to_json_string(int indent = 2) const;
  std::string to_table() const;
};

CompareReport compare(const ArchSpec& a, const ArchSpec& b, int res);

}  // namespace botkit
