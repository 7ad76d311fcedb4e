#include "botkit/costmodel.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace botkit {

using json = nlohmann::json;

namespace {

uint64_t u64(int64_t v) { return static_cast<uint64_t>(v); }

// Rebuilds the arch at another input resolution so attention featuremap sizes
// (and relative-table parameter counts) track the costing resolution.
ArchSpec at_resolution(const ArchSpec& arch, int res_h, int res_w) {
  if (res_h == arch.input_h && res_w == arch.input_w) return arch;
  ArchSpec copy = arch;
  copy.input_h = res_h;
  copy.input_w = res_w;
  copy.groups.clear();
  elaborate(copy);
  return copy;
}

void add_bn(CostRow& row, int64_t channels) { row.params += u64(2 * channels); }

void cost_block(CostRow& row, const BlockSpec& spec, int64_t h, int64_t w) {
  int64_t in = spec.in_channels, mid = spec.mid_channels, out = spec.out_channels;
  int64_t ho = h / spec.stride, wo = w / spec.stride;
  if (spec.kind == BlockKind::nl_insert) {
    int64_t c = in, half = in / 2, n = h * w;
    row.params += u64(2 * half * c + c * half);
    row.attn_linear_madds += u64(2 * n * c * half + n * half * c);
    row.attn_logit_madds += u64(2 * n * n * half);
    return;
  }
  // 1x1 reduce at input resolution
  row.params += u64(mid * in);
  add_bn(row, mid);
  row.conv_madds += u64(mid * in * h * w);
  if (spec.kind == BlockKind::conv_bottleneck) {
    row.params += u64(mid * mid * 9);
    add_bn(row, mid);
    row.conv_madds += u64(mid * mid * 9 * ho * wo);
  } else {
    const MHSAConfig& cfg = *spec.attention;
    int64_t n = cfg.positions(), d = cfg.d_model, dh = cfg.d_head();
    row.params += u64(3 * d * d);
    row.attn_linear_madds += u64(3 * n * d * d);
    row.attn_logit_madds += u64(2 * n * n * d);  // q k^T and A v
    if (cfg.pos_mode == PosMode::relative) {
      row.params += u64((2 * cfg.fm_h - 1 + 2 * cfg.fm_w - 1) * dh);
      row.attn_linear_madds += u64(n * (2 * cfg.fm_h - 1 + 2 * cfg.fm_w - 1) * d);
    } else if (cfg.pos_mode == PosMode::absolute) {
      row.params += u64(n * dh);
      row.attn_logit_madds += u64(n * n * d);
    }
    add_bn(row, mid);
  }
  // 1x1 expand at output resolution
  row.params += u64(out * mid);
  add_bn(row, out);
  row.conv_madds += u64(out * mid * ho * wo);
  if (spec.has_shortcut_projection()) {
    row.params += u64(out * in);
    add_bn(row, out);
    row.conv_madds += u64(out * in * ho * wo);
  }
  if (spec.se_ratio > 0) {
    int64_t cr = std::max<int64_t>(1, out / spec.se_ratio);
    row.params += u64(2 * out * cr);
    row.se_madds += u64(2 * out * cr);
  }
}

void finish_row(CostRow& row) {
  row.madds = row.conv_madds + row.attn_logit_madds + row.attn_linear_madds + row.fc_madds +
              row.se_madds;
}

}  // namespace

CostRow CostReport::totals() const {
  CostRow t;
  t.stage = "total";
  for (const CostRow& r : rows) {
    t.params += r.params;
    t.madds += r.madds;
    t.conv_madds += r.conv_madds;
    t.attn_logit_madds += r.attn_logit_madds;
    t.attn_linear_madds += r.attn_linear_madds;
    t.fc_madds += r.fc_madds;
    t.se_madds += r.se_madds;
  }
  return t;
}

CostReport cost_report(const ArchSpec& arch, int res_h, int res_w) {
  ArchSpec a = at_resolution(arch, res_h, res_w);
  CostReport report;
  report.arch = arch.name;
  report.res_h = res_h;
  report.res_w = res_w;

  CostRow stem;
  stem.stage = "c1";
  int64_t sc = a.stem_channels();
  stem.params = u64(sc * 3 * 49 + 2 * sc);
  stem.conv_madds = u64(sc * 3 * 49 * (res_h / 2) * (res_w / 2));
  finish_row(stem);
  report.rows.push_back(stem);

  int64_t h = res_h / 4, w = res_w / 4;
  for (size_t gi = 0; gi < a.groups.size(); ++gi) {
    CostRow row;
    row.stage = "c" + std::to_string(gi + 2);
    for (const BlockSpec& spec : a.groups[gi]) {
      cost_block(row, spec, h, w);
      h /= spec.stride;
      w /= spec.stride;
    }
    finish_row(row);
    report.rows.push_back(row);
  }

  CostRow head;
  head.stage = "head";
  head.params = u64(a.group_out_channels(3) * a.n_classes + a.n_classes);
  head.fc_madds = u64(a.group_out_channels(3) * a.n_classes);
  finish_row(head);
  report.rows.push_back(head);
  return report;
}

CostReport count_params(const ArchSpec& arch) {
  return cost_report(arch, arch.input_h, arch.input_w);
}

CostReport count_madds(const ArchSpec& arch, int res) { return cost_report(arch, res, res); }

std::string CostReport::to_json_string(int indent) const {
  json j;
  j["arch"] = arch;
  j["resolution"] = {res_h, res_w};
  j["convention"] = convention;
  json rows_json = json::array();
  for (const CostRow& r : rows) {
    rows_json.push_back({{"stage", r.stage}, {"params", r.params}, {"madds", r.madds}});
  }
  j["rows"] = rows_json;
  CostRow t = totals();
  j["totals"] = {{"params", t.params}, {"madds", t.madds}};
  return j.dump(indent);
}

std::string CostReport::to_table() const {
  std::ostringstream os;
  os << arch << " @ " << res_h << "x" << res_w << "  (" << convention << ")\n";
  os << std::left << std::setw(8) << "stage" << std::right << std::setw(14) << "params"
     << std::setw(16) << "M.Adds" << "\n";
  for (const CostRow& r : rows) {
    os << std::left << std::setw(8) << r.stage << std::right << std::setw(14) << r.params
       << std::setw(16) << r.madds << "\n";
  }
  CostRow t = totals();
  os << std::left << std::setw(8) << "total" << std::right << std::setw(14) << t.params
     << std::setw(16) << t.madds << "\n";
  os << "# params " << std::setprecision(3) << static_cast<double>(t.params) / 1e6
     << "e6   M.Adds " << static_cast<double>(t.madds) / 1e9 << "e9\n";
  return os.str();
}

CompareReport compare(const ArchSpec& a, const ArchSpec& b, int res) {
  CostReport ra = count_madds(a, res);
  CostReport rb = count_madds(b, res);
  if (ra.rows.size() != rb.rows.size()) throw ConfigError("compare: stage row mismatch");
  CompareReport rep;
  rep.arch_a = a.name;
  rep.arch_b = b.name;
  rep.res = res;
  for (size_t i = 0; i < ra.rows.size(); ++i) {
    if (ra.rows[i].stage != rb.rows[i].stage) throw ConfigError("compare: stage name mismatch");
    CompareRow row;
    row.stage = ra.rows[i].stage;
    row.d_params = static_cast<int64_t>(ra.rows[i].params) - static_cast<int64_t>(rb.rows[i].params);
    row.d_madds = static_cast<int64_t>(ra.rows[i].madds) - static_cast<int64_t>(rb.rows[i].madds);
    rep.rows.push_back(row);
    rep.total_d_params += row.d_params;
    rep.total_d_madds += row.d_madds;
  }
  CostRow ta = ra.totals(), tb = rb.totals();
  rep.params_ratio = static_cast<double>(ta.params) / static_cast<double>(tb.params);
  rep.madds_ratio = static_cast<double>(ta.madds) / static_cast<double>(tb.madds);
  return rep;
}

std::string CompareReport::to_json_string(int indent) const {
  json j;
  j["arch_a"] = arch_a;
  j["arch_b"] = arch_b;
  j["resolution"] = res;
  json rows_json = json::array();
  for (const CompareRow& r : rows) {
    rows_json.push_back({{"stage", r.stage}, {"d_params", r.d_params}, {"d_madds", r.d_madds}});
  }
  j["rows"] = rows_json;
  j["totals"] = {{"d_params", total_d_params}, {"d_madds", total_d_madds}};
  j["ratios"] = {{"params", params_ratio}, {"madds", madds_ratio}};
  return j.dump(indent);
}

std::string CompareReport::to_table() const {
  std::ostringstream os;
  os << arch_a << " - " << arch_b << " @ " << res << "x" << res << "\n";
  os << std::left << std::setw(8) << "stage" << std::right << std::setw(16) << "d_params"
     << std::setw(18) << "d_madds" << "\n";
  for (const CompareRow& r : rows) {
    os << std::left << std::setw(8) << r.stage << std::right << std::setw(16) << r.d_params
       << std::setw(18) << r.d_madds << "\n";
  }
  os << std::left << std::setw(8) << "total" << std::right << std::setw(16) << total_d_params
     << std::setw(18) << total_d_madds << "\n";
  os << "ratios: params " << params_ratio << "  madds " << madds_ratio << "\n";
  return os.str();
}

}  // namespace botkit
