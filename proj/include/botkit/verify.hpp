#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace botkit {

struct CheckRow {
  std::string name;
  bool passed = false;
  double measured = 0.0;   // measured error / value
  double threshold = 0.0;  // pass iff measured <= threshold (or exact flag)
};

struct VerifyReport {
  std::string suite;
  uint64_t seed = 0;
  std::vector<CheckRow> rows;

  bool pass() const;  // true iff every row passed
  std::string to_json_string(int indent = 2) const;
};

// Suites: "grad" (finite-difference checks), "oracle" (brute-force reference
// equivalences), "invariants" (structural properties), "cost" (published
// figure anchors), "all".
VerifyReport run_verify_suite(const std::string& suite, uint64_t seed);

}  // namespace botkit
