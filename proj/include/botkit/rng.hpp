#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "botkit/tensor.hpp"

namespace botkit {

// Counter-based generator: value i of stream (seed, name) depends only on the
// triple, never on draw order. Uniforms come from splitmix64 over a key mixed
// with the counter; normals pair two uniforms through Box-Muller.
class CounterRng {
 public:
  CounterRng(uint64_t seed, std::string_view name);

  uint64_t bits(uint64_t i) const;
  double uniform(uint64_t i) const;  // [0, 1)
  double normal(uint64_t i) const;   // standard normal

  Tensor normal_tensor(std::vector<int64_t> shape, double stddev,
                       DType dtype = DType::f64) const;
  Tensor uniform_tensor(std::vector<int64_t> shape, double lo, double hi,
                        DType dtype = DType::f64) const;

 private:
  uint64_t key_;
};

}  // namespace botkit
