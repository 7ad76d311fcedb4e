#include "botkit/rng.hpp"

#include <cmath>
#include <numbers>

namespace botkit {

namespace {

uint64_t splitmix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

CounterRng::CounterRng(uint64_t seed, std::string_view name)
    : key_(splitmix64(splitmix64(seed) ^ fnv1a(name))) {}

uint64_t CounterRng::bits(uint64_t i) const {
  return splitmix64(key_ ^ (i * 0xD1B54A32D192ED03ull));
}

double CounterRng::uniform(uint64_t i) const {
  return static_cast<double>(bits(i) >> 11) * 0x1.0p-53;
}

double CounterRng::normal(uint64_t i) const {
  double u1 = uniform(2 * i);
  double u2 = uniform(2 * i + 1);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor CounterRng::normal_tensor(std::vector<int64_t> shape, double stddev, DType dtype) const {
  Tensor t(std::move(shape), dtype);
  double* p = t.mutable_data();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = stddev * normal(static_cast<uint64_t>(i));
  finalize_dtype(t);
  return t;
}

Tensor CounterRng::uniform_tensor(std::vector<int64_t> shape, double lo, double hi,
                                  DType dtype) const {
  Tensor t(std::move(shape), dtype);
  double* p = t.mutable_data();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = lo + (hi - lo) * uniform(static_cast<uint64_t>(i));
  finalize_dtype(t);
  return t;
}

}  // namespace botkit
