#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace botkit {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Operand shapes do not satisfy an op's preconditions.
struct ShapeError : Error {
  using Error::Error;
};
// A spec/configuration value is invalid (bad family name, odd channels, ...).
struct ConfigError : Error {
  using Error::Error;
};
// Input featuremap resolution does not match the resolution the position
// encoding tables were built for.
struct ResolutionError : ConfigError {
  using ConfigError::ConfigError;
};
struct IoError : Error {
  using Error::Error;
};

enum class DType : uint8_t { f32 = 1, f64 = 2 };

const char* dtype_name(DType d);

// Dense row-major N-d array. Values are held as doubles regardless of dtype;
// f32 tensors round every op result to float precision, so the stored doubles
// are always exactly representable floats and serialization round-trips
// bit-exactly. Data is shared on copy and immutable by convention once an op
// has produced the tensor; mutable_data() exists for leaf-parameter updates
// (finite-difference probes, seeded init).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, DType dtype = DType::f64);

  static Tensor zeros(std::vector<int64_t> shape, DType dtype = DType::f64);
  static Tensor full(std::vector<int64_t> shape, double value,
                     DType dtype = DType::f64);
  static Tensor from_data(std::vector<int64_t> shape,
                          std::vector<double> values,
                          DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);

  bool defined() const { return data_ != nullptr; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const;
  DType dtype() const { return dtype_; }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }

  double at(std::initializer_list<int64_t> idx) const;
  double item() const;  // requires numel()==1

  // Same shape/dtype/bits.
  bool bit_equal(const Tensor& other) const;

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  DType dtype_ = DType::f64;
  std::shared_ptr<std::vector<double>> data_;
};

std::string shape_to_string(const std::vector<int64_t>& shape);
int64_t shape_numel(const std::vector<int64_t>& shape);

// Rounds every element to float precision when dtype is f32. Ops call this on
// their outputs so f32 tensors never carry more precision than a float.
void finalize_dtype(Tensor& t);

DType common_dtype(const Tensor& a, const Tensor& b);

// Raw tensor file format ("BOTK"): magic, u8 version, u8 dtype code, u8 rank,
// little-endian u64 extents, packed little-endian f32/f64 values.
void save_tensor(std::ostream& out, const Tensor& t);
Tensor load_tensor(std::istream& in);
void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

// Named-record archive: sequence of [u32 name length, name bytes, BOTK record].
void save_named_tensors(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& records);
std::vector<std::pair<std::string, Tensor>> load_named_tensors(
    const std::string& path);

// Worker count for parallel kernels, capped by the BOTKIT_THREADS environment
// variable. Work is always partitioned so each output element is produced by
// exactly one worker with a fixed accumulation order; results are bit-identical
// for every thread count.
int num_threads();
void set_num_threads(int n);

// fn(begin, end) over a contiguous index range.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace botkit
