#include "botkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace botkit {

const char* dtype_name(DType d) { return d == DType::f32 ? "float32" : "float64"; }

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  for (int64_t e : shape_) {
    if (e < 1) throw ShapeError("tensor extent must be >= 1, got shape " + shape_to_string(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dtype) {
  return Tensor(std::move(shape), dtype);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  std::fill(t.data_->begin(), t.data_->end(), value);
  finalize_dtype(t);
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> values, DType dtype) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                     shape_to_string(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  finalize_dtype(t);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  return from_data({1}, {value}, dtype);
}

int64_t Tensor::numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

double Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw ShapeError("at(): rank mismatch");
  int64_t off = 0;
  int i = 0;
  for (int64_t v : idx) {
    off = off * shape_[static_cast<size_t>(i)] + v;
    ++i;
  }
  return (*data_)[static_cast<size_t>(off)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
  return (*data_)[0];
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void finalize_dtype(Tensor& t) {
  if (t.dtype() != DType::f32) return;
  double* p = t.mutable_data();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
}

DType common_dtype(const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string("dtype mismatch: ") + dtype_name(a.dtype()) + " vs " +
                     dtype_name(b.dtype()));
  }
  return a.dtype();
}

// ---- serialization ----

namespace {

constexpr char kMagic[4] = {'B', 'O', 'T', 'K'};

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw IoError("unexpected end of tensor stream");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_tensor(std::ostream& out, const Tensor& t) {
  if (!t.defined()) throw IoError("cannot serialize an undefined tensor");
  out.write(kMagic, 4);
  write_le<uint8_t>(out, 1);  // version
  write_le<uint8_t>(out, static_cast<uint8_t>(t.dtype()));
  write_le<uint8_t>(out, static_cast<uint8_t>(t.rank()));
  for (int64_t e : t.shape()) write_le<uint64_t>(out, static_cast<uint64_t>(e));
  const double* p = t.data();
  int64_t n = t.numel();
  if (t.dtype() == DType::f32) {
    for (int64_t i = 0; i < n; ++i) write_le<float>(out, static_cast<float>(p[i]));
  } else {
    for (int64_t i = 0; i < n; ++i) write_le<double>(out, p[i]);
  }
  if (!out) throw IoError("tensor write failed");
}

Tensor load_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a BOTK tensor stream");
  uint8_t version = read_le<uint8_t>(in);
  if (version != 1) throw IoError("unsupported BOTK version " + std::to_string(version));
  uint8_t code = read_le<uint8_t>(in);
  if (code != 1 && code != 2) throw IoError("unknown dtype code " + std::to_string(code));
  DType dtype = static_cast<DType>(code);
  uint8_t rank = read_le<uint8_t>(in);
  std::vector<int64_t> shape;
  for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(read_le<uint64_t>(in)));
  int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<size_t>(n));
  if (dtype == DType::f32) {
    for (int64_t i = 0; i < n; ++i) values[static_cast<size_t>(i)] = read_le<float>(in);
  } else {
    for (int64_t i = 0; i < n; ++i) values[static_cast<size_t>(i)] = read_le<double>(in);
  }
  return Tensor::from_data(std::move(shape), std::move(values), dtype);
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  save_tensor(out, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return load_tensor(in);
}

void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& [name, tensor] : records) {
    write_le<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    save_tensor(out, tensor);
  }
}

std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::pair<std::string, Tensor>> records;
  while (in.peek() != std::char_traits<char>::eof()) {
    uint32_t len = read_le<uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError("truncated record name in " + path);
    records.emplace_back(std::move(name), load_tensor(in));
  }
  return records;
}

// ---- threading ----

namespace {

std::atomic<int> g_threads{0};  // 0 = uninitialized

int initial_threads() {
  if (const char* env = std::getenv("BOTKIT_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 4u));
}

}  // namespace

int num_threads() {
  int v = g_threads.load();
  if (v == 0) {
    v = initial_threads();
    g_threads.store(v);
  }
  return v;
}

void set_num_threads(int n) { g_threads.store(std::max(1, n)); }

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  int workers = num_threads();
  if (workers <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  workers = static_cast<int>(std::min<int64_t>(workers, n));
  int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    int64_t begin = w * chunk;
    int64_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace botkit
