#include "mutr/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mutr {

namespace {

std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t e : shape) {
    if (e <= 0) throw ConfigError("tensor extents must be positive");
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape, DType dtype)
    : shape_(std::move(shape)), numel_(checked_numel(shape_)), dtype_(dtype) {
  buf_ = std::shared_ptr<std::byte[]>(
      new std::byte[static_cast<std::size_t>(numel_) * dtype_size(dtype_)]);
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape, DType dtype) {
  Tensor t(std::move(shape), dtype);
  std::memset(t.buf_.get(), 0,
              static_cast<std::size_t>(t.numel_) * dtype_size(dtype));
  return t;
}

Tensor Tensor::full(std::vector<std::int64_t> shape, DType dtype, double value) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  return full({}, dtype, value);
}

Tensor Tensor::clone() const {
  Tensor t(shape_, dtype_);
  std::memcpy(t.buf_.get(), buf_.get(),
              static_cast<std::size_t>(numel_) * dtype_size(dtype_));
  return t;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> new_shape) const {
  if (checked_numel(new_shape) != numel_) {
    throw ConfigError("reshape element count mismatch: " + shape_str());
  }
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.numel_ = numel_;
  t.dtype_ = dtype_;
  t.buf_ = buf_;
  return t;
}

double Tensor::get(std::int64_t flat_index) const {
  return dtype_ == DType::kF32
             ? static_cast<double>(data<float>()[flat_index])
             : data<double>()[flat_index];
}

void Tensor::set(std::int64_t flat_index, double value) {
  if (dtype_ == DType::kF32) {
    data<float>()[flat_index] = static_cast<float>(value);
  } else {
    data<double>()[flat_index] = value;
  }
}

void Tensor::fill(double value) {
  if (dtype_ == DType::kF32) {
    float* p = data<float>();
    const float v = static_cast<float>(value);
    for (std::int64_t i = 0; i < numel_; ++i) p[i] = v;
  } else {
    double* p = data<double>();
    for (std::int64_t i = 0; i < numel_; ++i) p[i] = value;
  }
}

bool Tensor::all_finite() const {
  if (dtype_ == DType::kF32) {
    const float* p = data<float>();
    for (std::int64_t i = 0; i < numel_; ++i) {
      if (!std::isfinite(p[i])) return false;
    }
  } else {
    const double* p = data<double>();
    for (std::int64_t i = 0; i < numel_; ++i) {
      if (!std::isfinite(p[i])) return false;
    }
  }
  return true;
}

bool Tensor::same_bits(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (dtype_ != other.dtype_ || shape_ != other.shape_) return false;
  return std::memcmp(buf_.get(), other.buf_.get(),
                     static_cast<std::size_t>(numel_) * dtype_size(dtype_)) == 0;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ',';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

template <class T>
void Tensor::check_type() const {
  if (!defined()) throw ConfigError("access to undefined tensor");
  const bool ok = (std::is_same_v<T, float> && dtype_ == DType::kF32) ||
                  (std::is_same_v<T, double> && dtype_ == DType::kF64);
  if (!ok) throw ConfigError("tensor dtype mismatch");
}

template void Tensor::check_type<float>() const;
template void Tensor::check_type<double>() const;

bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

Tensor rand_uniform(std::vector<std::int64_t> shape, DType dtype, double lo,
                    double hi, Rng& rng) {
  Tensor t(std::move(shape), dtype);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

Tensor rand_normal(std::vector<std::int64_t> shape, DType dtype, double mean,
                   double stddev, Rng& rng) {
  Tensor t(std::move(shape), dtype);
  std::normal_distribution<double> dist(mean, stddev);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ConfigError("dot: element count mismatch");
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a.get(i) * b.get(i);
  return s;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    m = std::max(m, std::abs(t.get(i)));
  }
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw ConfigError("max_abs_diff: element count mismatch");
  }
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.get(i) - b.get(i)));
  }
  return m;
}

}  // namespace mutr
