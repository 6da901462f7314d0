#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mutr/common.hpp"

namespace mutr {

enum class DType { kF32, kF64 };

inline std::size_t dtype_size(DType d) {
  return d == DType::kF32 ? sizeof(float) : sizeof(double);
}
inline const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

// Dense row-major n-d array. Copies share the underlying buffer; ops treat a
// tensor as immutable once its producing op has written it. Rank 0 is a
// scalar with one element. A default-constructed tensor is undefined.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape, DType dtype);

  static Tensor zeros(std::vector<std::int64_t> shape, DType dtype);
  static Tensor full(std::vector<std::int64_t> shape, DType dtype, double value);
  static Tensor scalar(double value, DType dtype);

  bool defined() const { return static_cast<bool>(buf_); }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }

  template <class T>
  T* data() {
    check_type<T>();
    return reinterpret_cast<T*>(buf_.get());
  }
  template <class T>
  const T* data() const {
    check_type<T>();
    return reinterpret_cast<const T*>(buf_.get());
  }

  // Deep copy.
  Tensor clone() const;
  // Same buffer, new shape with identical element count.
  Tensor reshaped(std::vector<std::int64_t> new_shape) const;

  // Dtype-agnostic element access for tests, oracles and serialization.
  double get(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);

  void fill(double value);
  bool all_finite() const;
  bool same_bits(const Tensor& other) const;

  std::string shape_str() const;

 private:
  template <class T>
  void check_type() const;

  std::vector<std::int64_t> shape_;
  std::int64_t numel_ = 0;
  DType dtype_ = DType::kF32;
  std::shared_ptr<std::byte[]> buf_;
};

bool same_shape(const Tensor& a, const Tensor& b);

using Rng = std::mt19937_64;

Tensor rand_uniform(std::vector<std::int64_t> shape, DType dtype, double lo,
                    double hi, Rng& rng);
Tensor rand_normal(std::vector<std::int64_t> shape, DType dtype, double mean,
                   double stddev, Rng& rng);

// Sum of elementwise products; f64 accumulation. Used by adjoint tests.
double dot(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mutr
