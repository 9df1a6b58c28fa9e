#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chainseg {

// Contract failure: message names the offending value/axis. Thrown by all
// shape and argument validation in the library.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Runtime numeric failure (overflow, non-finite values): the inputs were
// well-formed but the arithmetic left the representable range.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}
}  // namespace detail

#define CS_CHECK(cond, msg)                                       \
  do {                                                            \
    if (!(cond)) {                                                \
      std::ostringstream os_;                                     \
      os_ << msg;                                                 \
      throw ::chainseg::ShapeError(os_.str());                    \
    }                                                             \
  } while (0)

// Dense row-major tensor. Rank is dynamic; NCHW order is assumed whenever a
// rank-4 tensor crosses a module boundary.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
      CS_CHECK(d >= 0, "tensor axis must be non-negative, got " << d
                        << " in " << detail::shape_str(shape_));
      n *= d;
    }
    data_.assign(static_cast<size_t>(n), T(0));
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    Tensor t(std::move(shape));
    CS_CHECK(values.size() == t.data_.size(),
             "value count " << values.size() << " does not match shape "
                            << detail::shape_str(t.shape_));
    t.data_ = std::move(values);
    return t;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW accessors.
  T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  T& at(int64_t a, int64_t b, int64_t c) {
    return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  const T& at(int64_t a, int64_t b, int64_t c) const {
    return data_[static_cast<size_t>((a * shape_[1] + b) * shape_[2] + c)];
  }
  T& at(int64_t a, int64_t b) { return data_[static_cast<size_t>(a * shape_[1] + b)]; }
  const T& at(int64_t a, int64_t b) const { return data_[static_cast<size_t>(a * shape_[1] + b)]; }

  template <typename U>
  bool same_shape(const Tensor<U>& o) const { return shape_ == o.shape(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape_string() const { return detail::shape_str(shape_); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (size_t i = 0; i < data_.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

template <typename T>
void check_rank(const Tensor<T>& t, int r, const char* who) {
  CS_CHECK(t.rank() == r, who << ": expected rank " << r << " tensor, got rank "
                              << t.rank() << " " << t.shape_string());
}

}  // namespace chainseg
