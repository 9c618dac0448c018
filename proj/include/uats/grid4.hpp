#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace uats {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Extents of a 4-axis grid: (batch, channel, row, column).
struct Shape4 {
  int b = 0, c = 0, h = 0, w = 0;

  std::int64_t size() const {
    return static_cast<std::int64_t>(b) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "[" + std::to_string(b) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w) + "]";
  }
};

// Dense 4-axis numeric grid over scalar T, row-major in (b, c, h, w).
// Backed by a flat Eigen array so elementwise math stays expression-based.
template <class T>
class Tensor4 {
 public:
  using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;

  Tensor4() = default;
  explicit Tensor4(Shape4 s) : shape_(s), data_(ArrayX::Zero(s.size())) {}
  Tensor4(int b, int c, int h, int w) : Tensor4(Shape4{b, c, h, w}) {}

  static Tensor4 constant(Shape4 s, T value) {
    Tensor4 t(s);
    t.data_.setConstant(value);
    return t;
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t size() const { return data_.size(); }

  ArrayX& array() { return data_; }
  const ArrayX& array() const { return data_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::int64_t index(int b, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(b) * shape_.c + c) * shape_.h + h) *
               shape_.w + w;
  }
  T& at(int b, int c, int h, int w) { return data_[index(b, c, h, w)]; }
  T at(int b, int c, int h, int w) const { return data_[index(b, c, h, w)]; }

  T& operator[](std::int64_t i) { return data_[i]; }
  T operator[](std::int64_t i) const { return data_[i]; }

  // Channel plane of one batch element as a (h*w) segment.
  auto plane(int b, int c) {
    return data_.segment(index(b, c, 0, 0), static_cast<std::int64_t>(shape_.h) * shape_.w);
  }
  auto plane(int b, int c) const {
    return data_.segment(index(b, c, 0, 0), static_cast<std::int64_t>(shape_.h) * shape_.w);
  }

  void set_zero() { data_.setZero(); }

  bool all_finite() const { return data_.isFinite().all(); }

  bool same_shape(const Tensor4& o) const { return shape_ == o.shape_; }

 private:
  Shape4 shape_;
  ArrayX data_;
};

using Grid4 = Tensor4<double>;

inline void require_same_shape(const Grid4& a, const Grid4& b,
                               const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " +
                     a.shape().str() + " vs " + b.shape().str());
}

}  // namespace uats
