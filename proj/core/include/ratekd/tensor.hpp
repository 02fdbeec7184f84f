#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ratekd/error.hpp"
#include "ratekd/memory.hpp"
#include "ratekd/real.hpp"

RATEKD_BEGIN_NAMESPACE

/// Dense tensor dimensions, outermost first.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const noexcept { return dims_.size(); }
  std::int64_t operator[](std::size_t i) const { return dims_.at(i); }
  std::int64_t numel() const noexcept;
  const std::vector<std::int64_t>& dims() const noexcept { return dims_; }

  /// Product of dimensions from `first` to the end.
  std::int64_t numel_from(std::size_t first) const noexcept;

  Shape with_dim(std::size_t axis, std::int64_t value) const;

  std::string to_string() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const;
  std::vector<std::int64_t> dims_;
};

using Buffer = std::vector<Real, TrackingAllocator<Real>>;

/// Row-major dense tensor with value semantics: copies are deep, moves are
/// cheap. Storage is accounted by MemoryTracker.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::span<const Real> values);
  Tensor(Shape shape, std::initializer_list<Real> values);

  static Tensor scalar(Real v) { return Tensor(Shape{1}, v); }
  static Tensor zeros(const Shape& s) { return Tensor(s, Real(0)); }
  static Tensor ones(const Shape& s) { return Tensor(s, Real(1)); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), Real(0)); }

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::int64_t dim(std::size_t i) const { return shape_[i]; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t bytes() const noexcept { return data_.size() * sizeof(Real); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const Real> values() const noexcept { return {data_.data(), data_.size()}; }

  Real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Value of a one-element tensor.
  Real item() const;

  Tensor reshaped(Shape s) const&;
  Tensor reshaped(Shape s) &&;

  void fill(Real v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(Real s);

  /// Rows [first, first + count) along axis 0.
  Tensor slice_rows(std::int64_t first, std::int64_t count) const;
  void set_rows(std::int64_t first, const Tensor& rows);

 private:
  Shape shape_;
  Buffer data_;
};

void expect_same_shape(const Tensor& a, const Tensor& b, const char* what);

Real max_abs_diff(const Tensor& a, const Tensor& b);
/// max |a-b| / max(|a|,|b|,floor) elementwise.
Real max_rel_diff(const Tensor& a, const Tensor& b, Real floor = Real(1e-12));
bool bitwise_equal(const Tensor& a, const Tensor& b);

RATEKD_END_NAMESPACE
