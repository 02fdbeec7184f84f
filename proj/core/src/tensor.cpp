#include "ratekd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

RATEKD_BEGIN_NAMESPACE

std::int64_t Shape::numel() const noexcept { return numel_from(0); }

std::int64_t Shape::numel_from(std::size_t first) const noexcept {
  std::int64_t n = 1;
  for (std::size_t i = first; i < dims_.size(); ++i) n *= dims_[i];
  return n;
}

Shape Shape::with_dim(std::size_t axis, std::int64_t value) const {
  auto dims = dims_;
  dims.at(axis) = value;
  return Shape(std::move(dims));
}

std::string Shape::to_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
  os << ']';
  return os.str();
}

void Shape::validate() const {
  for (auto d : dims_) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string());
  }
}

Tensor::Tensor(Shape shape, Real fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.numel()), fill) {}

Tensor::Tensor(Shape shape, std::span<const Real> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (static_cast<std::int64_t>(data_.size()) != shape_.numel()) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.to_string());
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<Real> values)
    : Tensor(std::move(shape), std::span<const Real>(values.begin(), values.size())) {}

Real Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.to_string());
  return data_[0];
}

Tensor Tensor::reshaped(Shape s) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(s));
}

Tensor Tensor::reshaped(Shape s) && {
  if (s.numel() != shape_.numel()) {
    throw ShapeError("cannot reshape " + shape_.to_string() + " to " + s.to_string());
  }
  shape_ = std::move(s);
  return std::move(*this);
}

void Tensor::fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  expect_same_shape(*this, other, "tensor +=");
  const Real* src = other.data();
  Real* dst = data();
  const auto n = data_.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  return *this;
}

Tensor& Tensor::operator*=(Real s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor Tensor::slice_rows(std::int64_t first, std::int64_t count) const {
  if (rank() == 0 || first < 0 || count <= 0 || first + count > shape_[0]) {
    throw ShapeError("row slice out of range for shape " + shape_.to_string());
  }
  const auto row = shape_.numel_from(1);
  Tensor out(shape_.with_dim(0, count));
  std::memcpy(out.data(), data() + first * row, static_cast<std::size_t>(count * row) * sizeof(Real));
  return out;
}

void Tensor::set_rows(std::int64_t first, const Tensor& rows) {
  const auto row = shape_.numel_from(1);
  if (rows.rank() != rank() || rows.shape().numel_from(1) != row || first < 0 ||
      first + rows.dim(0) > shape_[0]) {
    throw ShapeError("set_rows: " + rows.shape().to_string() + " into " + shape_.to_string());
  }
  std::memcpy(data() + first * row, rows.data(), rows.bytes());
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + a.shape().to_string() + " vs " +
                     b.shape().to_string());
  }
}

Real max_abs_diff(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "max_abs_diff");
  Real m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Real max_rel_diff(const Tensor& a, const Tensor& b, Real floor) {
  expect_same_shape(a, b, "max_rel_diff");
  Real m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const Real scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    m = std::max(m, std::abs(a[i] - b[i]) / scale);
  }
  return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.bytes()) == 0;
}

RATEKD_END_NAMESPACE
