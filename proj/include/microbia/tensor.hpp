#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "microbia/errors.hpp"

namespace microbia {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. Vectorised reductions peel differently for
/// different start addresses, so a fixed alignment keeps results bit-exact
/// from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major n-dimensional array. Training runs on float; the double
/// instantiation exists for finite-difference gradient checks.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::span<const T> values);
  BasicTensor(Shape shape, AlignedVector<T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data, new shape; the element count must not change.
  BasicTensor reshaped(Shape shape) const&;
  BasicTensor reshaped(Shape shape) &&;

  /// Copy of sample `index` along the leading axis, keeping a leading 1.
  BasicTensor slice_batch(std::size_t index) const;
  /// Copy of samples listed in `indices` along the leading axis.
  BasicTensor gather_batch(std::span<const std::size_t> indices) const;

  void fill(T value);
  void set_zero() { fill(T{0}); }

  template <typename U>
  BasicTensor<U> cast() const {
    AlignedVector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool all_finite() const noexcept;

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Throws NumericError naming `op` if any element is NaN or infinite.
template <typename T>
void require_finite(const BasicTensor<T>& t, std::string_view op);

/// Throws DimensionError unless `t` has exactly `expected` shape.
template <typename T>
void require_shape(const BasicTensor<T>& t, const Shape& expected, std::string_view what);

// Tensor dump: one JSON header line
//   {"shape":[...],"dtype":"f32"|"f64","layout":"row-major"}
// followed by the little-endian payload.
template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& t);

/// Reads one dump in its stored dtype and converts to T.
template <typename T>
BasicTensor<T> read_tensor(std::istream& in);

/// Bytes a dump of `t` occupies, header line included.
template <typename T>
std::size_t dump_size(const BasicTensor<T>& t);

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS, so repeated training steps do not re-fault fresh pages. Process
/// wide; a no-op outside glibc.
void reuse_large_allocations();

}  // namespace microbia
