#include "microbia/tensor.hpp"

#include <bit>
#include <cstdint>
#include <type_traits>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace microbia {

static_assert(std::endian::native == std::endian::little,
              "tensor dump I/O assumes a little-endian host");

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s.empty() ? "()" : s;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::span<const T> values)
    : BasicTensor(std::move(shape), AlignedVector<T>(values.begin(), values.end())) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, AlignedVector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  if (shape_size(shape_) != data_.size())
    throw DimensionError("shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(data_.size()) + " values");
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape_));
  return shape_[axis];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const& {
  return BasicTensor(*this).reshaped(std::move(shape));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  BasicTensor out;
  out.shape_ = std::move(shape);
  out.data_ = std::move(data_);
  return out;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::slice_batch(std::size_t index) const {
  const std::size_t idx[] = {index};
  return gather_batch(idx);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::gather_batch(std::span<const std::size_t> indices) const {
  if (shape_.empty()) throw DimensionError("gather_batch on an empty tensor");
  if (indices.empty()) throw DimensionError("gather_batch needs at least one index");
  const std::size_t stride = data_.size() / shape_[0];
  Shape out_shape = shape_;
  out_shape[0] = indices.size();
  AlignedVector<T> out(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= shape_[0])
      throw DimensionError("batch index " + std::to_string(indices[i]) + " out of range");
    std::memcpy(out.data() + i * stride, data_.data() + indices[i] * stride, stride * sizeof(T));
  }
  return BasicTensor(std::move(out_shape), std::move(out));
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
  // Exponent all ones means Inf or NaN; the OR-reduction vectorises.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (T v : data_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & exp_mask) == exp_mask);
  return bad == 0;
}

template <typename T>
void require_finite(const BasicTensor<T>& t, std::string_view op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <typename T>
void require_shape(const BasicTensor<T>& t, const Shape& expected, std::string_view what) {
  if (t.shape() != expected)
    throw DimensionError(std::string(what) + ": expected shape " + shape_string(expected) +
                         ", got " + shape_string(t.shape()));
}

namespace {

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename T>
std::string header_line(const BasicTensor<T>& t) {
  nlohmann::ordered_json h;
  h["shape"] = t.shape();
  h["dtype"] = dtype_name<T>();
  h["layout"] = "row-major";
  return h.dump() + "\n";
}

template <typename Stored, typename T>
BasicTensor<T> read_payload(std::istream& in, Shape shape) {
  const std::size_t n = shape_size(shape);
  std::vector<Stored> raw(n);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(Stored)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(Stored))
    throw DataError("tensor dump truncated: expected " + std::to_string(n * sizeof(Stored)) +
                    " payload bytes");
  AlignedVector<T> values(raw.begin(), raw.end());
  return BasicTensor<T>(std::move(shape), std::move(values));
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const BasicTensor<T>& t) {
  out << header_line(t);
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename T>
std::size_t dump_size(const BasicTensor<T>& t) {
  return header_line(t).size() + t.size() * sizeof(T);
}

template <typename T>
BasicTensor<T> read_tensor(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("tensor dump: missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tensor dump: malformed header: ") + e.what());
  }
  if (!h.contains("shape") || !h.contains("dtype") || h.value("layout", "") != "row-major")
    throw DataError("tensor dump: header lacks shape/dtype/layout");
  Shape shape = h["shape"].get<Shape>();
  const std::string dtype = h["dtype"].get<std::string>();
  if (dtype == "f32") return read_payload<float, T>(in, std::move(shape));
  if (dtype == "f64") return read_payload<double, T>(in, std::move(shape));
  throw DataError("tensor dump: unsupported dtype '" + dtype + "'");
}

#define MICROBIA_INSTANTIATE(T)                                                   \
  template class BasicTensor<T>;                                                  \
  template void require_finite<T>(const BasicTensor<T>&, std::string_view);       \
  template void require_shape<T>(const BasicTensor<T>&, const Shape&, std::string_view); \
  template void write_tensor<T>(std::ostream&, const BasicTensor<T>&);            \
  template BasicTensor<T> read_tensor<T>(std::istream&);                          \
  template std::size_t dump_size<T>(const BasicTensor<T>&);

void reuse_large_allocations() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

MICROBIA_INSTANTIATE(float)
MICROBIA_INSTANTIATE(double)
#undef MICROBIA_INSTANTIATE

}  // namespace microbia
