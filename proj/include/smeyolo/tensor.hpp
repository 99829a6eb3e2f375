#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace sme {

/// Raised when tensor shapes disagree with an operation's contract.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a NaN or Inf shows up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Dims = std::vector<std::size_t>;

inline std::string dims_to_string(const Dims& d) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "," : "") << d[i];
  os << ')';
  return os.str();
}

inline std::size_t dims_volume(const Dims& d) {
  return std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of rank 1..4 with an optional gradient slot.
///
/// Rank-4 tensors are feature maps laid out as (batch, channel, row, col).
/// Parameters (kernels, biases, normalization vectors) use the same type so
/// optimizers and checkpoints can treat everything uniformly.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor needs a floating-point scalar");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Dims dims, T fill = T(0)) : dims_(std::move(dims)) {
    if (dims_.empty() || dims_.size() > 4)
      throw DimensionError("tensor rank must be in [1,4], got " + std::to_string(dims_.size()));
    data_.assign(dims_volume(dims_), fill);
  }

  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : Tensor(Dims{n, c, h, w}, fill) {}

  static Tensor from_values(Dims dims, std::initializer_list<T> values) {
    Tensor t(std::move(dims));
    if (values.size() != t.size())
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + dims_to_string(t.dims()));
    std::copy(values.begin(), values.end(), t.data_.begin());
    return t;
  }

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Feature-map accessors; only meaningful for rank-4 tensors.
  std::size_t n() const { return dim4(0); }
  std::size_t c() const { return dim4(1); }
  std::size_t h() const { return dim4(2); }
  std::size_t w() const { return dim4(3); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * dims_[1] + c) * dims_[2] + y) * dims_[3] + x];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * dims_[1] + c) * dims_[2] + y) * dims_[3] + x];
  }

  /// Pointer to the (row, col) plane of one batch item and channel.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * dims_[1] + c) * dims_[2] * dims_[3]; }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * dims_[1] + c) * dims_[2] * dims_[3];
  }

  bool has_grad() const { return grad_.has_value(); }
  /// Allocates a zeroed gradient slot if absent.
  Tensor& ensure_grad() {
    if (!grad_ || grad_->size() != data_.size()) grad_.emplace(data_.size(), T(0));
    return *this;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }
  void drop_grad() { grad_.reset(); }
  std::span<T> grad() {
    ensure_grad();
    return *grad_;
  }
  std::span<const T> grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient slot");
    return *grad_;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Reinterprets the shape without touching data; volumes must agree.
  Tensor reshaped(Dims dims) const {
    if (dims_volume(dims) != size())
      throw DimensionError("cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
    Tensor t = *this;
    t.dims_ = std::move(dims);
    t.grad_.reset();
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(dims_);
    std::transform(data_.begin(), data_.end(), t.data(), [](T v) { return static_cast<U>(v); });
    return t;
  }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

  bool bit_equal(const Tensor& o) const {
    return dims_ == o.dims_ &&
           (data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0);
  }

 private:
  std::size_t dim4(std::size_t i) const {
    if (dims_.size() != 4) throw DimensionError("expected a rank-4 feature map, got " + dims_to_string(dims_));
    return dims_[i];
  }

  Dims dims_;
  std::vector<T> data_;
  std::optional<std::vector<T>> grad_;
};

using FeatureMap = Tensor<float>;
using FeatureMap64 = Tensor<double>;

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& name) {
  const auto v = t.values();
  // x - x is NaN exactly for NaN and infinities. Eight lanes let the scan vectorize.
  T lanes[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= v.size(); j += 8)
    for (int l = 0; l < 8; ++l) lanes[l] += v[j + l] - v[j + l];
  for (; j < v.size(); ++j) lanes[0] += v[j] - v[j];
  T probe = 0;
  for (T l : lanes) probe += l;
  if (probe == 0) return;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      throw NumericError("non-finite value in '" + name + "' at flat index " + std::to_string(i));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& what) {
  if (!a.same_shape(b))
    throw DimensionError(what + ": shape " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
}

template <typename T>
void require_rank4(const Tensor<T>& t, const std::string& what) {
  if (t.rank() != 4) throw DimensionError(what + ": expected rank-4 tensor, got " + dims_to_string(t.dims()));
}

// ---------------------------------------------------------------------------
// Snapshot file: "SMET", u32 version (1), u32 rank, rank x u64 dims, then
// little-endian f32 values in row-major order.

namespace detail {

inline constexpr bool kLittleEndian = std::endian::native == std::endian::little;

template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  if constexpr (!kLittleEndian) std::reverse(buf, buf + sizeof(U));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw std::runtime_error("snapshot: unexpected end of data");
  if constexpr (!kLittleEndian) std::reverse(buf, buf + sizeof(U));
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

}  // namespace detail

inline constexpr char kSnapshotMagic[4] = {'S', 'M', 'E', 'T'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

/// Writes the values (cast to f32) of `t`. Gradients are not stored.
template <typename T>
void write_snapshot(std::ostream& os, const Tensor<T>& t) {
  os.write(kSnapshotMagic, 4);
  detail::put_le<std::uint32_t>(os, kSnapshotVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) detail::put_le<std::uint64_t>(os, d);
  for (T v : t.values()) detail::put_le<float>(os, static_cast<float>(v));
}

template <typename T = float>
Tensor<T> read_snapshot(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kSnapshotMagic, 4) != 0)
    throw std::runtime_error("snapshot: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kSnapshotVersion) throw std::runtime_error("snapshot: unsupported version " + std::to_string(version));
  const auto rank = detail::get_le<std::uint32_t>(is);
  if (rank == 0 || rank > 4) throw std::runtime_error("snapshot: bad rank " + std::to_string(rank));
  Dims dims(rank);
  for (auto& d : dims) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is));
  Tensor<T> t(dims);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(detail::get_le<float>(is));
  return t;
}

}  // namespace sme
