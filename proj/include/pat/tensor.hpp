#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pat/errors.hpp"

namespace pat {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Process-wide accounting of bytes held by tensor storage (data + grads).
/// Used as the memory proxy for benchmarks.
class AllocStats {
 public:
  static void add(std::size_t bytes) {
    auto now = current_().fetch_add(bytes) + bytes;
    auto prev = peak_().load();
    while (now > prev && !peak_().compare_exchange_weak(prev, now)) {
    }
  }
  static void sub(std::size_t bytes) { current_().fetch_sub(bytes); }
  static std::size_t current() { return current_().load(); }
  static std::size_t peak() { return peak_().load(); }
  static void reset_peak() { peak_().store(current_().load()); }

 private:
  static std::atomic<std::size_t>& current_() {
    static std::atomic<std::size_t> v{0};
    return v;
  }
  static std::atomic<std::size_t>& peak_() {
    static std::atomic<std::size_t> v{0};
    return v;
  }
};

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// A Tensor is a handle: copies share storage, `clone()` makes a deep copy.
/// Tensors that take part in a Tape carry `requires_grad`; their gradient
/// buffer is allocated lazily by the backward pass.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<Impl>(std::move(shape))) {
    std::fill(impl_->data.begin(), impl_->data.end(), fill);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>(std::move(shape), std::move(values))) {
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n}, T(0));
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = T(1);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t size() const { return impl().data.size(); }
  std::size_t last_dim() const { return shape().back(); }
  /// Product of all axes except the last one.
  std::size_t rows() const { return size() / last_dim(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  std::vector<T>& values() { return impl().data; }
  const std::vector<T>& values() const { return impl().data; }

  T& operator[](std::size_t i) { return impl().data[i]; }
  const T& operator[](std::size_t i) const { return impl().data[i]; }
  T& at(std::size_t r, std::size_t c) { return impl().data[r * last_dim() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return impl().data[r * last_dim() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool v) { impl().requires_grad = v; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<T> grad() { return impl().grad; }
  std::span<const T> grad() const { return impl().grad; }

  // Gradient storage belongs to the shared buffer, so these are usable
  // through const handles captured by backward closures.

  /// Allocates (zero-filled) gradient storage if absent and returns it.
  std::span<T> ensure_grad() const {
    auto& im = shared();
    if (im.grad.empty()) {
      im.grad.assign(im.data.size(), T(0));
      AllocStats::add(im.grad.size() * sizeof(T));
    }
    return im.grad;
  }

  void zero_grad() const {
    auto& g = shared().grad;
    std::fill(g.begin(), g.end(), T(0));
  }

  void clear_grad() const {
    auto& im = shared();
    AllocStats::sub(im.grad.size() * sizeof(T));
    im.grad.clear();
    im.grad.shrink_to_fit();
  }

  /// Deep copy of the values; the copy has no gradient and keeps requires_grad.
  Tensor clone() const {
    Tensor t(shape(), values(), requires_grad());
    return t;
  }

  /// Same values, new storage, never requires grad.
  Tensor detach() const { return Tensor(shape(), values(), false); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Reinterprets the element count under a new shape (copies storage).
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw DimensionError("cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
    return Tensor(std::move(shape), values(), false);
  }

 private:
  struct Impl {
    explicit Impl(Shape s) : shape(std::move(s)), data(checked_numel(shape)) {
      AllocStats::add(data.size() * sizeof(T));
    }
    Impl(Shape s, std::vector<T> v) : shape(std::move(s)), data(std::move(v)) {
      if (checked_numel(shape) != data.size())
        throw DimensionError("shape " + to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
      AllocStats::add(data.size() * sizeof(T));
    }
    ~Impl() { AllocStats::sub((data.size() + grad.size()) * sizeof(T)); }
    Impl(const Impl&) = delete;
    Impl& operator=(const Impl&) = delete;

    static std::size_t checked_numel(const Shape& s) {
      if (s.empty()) throw DimensionError("tensor shape must have at least one axis");
      for (auto n : s)
        if (n == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(s));
      return numel(s);
    }

    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Impl& impl() {
    if (!impl_) throw Error("use of an undefined tensor");
    return *impl_;
  }
  const Impl& impl() const {
    if (!impl_) throw Error("use of an undefined tensor");
    return *impl_;
  }
  Impl& shared() const {
    if (!impl_) throw Error("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

}  // namespace pat
