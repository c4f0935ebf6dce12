#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace imcx {

// Vectorised kernels peel loops by runtime address alignment; a fixed alignment keeps
// floating-point summation order, and hence results, identical from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

// Dense channel-major (C, H, W) tensor of doubles. Vectors are stored as (N, 1, 1).
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  Buffer data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  static Tensor vector(std::span<const double> values) {
    Tensor t(static_cast<int>(values.size()), 1, 1);
    t.data.assign(values.begin(), values.end());
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::span<double> channel(int c) { return {data.data() + c * plane(), plane()}; }
  std::span<const double> channel(int c) const {
    return {data.data() + c * plane(), plane()};
  }

  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  std::string shape_string() const;
};

double sum(const Tensor& t);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

Tensor hadamard(const Tensor& a, const Tensor& b);

}  // namespace imcx
