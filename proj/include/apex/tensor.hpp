#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace apex {

// 64-byte-aligned storage. Fixed alignment keeps Eigen's vectorised kernels on
// one code path, so numeric results are bit-identical between invocations.
template <typename T, std::size_t Align = 64>
struct AlignedAlloc {
  using value_type = T;
  template <class U>
  struct rebind {
    using other = AlignedAlloc<U, Align>;
  };
  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U, Align>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(Align)); }
  template <class U>
  bool operator==(const AlignedAlloc<U, Align>&) const {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAlloc<U, Align>&) const {
    return false;
  }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

// Dense shape, up to 4 axes. Rank-0 is represented as rank-1 with dim 1.
struct Shape {
  std::array<int, 4> dim{1, 1, 1, 1};
  int rank = 1;

  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    assert(dims.size() >= 1 && dims.size() <= 4);
    rank = static_cast<int>(dims.size());
    int i = 0;
    for (int d : dims) dim[i++] = d;
  }

  int operator[](int i) const { return dim[i]; }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= dim[i];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (dim[i] != o.dim[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) s += std::to_string(dim[i]) + (i + 1 < rank ? "," : "");
    return s + "]";
  }
};

// Row-major dense tensor.
template <typename T>
struct Tensor {
  Shape shape;
  AlignedVec<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(static_cast<size_t>(s.numel()), T(0)) {}
  Tensor(Shape s, T fill) : shape(s), data(static_cast<size_t>(s.numel()), fill) {}

  static Tensor zeros(Shape s) { return Tensor(s); }
  static Tensor full(Shape s, T v) { return Tensor(s, v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }
  static Tensor from(Shape s, const std::vector<T>& d) {
    Tensor t;
    t.shape = s;
    assert(static_cast<int64_t>(d.size()) == s.numel());
    t.data.assign(d.begin(), d.end());
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  T& at(int i, int j) { return data[static_cast<size_t>(i) * shape.dim[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<size_t>(i) * shape.dim[1] + j]; }
  T& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape.dim[1] + j) * shape.dim[2] + k];
  }
  const T& at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape.dim[1] + j) * shape.dim[2] + k];
  }
  T& at(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape.dim[1] + j) * shape.dim[2] + k) * shape.dim[3] + l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape.dim[1] + j) * shape.dim[2] + k) * shape.dim[3] + l];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor reshaped(Shape s) const {
    if (s.numel() != numel())
      throw std::invalid_argument("reshape numel mismatch " + shape.str() + " -> " + s.str());
    Tensor t = *this;
    t.shape = s;
    return t;
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T max_abs() const {
    T m = 0;
    for (const T& v : data) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(v))));
    return m;
  }

  T sum() const { return std::accumulate(data.begin(), data.end(), T(0)); }
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  assert(a.numel() == b.numel());
  T m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, static_cast<T>(std::abs(static_cast<double>(a[i] - b[i]))));
  return m;
}

}  // namespace apex
