#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace headaudit {

// Dense row-major matrix. Used for prototype/classifier tables and small
// intermediate results; the large store tensors are flat vectors.
template <typename T>
struct RowMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  RowMatrix() = default;
  RowMatrix(std::size_t r, std::size_t c, T fill = T{})
      : rows(r), cols(c), data(r * c, fill) {}

  std::span<const T> row(std::size_t i) const {
    assert(i < rows);
    return {data.data() + i * cols, cols};
  }
  std::span<T> row(std::size_t i) {
    assert(i < rows);
    return {data.data() + i * cols, cols};
  }
  T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data[i * cols + j];
  }

  bool operator==(const RowMatrix&) const = default;
};

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    acc += static_cast<double>(a[k]) * static_cast<double>(b[k]);
  }
  return acc;
}

template <typename A>
double squared_norm(std::span<const A> a) {
  return dot(a, a);
}

}  // namespace headaudit
