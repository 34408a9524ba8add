#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "icam/errors.hpp"

namespace icam {

/// Dense row-major 2D grid. Images are Grid<float>, masks Grid<std::uint8_t>.
template <class T>
struct Grid {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::int64_t h, std::int64_t w, T fill = T{})
      : height(h), width(w), data(static_cast<std::size_t>(h * w), fill) {}

  T& at(std::int64_t row, std::int64_t col) { return data[static_cast<std::size_t>(row * width + col)]; }
  const T& at(std::int64_t row, std::int64_t col) const {
    return data[static_cast<std::size_t>(row * width + col)];
  }

  std::int64_t size() const { return height * width; }
  bool same_shape(std::int64_t h, std::int64_t w) const { return height == h && width == w; }

  template <class U>
  bool same_shape(const Grid<U>& other) const {
    return height == other.height && width == other.width;
  }

  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }

  bool operator==(const Grid&) const = default;
};

using Image = Grid<float>;
using Mask = Grid<std::uint8_t>;

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(what) + ": grid shapes differ");
  }
}

}  // namespace icam
