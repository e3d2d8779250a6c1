#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>

namespace memwarp {

template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InitializationError : std::logic_error {
  using std::logic_error::logic_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense H x W x C grid, row-major with channels innermost:
// element (y, x, c) lives at (y*width + x)*channels + c.
template <typename T>
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  ArrayX<T> data;

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, T fill = T(0))
      : height(h), width(w), channels(c) {
    if (h <= 0 || w <= 0 || c <= 0)
      throw DimensionError("FeatureMap: dims must be positive");
    data = ArrayX<T>::Constant(static_cast<Eigen::Index>(h) * w * c, fill);
  }

  Eigen::Index size() const { return data.size(); }
  Eigen::Index offset(int y, int x) const {
    return (static_cast<Eigen::Index>(y) * width + x) * channels;
  }
  T& at(int y, int x, int c) { return data[offset(y, x) + c]; }
  T at(int y, int x, int c) const { return data[offset(y, x) + c]; }

  // channel vector at one pixel
  auto pixel(int y, int x) { return data.segment(offset(y, x), channels); }
  auto pixel(int y, int x) const { return data.segment(offset(y, x), channels); }

  bool same_shape(const FeatureMap& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool all_finite() const { return data.isFinite().all(); }

  template <typename U>
  FeatureMap<U> cast() const {
    FeatureMap<U> out(height, width, channels);
    out.data = data.template cast<U>();
    return out;
  }
};

// Dense H x W x 2 grid of (dx, dy) offsets in feature-grid pixel units,
// x = column. Layout matches FeatureMap with channels = 2.
template <typename T>
struct DisplacementField {
  int height = 0;
  int width = 0;
  ArrayX<T> data;

  DisplacementField() = default;
  DisplacementField(int h, int w, T fill_dx = T(0), T fill_dy = T(0))
      : height(h), width(w) {
    if (h <= 0 || w <= 0)
      throw DimensionError("DisplacementField: dims must be positive");
    data.resize(static_cast<Eigen::Index>(h) * w * 2);
    for (Eigen::Index i = 0; i < data.size(); i += 2) {
      data[i] = fill_dx;
      data[i + 1] = fill_dy;
    }
  }

  Eigen::Index size() const { return data.size(); }
  Eigen::Index offset(int y, int x) const {
    return (static_cast<Eigen::Index>(y) * width + x) * 2;
  }
  T& dx(int y, int x) { return data[offset(y, x)]; }
  T dx(int y, int x) const { return data[offset(y, x)]; }
  T& dy(int y, int x) { return data[offset(y, x) + 1]; }
  T dy(int y, int x) const { return data[offset(y, x) + 1]; }

  bool same_shape(const DisplacementField& o) const {
    return height == o.height && width == o.width;
  }
  bool all_finite() const { return data.isFinite().all(); }

  template <typename U>
  DisplacementField<U> cast() const {
    DisplacementField<U> out(height, width);
    out.data = data.template cast<U>();
    return out;
  }
};

namespace detail {
template <typename T>
inline void require_same_shape(const FeatureMap<T>& a, const FeatureMap<T>& b,
                               const char* who) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(who) + ": shape mismatch");
}
}  // namespace detail

template <typename T>
FeatureMap<T> add(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  detail::require_same_shape(a, b, "add");
  FeatureMap<T> out(a.height, a.width, a.channels);
  out.data = a.data + b.data;
  return out;
}

template <typename T>
FeatureMap<T> scale(const FeatureMap<T>& a, T s) {
  FeatureMap<T> out(a.height, a.width, a.channels);
  out.data = a.data * s;
  return out;
}

// (1-t)*a + t*b
template <typename T>
FeatureMap<T> lerp(const FeatureMap<T>& a, const FeatureMap<T>& b, T t) {
  detail::require_same_shape(a, b, "lerp");
  FeatureMap<T> out(a.height, a.width, a.channels);
  out.data = a.data + (b.data - a.data) * t;
  return out;
}

template <typename T>
FeatureMap<T>& accumulate(FeatureMap<T>& into, const FeatureMap<T>& x,
                          T coeff = T(1)) {
  detail::require_same_shape(into, x, "accumulate");
  into.data += x.data * coeff;
  return into;
}

}  // namespace memwarp
