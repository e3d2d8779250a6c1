#pragma once

#include "memwarp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace memwarp {

// Sampling convention: output pixel p reads the source at p + field(p).
// Border::Zero reads outside [0,W-1]x[0,H-1] contribute zero (feature warps);
// Border::Clamp replicates the border (field resampling, where a constant
// field must stay constant).
enum class Border { Zero, Clamp };

template <typename T>
struct WarpGradients {
  FeatureMap<T> d_source;
  DisplacementField<T> d_field;
};

namespace detail {

// One bilinear read of channel c at continuous location (sx, sy).
template <typename T>
inline T corner_value(const FeatureMap<T>& m, int y, int x, int c, Border b) {
  if (b == Border::Clamp) {
    y = std::clamp(y, 0, m.height - 1);
    x = std::clamp(x, 0, m.width - 1);
    return m.at(y, x, c);
  }
  if (y < 0 || y >= m.height || x < 0 || x >= m.width) return T(0);
  return m.at(y, x, c);
}

template <typename T>
struct BilinearCell {
  int x0, y0;
  T wx1, wy1;  // fractional weights toward x0+1 / y0+1
};

template <typename T>
inline BilinearCell<T> locate(T sx, T sy) {
  const T fx = std::floor(sx);
  const T fy = std::floor(sy);
  return {static_cast<int>(fx), static_cast<int>(fy), sx - fx, sy - fy};
}

}  // namespace detail

template <typename T>
T bilinear_sample(const FeatureMap<T>& m, T sx, T sy, int c,
                  Border border = Border::Zero) {
  const auto cell = detail::locate(sx, sy);
  const T wx0 = T(1) - cell.wx1, wy0 = T(1) - cell.wy1;
  const T v00 = detail::corner_value(m, cell.y0, cell.x0, c, border);
  const T v01 = detail::corner_value(m, cell.y0, cell.x0 + 1, c, border);
  const T v10 = detail::corner_value(m, cell.y0 + 1, cell.x0, c, border);
  const T v11 = detail::corner_value(m, cell.y0 + 1, cell.x0 + 1, c, border);
  return wy0 * (wx0 * v00 + cell.wx1 * v01) + cell.wy1 * (wx0 * v10 + cell.wx1 * v11);
}

namespace detail {
template <typename T>
inline std::pair<T, T> field_corner(const DisplacementField<T>& f, int y,
                                    int x, Border b) {
  if (b == Border::Clamp) {
    y = std::clamp(y, 0, f.height - 1);
    x = std::clamp(x, 0, f.width - 1);
    return {f.dx(y, x), f.dy(y, x)};
  }
  if (y < 0 || y >= f.height || x < 0 || x >= f.width) return {T(0), T(0)};
  return {f.dx(y, x), f.dy(y, x)};
}
}  // namespace detail

// (dx, dy) of a field read at a continuous location.
template <typename T>
std::pair<T, T> sample_field(const DisplacementField<T>& f, T sx, T sy,
                             Border border = Border::Clamp) {
  const auto cell = detail::locate(sx, sy);
  const T wx0 = T(1) - cell.wx1, wy0 = T(1) - cell.wy1;
  const auto [x00, y00] = detail::field_corner(f, cell.y0, cell.x0, border);
  const auto [x01, y01] = detail::field_corner(f, cell.y0, cell.x0 + 1, border);
  const auto [x10, y10] = detail::field_corner(f, cell.y0 + 1, cell.x0, border);
  const auto [x11, y11] = detail::field_corner(f, cell.y0 + 1, cell.x0 + 1, border);
  return {wy0 * (wx0 * x00 + cell.wx1 * x01) + cell.wy1 * (wx0 * x10 + cell.wx1 * x11),
          wy0 * (wx0 * y00 + cell.wx1 * y01) + cell.wy1 * (wx0 * y10 + cell.wx1 * y11)};
}

namespace detail {
// Effective corner index, or -1 when a zero-border read falls outside.
inline int resolve(int i, int n, Border b) {
  if (b == Border::Clamp) return i < 0 ? 0 : (i >= n ? n - 1 : i);
  return (i >= 0 && i < n) ? i : -1;
}
}  // namespace detail

// out(p, c) = bilinear(source, p + field(p), c).
template <typename T>
FeatureMap<T> warp(const FeatureMap<T>& source,
                   const DisplacementField<T>& field,
                   Border border = Border::Zero) {
  if (source.height != field.height || source.width != field.width)
    throw DimensionError("warp: source/field shape mismatch");
  const int H = source.height, W = source.width, C = source.channels;
  FeatureMap<T> out(H, W, C);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const T sx = T(x) + field.dx(y, x);
      const T sy = T(y) + field.dy(y, x);
      const auto cell = detail::locate(sx, sy);
      const T wx1 = cell.wx1, wy1 = cell.wy1;
      const T wx0 = T(1) - wx1, wy0 = T(1) - wy1;
      auto dst = out.pixel(y, x);
      const int y0 = detail::resolve(cell.y0, H, border);
      const int y1 = detail::resolve(cell.y0 + 1, H, border);
      const int x0 = detail::resolve(cell.x0, W, border);
      const int x1 = detail::resolve(cell.x0 + 1, W, border);
      if (y0 >= 0 && x0 >= 0) dst += wy0 * wx0 * source.pixel(y0, x0);
      if (y0 >= 0 && x1 >= 0) dst += wy0 * wx1 * source.pixel(y0, x1);
      if (y1 >= 0 && x0 >= 0) dst += wy1 * wx0 * source.pixel(y1, x0);
      if (y1 >= 0 && x1 >= 0) dst += wy1 * wx1 * source.pixel(y1, x1);
    }
  }
  return out;
}

// Analytic gradients of warp() w.r.t. source and field. At integer sampling
// locations the field gradient is the one-sided expression given by the
// bilinear weights as written.
template <typename T>
WarpGradients<T> warp_backward(const FeatureMap<T>& source,
                               const DisplacementField<T>& field,
                               const FeatureMap<T>& upstream,
                               Border border = Border::Zero) {
  if (source.height != field.height || source.width != field.width)
    throw DimensionError("warp_backward: source/field shape mismatch");
  if (!source.same_shape(upstream))
    throw DimensionError("warp_backward: upstream shape mismatch");
  const int H = source.height, W = source.width, C = source.channels;
  WarpGradients<T> g{FeatureMap<T>(H, W, C), DisplacementField<T>(H, W)};
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const T sx = T(x) + field.dx(y, x);
      const T sy = T(y) + field.dy(y, x);
      const auto cell = detail::locate(sx, sy);
      const T wx1 = cell.wx1, wy1 = cell.wy1;
      const T wx0 = T(1) - wx1, wy0 = T(1) - wy1;
      const int y0 = detail::resolve(cell.y0, H, border);
      const int y1 = detail::resolve(cell.y0 + 1, H, border);
      const int x0 = detail::resolve(cell.x0, W, border);
      const int x1 = detail::resolve(cell.x0 + 1, W, border);
      const auto up = upstream.pixel(y, x);

      if (y0 >= 0 && x0 >= 0) g.d_source.pixel(y0, x0) += wy0 * wx0 * up;
      if (y0 >= 0 && x1 >= 0) g.d_source.pixel(y0, x1) += wy0 * wx1 * up;
      if (y1 >= 0 && x0 >= 0) g.d_source.pixel(y1, x0) += wy1 * wx0 * up;
      if (y1 >= 0 && x1 >= 0) g.d_source.pixel(y1, x1) += wy1 * wx1 * up;

      T gx = T(0), gy = T(0);
      for (int c = 0; c < C; ++c) {
        const T v00 = y0 >= 0 && x0 >= 0 ? source.at(y0, x0, c) : T(0);
        const T v01 = y0 >= 0 && x1 >= 0 ? source.at(y0, x1, c) : T(0);
        const T v10 = y1 >= 0 && x0 >= 0 ? source.at(y1, x0, c) : T(0);
        const T v11 = y1 >= 0 && x1 >= 0 ? source.at(y1, x1, c) : T(0);
        const T u = up[c];
        gx += u * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
        gy += u * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
      }
      g.d_field.dx(y, x) = gx;
      g.d_field.dy(y, x) = gy;
    }
  }
  return g;
}

// composed(p) = second(p) + first(p + second(p)); warping by the composed
// field approximates warping by first, then by second. The inner read uses
// border clamping so that constant fields compose exactly.
template <typename T>
DisplacementField<T> compose_fields(const DisplacementField<T>& first,
                                    const DisplacementField<T>& second) {
  if (!first.same_shape(second))
    throw DimensionError("compose_fields: shape mismatch");
  const int H = first.height, W = first.width;
  DisplacementField<T> out(H, W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const T sx = T(x) + second.dx(y, x);
      const T sy = T(y) + second.dy(y, x);
      const auto [fx, fy] = sample_field(first, sx, sy, Border::Clamp);
      out.dx(y, x) = second.dx(y, x) + fx;
      out.dy(y, x) = second.dy(y, x) + fy;
    }
  }
  return out;
}

// Left fold of compose_fields over per-frame fields ordered oldest..newest,
// giving one field that spans the whole gap.
template <typename T, typename Iter>
DisplacementField<T> compose_span(Iter begin, Iter end) {
  if (begin == end) throw DimensionError("compose_span: empty range");
  DisplacementField<T> acc = *begin;
  for (auto it = std::next(begin); it != end; ++it)
    acc = compose_fields(acc, *it);
  return acc;
}

}  // namespace memwarp
