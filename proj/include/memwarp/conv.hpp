#pragma once

#include "memwarp/tensor.hpp"

namespace memwarp {

// Weight layout for a kh x kw convolution mapping cin -> cout channels:
// w[((ky*kw + kx)*cin + ci)*cout + co], bias b[co].

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
FeatureMap<T> conv2d_forward(const FeatureMap<T>& x, const ArrayX<T>& w,
                             const ArrayX<T>& b, int kh, int kw, int cout,
                             int stride, int pad) {
  const int cin = x.channels;
  if (w.size() != Eigen::Index(kh) * kw * cin * cout)
    throw DimensionError("conv2d: weight size mismatch");
  if (b.size() != cout) throw DimensionError("conv2d: bias size mismatch");
  const int ho = conv_out_dim(x.height, kh, stride, pad);
  const int wo = conv_out_dim(x.width, kw, stride, pad);
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: empty output");
  FeatureMap<T> out(ho, wo, cout);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      auto dst = out.pixel(oy, ox);
      dst = b;
      const int y0 = oy * stride - pad;
      const int x0 = ox * stride - pad;
      for (int ky = 0; ky < kh; ++ky) {
        const int yy = y0 + ky;
        if (yy < 0 || yy >= x.height) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int xx = x0 + kx;
          if (xx < 0 || xx >= x.width) continue;
          const Eigen::Index wbase =
              (static_cast<Eigen::Index>(ky) * kw + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci)
            dst += x.at(yy, xx, ci) * w.segment(wbase + ci * cout, cout);
        }
      }
    }
  }
  return out;
}

// Accumulates into dx/dw/db; any of them may be null.
template <typename T>
void conv2d_backward(const FeatureMap<T>& x, const ArrayX<T>& w, int kh,
                     int kw, int cout, int stride, int pad,
                     const FeatureMap<T>& up, FeatureMap<T>* dx, ArrayX<T>* dw,
                     ArrayX<T>* db) {
  const int cin = x.channels;
  const int ho = up.height, wo = up.width;
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const auto g = up.pixel(oy, ox);
      if (db) *db += g;
      const int y0 = oy * stride - pad;
      const int x0 = ox * stride - pad;
      for (int ky = 0; ky < kh; ++ky) {
        const int yy = y0 + ky;
        if (yy < 0 || yy >= x.height) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int xx = x0 + kx;
          if (xx < 0 || xx >= x.width) continue;
          const Eigen::Index wbase =
              (static_cast<Eigen::Index>(ky) * kw + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            if (dx)
              dx->at(yy, xx, ci) += (g * w.segment(wbase + ci * cout, cout)).sum();
            if (dw) dw->segment(wbase + ci * cout, cout) += x.at(yy, xx, ci) * g;
          }
        }
      }
    }
  }
}

template <typename T>
FeatureMap<T> avgpool_forward(const FeatureMap<T>& x, int k) {
  if (x.height % k != 0 || x.width % k != 0)
    throw DimensionError("avgpool: dims not divisible by window");
  const int ho = x.height / k, wo = x.width / k, C = x.channels;
  const T inv = T(1) / T(k * k);
  FeatureMap<T> out(ho, wo, C);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      auto dst = out.pixel(oy, ox);
      for (int dy = 0; dy < k; ++dy)
        for (int dxi = 0; dxi < k; ++dxi)
          dst += x.pixel(oy * k + dy, ox * k + dxi);
      dst *= inv;
    }
  return out;
}

template <typename T>
void avgpool_backward(int k, const FeatureMap<T>& up, FeatureMap<T>* dx) {
  const T inv = T(1) / T(k * k);
  for (int oy = 0; oy < up.height; ++oy)
    for (int ox = 0; ox < up.width; ++ox) {
      const auto g = up.pixel(oy, ox);
      for (int dy = 0; dy < k; ++dy)
        for (int dxi = 0; dxi < k; ++dxi)
          dx->pixel(oy * k + dy, ox * k + dxi) += inv * g;
    }
}

template <typename T>
FeatureMap<T> relu_forward(const FeatureMap<T>& x) {
  FeatureMap<T> out(x.height, x.width, x.channels);
  out.data = x.data.max(T(0));
  return out;
}

template <typename T>
void relu_backward(const FeatureMap<T>& x, const FeatureMap<T>& up,
                   FeatureMap<T>* dx) {
  dx->data += (x.data > T(0)).template cast<T>() * up.data;
}

}  // namespace memwarp
