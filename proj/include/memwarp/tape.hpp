#pragma once

#include "memwarp/conv.hpp"
#include "memwarp/params.hpp"
#include "memwarp/tensor.hpp"
#include "memwarp/warp.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace memwarp {

// A value in the recorded computation, paired with its gradient buffer.
template <typename T>
struct VarData {
  FeatureMap<T> value;
  FeatureMap<T> grad;
};

template <typename T>
using Var = std::shared_ptr<VarData<T>>;

template <typename T>
Var<T> make_var(FeatureMap<T> v) {
  auto p = std::make_shared<VarData<T>>();
  p->grad = FeatureMap<T>(v.height, v.width, v.channels);
  p->value = std::move(v);
  return p;
}

// Reverse-mode tape. Each recorded node saves what its backward step needs
// inside a closure; forward execution order is a topological order of the
// graph, so replaying nodes in reverse propagates gradients to every leaf.
template <typename T>
struct Tape {
  struct Node {
    const char* op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes;

  void record(const char* op, std::function<void()> fn) {
    nodes.push_back({op, std::move(fn)});
  }
  void backward() {
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) it->backward();
  }
  std::size_t size() const { return nodes.size(); }
  void clear() { nodes.clear(); }
};

// --- taped primitives -------------------------------------------------
// Every op also works untaped (tape == nullptr): it then just computes the
// forward value through the same kernel, so inference and training share
// one arithmetic path.

template <typename T>
Var<T> op_conv2d(Tape<T>* tape, const Var<T>& x, ParamEntry<T>& w,
                 ParamEntry<T>& b, int kh, int kw, int cout, int stride,
                 int pad) {
  auto out = make_var(conv2d_forward(x->value, w.value, b.value, kh, kw, cout,
                                     stride, pad));
  if (tape) {
    ParamEntry<T>* wp = &w;
    ParamEntry<T>* bp = &b;
    tape->record("conv2d", [=]() {
      conv2d_backward(x->value, wp->value, kh, kw, cout, stride, pad,
                      out->grad, &x->grad, &wp->grad, &bp->grad);
    });
  }
  return out;
}

template <typename T>
Var<T> op_relu(Tape<T>* tape, const Var<T>& x) {
  auto out = make_var(relu_forward(x->value));
  if (tape)
    tape->record("relu",
                 [=]() { relu_backward(x->value, out->grad, &x->grad); });
  return out;
}

template <typename T>
Var<T> op_avgpool(Tape<T>* tape, const Var<T>& x, int k) {
  auto out = make_var(avgpool_forward(x->value, k));
  if (tape)
    tape->record("avgpool", [=]() { avgpool_backward(k, out->grad, &x->grad); });
  return out;
}

namespace detail {
template <typename T>
DisplacementField<T> as_field(const FeatureMap<T>& m) {
  if (m.channels != 2) throw DimensionError("as_field: need 2 channels");
  DisplacementField<T> f(m.height, m.width);
  f.data = m.data;
  return f;
}
}  // namespace detail

// Warp by a constant field (no gradient into the field).
template <typename T>
Var<T> op_warp(Tape<T>* tape, const Var<T>& src,
               const DisplacementField<T>& field) {
  auto out = make_var(warp(src->value, field));
  if (tape) {
    auto fld = field;  // keep alive
    tape->record("warp", [=]() {
      auto g = warp_backward(src->value, fld, out->grad);
      src->grad.data += g.d_source.data;
    });
  }
  return out;
}

// Warp by a learned field held as an H x W x 2 variable.
template <typename T>
Var<T> op_warp_var(Tape<T>* tape, const Var<T>& src, const Var<T>& field) {
  auto fld = detail::as_field(field->value);
  auto out = make_var(warp(src->value, fld));
  if (tape) {
    tape->record("warp_var", [=]() {
      auto g = warp_backward(src->value, fld, out->grad);
      src->grad.data += g.d_source.data;
      field->grad.data += g.d_field.data;
    });
  }
  return out;
}

// Field composition with both operands learned: out = second + first o second.
template <typename T>
Var<T> op_compose(Tape<T>* tape, const Var<T>& first, const Var<T>& second) {
  auto f1 = detail::as_field(first->value);
  auto f2 = detail::as_field(second->value);
  auto composed = compose_fields(f1, f2);
  FeatureMap<T> out_map(composed.height, composed.width, 2);
  out_map.data = composed.data;
  auto out = make_var(std::move(out_map));
  if (tape) {
    tape->record("compose", [=]() {
      // out = second + warp_clamp(first, second)
      auto g = warp_backward(first->value, f2, out->grad, Border::Clamp);
      first->grad.data += g.d_source.data;
      second->grad.data += out->grad.data + g.d_field.data;
    });
  }
  return out;
}

// 0.5 * (a + b)
template <typename T>
Var<T> op_average(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value, b->value, "op_average");
  FeatureMap<T> v(a->value.height, a->value.width, a->value.channels);
  v.data = T(0.5) * (a->value.data + b->value.data);
  auto out = make_var(std::move(v));
  if (tape) {
    tape->record("average", [=]() {
      a->grad.data += T(0.5) * out->grad.data;
      b->grad.data += T(0.5) * out->grad.data;
    });
  }
  return out;
}

// Mean over a set of equally shaped maps.
template <typename T>
Var<T> op_mean(Tape<T>* tape, const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw DimensionError("op_mean: empty input");
  FeatureMap<T> v(xs[0]->value.height, xs[0]->value.width,
                  xs[0]->value.channels);
  for (const auto& x : xs) v.data += x->value.data;
  const T inv = T(1) / T(xs.size());
  v.data *= inv;
  auto out = make_var(std::move(v));
  if (tape) {
    tape->record("mean", [=]() {
      for (const auto& x : xs) x->grad.data += inv * out->grad.data;
    });
  }
  return out;
}

namespace detail {
// alpha = sigmoid(sm - sf) per pixel, computed the same way in the taped op
// and in the standalone aggregation below.
template <typename T>
FeatureMap<T> blend_alpha(const FeatureMap<T>& sm, const FeatureMap<T>& sf) {
  FeatureMap<T> a(sm.height, sm.width, 1);
  a.data = T(1) / (T(1) + (sf.data - sm.data).exp());
  return a;
}
}  // namespace detail

// Per-pixel convex combination out = alpha * m + (1 - alpha) * f with
// alpha = softmax over the two 1-channel score maps (sm, sf).
template <typename T>
Var<T> op_convex_blend(Tape<T>* tape, const Var<T>& m, const Var<T>& f,
                       const Var<T>& sm, const Var<T>& sf) {
  detail::require_same_shape(m->value, f->value, "op_convex_blend");
  if (sm->value.channels != 1 || sf->value.channels != 1)
    throw DimensionError("op_convex_blend: score maps must be 1-channel");
  const int H = m->value.height, W = m->value.width, C = m->value.channels;
  auto alpha = detail::blend_alpha(sm->value, sf->value);
  FeatureMap<T> v(H, W, C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const T a = alpha.at(y, x, 0);
      v.pixel(y, x) = a * m->value.pixel(y, x) + (T(1) - a) * f->value.pixel(y, x);
    }
  auto out = make_var(std::move(v));
  if (tape) {
    tape->record("convex_blend", [=]() {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const T a = alpha.at(y, x, 0);
          const auto up = out->grad.pixel(y, x);
          m->grad.pixel(y, x) += a * up;
          f->grad.pixel(y, x) += (T(1) - a) * up;
          const T dd = a * (T(1) - a) *
                       (up * (m->value.pixel(y, x) - f->value.pixel(y, x))).sum();
          sm->grad.at(y, x, 0) += dd;
          sf->grad.at(y, x, 0) -= dd;
        }
    });
  }
  return out;
}

// Concatenate two maps along channels.
template <typename T>
Var<T> op_concat(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.height != b->value.height || a->value.width != b->value.width)
    throw DimensionError("op_concat: spatial shape mismatch");
  const int H = a->value.height, W = a->value.width;
  const int ca = a->value.channels, cb = b->value.channels;
  FeatureMap<T> v(H, W, ca + cb);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      v.data.segment(v.offset(y, x), ca) = a->value.pixel(y, x);
      v.data.segment(v.offset(y, x) + ca, cb) = b->value.pixel(y, x);
    }
  auto out = make_var(std::move(v));
  if (tape) {
    tape->record("concat", [=]() {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          a->grad.pixel(y, x) += out->grad.data.segment(out->grad.offset(y, x), ca);
          b->grad.pixel(y, x) +=
              out->grad.data.segment(out->grad.offset(y, x) + ca, cb);
        }
    });
  }
  return out;
}

}  // namespace memwarp
