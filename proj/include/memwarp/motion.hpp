#pragma once

#include "memwarp/conv.hpp"
#include "memwarp/tensor.hpp"
#include "memwarp/warp.hpp"

#include <optional>
#include <random>
#include <vector>

namespace memwarp {

// Small stand-in flow network: two stacked frames -> three 3x3 convolutions
// of widths (hidden, hidden, 2) with 2x pooling between, so the field comes
// out at quarter resolution. The last layer starts at zero, i.e. the
// untrained estimator predicts the identity warp.
template <typename T>
struct FlowNetParams {
  int in_channels = 6;
  int hidden = 16;
  ArrayX<T> w1, b1, w2, b2, w3, b3;

  static FlowNetParams zero_init(int image_channels, int hidden,
                                 std::mt19937& rng) {
    FlowNetParams p;
    p.in_channels = 2 * image_channels;
    p.hidden = hidden;
    auto fill = [&rng](ArrayX<T>& a, Eigen::Index n, int fan_in) {
      a = ArrayX<T>::Zero(n);
      const double limit = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index i = 0; i < n; ++i) a[i] = T(u(rng));
    };
    fill(p.w1, Eigen::Index(9) * p.in_channels * hidden, 9 * p.in_channels);
    p.b1 = ArrayX<T>::Zero(hidden);
    fill(p.w2, Eigen::Index(9) * hidden * hidden, 9 * hidden);
    p.b2 = ArrayX<T>::Zero(hidden);
    p.w3 = ArrayX<T>::Zero(Eigen::Index(9) * hidden * 2);
    p.b3 = ArrayX<T>::Zero(2);
    return p;
  }
};

template <typename T>
FeatureMap<T> stack_frames(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  if (a.height != b.height || a.width != b.width)
    throw DimensionError("stack_frames: spatial shape mismatch");
  FeatureMap<T> out(a.height, a.width, a.channels + b.channels);
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      out.data.segment(out.offset(y, x), a.channels) = a.pixel(y, x);
      out.data.segment(out.offset(y, x) + a.channels, b.channels) = b.pixel(y, x);
    }
  return out;
}

template <typename T>
DisplacementField<T> flow_net_forward(const FlowNetParams<T>& p,
                                      const FeatureMap<T>& frame_t,
                                      const FeatureMap<T>& frame_prev) {
  auto x = stack_frames(frame_t, frame_prev);
  auto h1 = relu_forward(conv2d_forward(x, p.w1, p.b1, 3, 3, p.hidden, 1, 1));
  auto d1 = avgpool_forward(h1, 2);
  auto h2 = relu_forward(conv2d_forward(d1, p.w2, p.b2, 3, 3, p.hidden, 1, 1));
  auto d2 = avgpool_forward(h2, 2);
  auto f = conv2d_forward(d2, p.w3, p.b3, 3, 3, 2, 1, 1);
  DisplacementField<T> out(f.height, f.width);
  out.data = f.data;
  return out;
}

// Displacement source: exact generator fields, or the learnable estimator.
template <typename T>
struct FlowSource {
  enum class Kind { GroundTruth, ToyEstimator };
  Kind kind = Kind::GroundTruth;
  const std::vector<DisplacementField<T>>* ground_truth = nullptr;
  FlowNetParams<T> net;

  static FlowSource from_fields(const std::vector<DisplacementField<T>>* f) {
    FlowSource s;
    s.kind = Kind::GroundTruth;
    s.ground_truth = f;
    return s;
  }
  static FlowSource from_net(FlowNetParams<T> p) {
    FlowSource s;
    s.kind = Kind::ToyEstimator;
    s.net = std::move(p);
    return s;
  }
};

// frame_index identifies the generator field D_(t,t-1) in GroundTruth mode;
// the estimator ignores it.
template <typename T>
DisplacementField<T> estimate_flow(const FeatureMap<T>& frame_t,
                                   const FeatureMap<T>& frame_prev,
                                   const FlowSource<T>& source,
                                   int frame_index = -1) {
  if (frame_t.height != frame_prev.height || frame_t.width != frame_prev.width)
    throw DimensionError("estimate_flow: frame shape mismatch");
  if (source.kind == FlowSource<T>::Kind::GroundTruth) {
    if (!source.ground_truth || frame_index < 0 ||
        frame_index >= static_cast<int>(source.ground_truth->size()))
      throw std::invalid_argument("estimate_flow: ground-truth field missing");
    return (*source.ground_truth)[frame_index];
  }
  return flow_net_forward(source.net, frame_t, frame_prev);
}

// Ring buffer of the two most recent per-frame fields.
template <typename T>
struct FlowHistory {
  std::optional<DisplacementField<T>> older;  // D_(t-1, t-2)
  std::optional<DisplacementField<T>> newer;  // D_(t, t-1)

  void push(DisplacementField<T> d) {
    if (newer && !newer->same_shape(d))
      throw DimensionError("FlowHistory: inconsistent shapes");
    older = std::move(newer);
    newer = std::move(d);
  }
  bool full() const { return older && newer; }
  void clear() {
    older.reset();
    newer.reset();
  }
};

// Constant-acceleration extrapolation. The acceleration is the difference
// between the newest field and the older one aligned to it by bilinear
// sampling; step i predicts newest + i * acceleration, re-based into the
// coordinates of the previously predicted frame via the accumulated
// composition of predicted steps. Field resampling clamps at the border so
// spatially uniform motion extrapolates exactly.
template <typename T>
std::vector<DisplacementField<T>> extrapolate_flow(
    const FlowHistory<T>& history, int steps) {
  if (!history.full())
    throw std::invalid_argument("extrapolate_flow: incomplete history");
  if (steps <= 0)
    throw std::invalid_argument("extrapolate_flow: steps must be positive");
  const auto& cur = *history.newer;
  const auto& prev = *history.older;
  const int H = cur.height, W = cur.width;

  DisplacementField<T> acc(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto [px, py] = sample_field(prev, T(x) + cur.dx(y, x),
                                         T(y) + cur.dy(y, x), Border::Clamp);
      acc.dx(y, x) = cur.dx(y, x) - px;
      acc.dy(y, x) = cur.dy(y, x) - py;
    }

  std::vector<DisplacementField<T>> preds;
  preds.reserve(steps);
  DisplacementField<T> carry(H, W);  // composed offset back to the last real frame
  for (int i = 1; i <= steps; ++i) {
    DisplacementField<T> base(H, W);
    base.data = cur.data + T(i) * acc.data;
    DisplacementField<T> pred(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const auto [bx, by] = sample_field(base, T(x) + carry.dx(y, x),
                                           T(y) + carry.dy(y, x), Border::Clamp);
        pred.dx(y, x) = bx;
        pred.dy(y, x) = by;
      }
    carry = compose_fields(carry, pred);
    preds.push_back(std::move(pred));
  }
  return preds;
}

}  // namespace memwarp
