#pragma once

#include "memwarp/conv.hpp"
#include "memwarp/io.hpp"
#include "memwarp/tape.hpp"
#include "memwarp/tensor.hpp"
#include "memwarp/warp.hpp"

#include <json.hpp>

#include <deque>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace memwarp {

enum class AggregationKind { Average, LearnedWeighting };

inline const char* to_string(AggregationKind k) {
  return k == AggregationKind::Average ? "average" : "learned_weighting";
}
inline AggregationKind aggregation_kind_from(const std::string& s) {
  if (s == "average") return AggregationKind::Average;
  if (s == "learned_weighting") return AggregationKind::LearnedWeighting;
  throw FormatError("unknown aggregation kind: " + s);
}

// Score net: 3x3 conv (C -> hidden) + rectifier + 1x1 conv (hidden -> 1).
template <typename T>
struct WeightNetParams {
  int channels = 0;
  int hidden = 8;
  ArrayX<T> w1, b1, w2, b2;

  static WeightNetParams random(int channels, int hidden, std::mt19937& rng) {
    WeightNetParams p;
    p.channels = channels;
    p.hidden = hidden;
    const double limit = std::sqrt(6.0 / (9.0 * channels));
    std::uniform_real_distribution<double> u(-limit, limit);
    p.w1 = ArrayX<T>::Zero(Eigen::Index(9) * channels * hidden);
    for (Eigen::Index i = 0; i < p.w1.size(); ++i) p.w1[i] = T(u(rng));
    p.b1 = ArrayX<T>::Zero(hidden);
    const double limit2 = std::sqrt(6.0 / hidden);
    std::uniform_real_distribution<double> u2(-limit2, limit2);
    p.w2 = ArrayX<T>::Zero(hidden);
    for (Eigen::Index i = 0; i < p.w2.size(); ++i) p.w2[i] = T(u2(rng));
    p.b2 = ArrayX<T>::Zero(1);
    return p;
  }
};

template <typename T>
FeatureMap<T> weight_scores(const WeightNetParams<T>& net,
                            const FeatureMap<T>& x) {
  auto h = relu_forward(
      conv2d_forward(x, net.w1, net.b1, 3, 3, net.hidden, 1, 1));
  return conv2d_forward(h, net.w2, net.b2, 1, 1, 1, 1, 0);
}

template <typename T>
struct AggregationScheme {
  AggregationKind kind = AggregationKind::Average;
  WeightNetParams<T> psi_memory;   // scores the warped memory
  WeightNetParams<T> psi_feature;  // scores the new image evidence

  static AggregationScheme average() { return {}; }
  static AggregationScheme learned(int channels, std::mt19937& rng,
                                   int hidden = 8) {
    AggregationScheme s;
    s.kind = AggregationKind::LearnedWeighting;
    s.psi_memory = WeightNetParams<T>::random(channels, hidden, rng);
    s.psi_feature = WeightNetParams<T>::random(channels, hidden, rng);
    return s;
  }
};

// Both per-pixel weights, each computed through its own softmax expression;
// they sum to one up to rounding.
template <typename T>
std::pair<FeatureMap<T>, FeatureMap<T>> aggregate_weights(
    const AggregationScheme<T>& scheme, const FeatureMap<T>& memory,
    const FeatureMap<T>& evidence) {
  const auto sm = weight_scores(scheme.psi_memory, memory);
  const auto sf = weight_scores(scheme.psi_feature, evidence);
  FeatureMap<T> am(sm.height, sm.width, 1), af(sm.height, sm.width, 1);
  am.data = T(1) / (T(1) + (sf.data - sm.data).exp());
  af.data = T(1) / (T(1) + (sm.data - sf.data).exp());
  return {am, af};
}

// One aggregation step: plain averaging or the learned per-pixel convex
// combination of warped memory and image evidence.
template <typename T>
FeatureMap<T> aggregate(const FeatureMap<T>& memory,
                        const FeatureMap<T>& evidence,
                        const AggregationScheme<T>& scheme) {
  detail::require_same_shape(memory, evidence, "aggregate");
  if (scheme.kind == AggregationKind::Average) {
    FeatureMap<T> out(memory.height, memory.width, memory.channels);
    out.data = T(0.5) * (memory.data + evidence.data);
    return out;
  }
  const auto sm = weight_scores(scheme.psi_memory, memory);
  const auto sf = weight_scores(scheme.psi_feature, evidence);
  const auto alpha = detail::blend_alpha(sm, sf);
  FeatureMap<T> out(memory.height, memory.width, memory.channels);
  for (int y = 0; y < memory.height; ++y)
    for (int x = 0; x < memory.width; ++x) {
      const T a = alpha.at(y, x, 0);
      out.pixel(y, x) = a * memory.pixel(y, x) + (T(1) - a) * evidence.pixel(y, x);
    }
  return out;
}

// Time axes k with update period 2^(k-1) frames.
struct ClockConfig {
  std::vector<int> axis_ids;

  std::vector<int> strides() const {
    std::vector<int> s;
    int prev = 0;
    for (int k : axis_ids) {
      if (k < 1) throw std::invalid_argument("ClockConfig: axis ids start at 1");
      const int stride = 1 << (k - 1);
      if (stride <= prev)
        throw std::invalid_argument("ClockConfig: strides must increase");
      s.push_back(stride);
      prev = stride;
    }
    if (s.empty()) throw std::invalid_argument("ClockConfig: no axes");
    return s;
  }
};

template <typename T>
struct MemoryState {
  std::vector<FeatureMap<T>> axes;
  std::vector<int> strides;
  std::vector<char> initialized;
  long frame_counter = 0;

  int num_axes() const { return static_cast<int>(strides.size()); }
};

template <typename T>
MemoryState<T> make_memory_state(const std::vector<int>& strides) {
  MemoryState<T> s;
  s.strides = strides;
  s.axes.resize(strides.size());
  s.initialized.assign(strides.size(), 0);
  return s;
}

template <typename T>
MemoryState<T> make_memnet_state() {
  return make_memory_state<T>({1});
}

template <typename T>
MemoryState<T> make_clocknet_state(const ClockConfig& cfg) {
  return make_memory_state<T>(cfg.strides());
}

// One multi-rate step. Frame 0 initializes every axis with the evidence.
// At later frames, an axis whose stride divides the frame counter is warped
// across its whole inter-update gap (per-frame fields composed, oldest
// first) and refreshed with evidence when present; other axes keep their
// map untouched. recent_fields holds per-frame fields, newest last, and
// must cover the stride of every due axis.
template <typename T>
void clocknet_step(MemoryState<T>& state, const FeatureMap<T>* evidence,
                   const std::deque<DisplacementField<T>>& recent_fields,
                   const AggregationScheme<T>& scheme) {
  const long t = state.frame_counter;
  if (t == 0) {
    if (!evidence)
      throw InitializationError("clocknet_step: first frame needs evidence");
    for (int k = 0; k < state.num_axes(); ++k) {
      state.axes[k] = *evidence;
      state.initialized[k] = 1;
    }
    state.frame_counter = 1;
    return;
  }
  for (int k = 0; k < state.num_axes(); ++k) {
    const int s = state.strides[k];
    if (t % s != 0) continue;
    if (static_cast<int>(recent_fields.size()) < s)
      throw std::invalid_argument(
          "clocknet_step: missing field for a due axis (need " +
          std::to_string(s) + ")");
    DisplacementField<T> span = *(recent_fields.end() - s);
    for (auto it = recent_fields.end() - s + 1; it != recent_fields.end(); ++it)
      span = compose_fields(span, *it);
    FeatureMap<T> warped = warp(state.axes[k], span);
    state.axes[k] = evidence ? aggregate(warped, *evidence, scheme)
                             : std::move(warped);
  }
  ++state.frame_counter;
}

// Single-scale step: warp by the per-frame field, then aggregate.
template <typename T>
void memnet_step(MemoryState<T>& state, const FeatureMap<T>* evidence,
                 const DisplacementField<T>& field,
                 const AggregationScheme<T>& scheme) {
  if (state.num_axes() != 1)
    throw std::invalid_argument("memnet_step: state must have one axis");
  std::deque<DisplacementField<T>> fields{field};
  clocknet_step(state, evidence, fields, scheme);
}

// Mean over initialized axis maps; this fused map feeds the task head.
template <typename T>
FeatureMap<T> fuse_axes(const MemoryState<T>& state) {
  std::vector<const FeatureMap<T>*> live;
  for (int k = 0; k < state.num_axes(); ++k)
    if (state.initialized[k]) live.push_back(&state.axes[k]);
  if (live.empty())
    throw InitializationError("fuse_axes: no initialized axis");
  FeatureMap<T> out(live[0]->height, live[0]->width, live[0]->channels);
  for (const auto* m : live) out.data += m->data;
  out.data /= T(live.size());
  return out;
}

// Snapshot: one tensor file per axis plus a sidecar with the clock state.
template <typename T>
void save_memory_snapshot(const MemoryState<T>& state, AggregationKind kind,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json side;
  side["frame_counter"] = state.frame_counter;
  side["strides"] = state.strides;
  side["scheme"] = to_string(kind);
  side["initialized"] = std::vector<int>(state.initialized.begin(),
                                         state.initialized.end());
  for (int k = 0; k < state.num_axes(); ++k)
    if (state.initialized[k])
      write_tensor(dir / ("axis" + std::to_string(k) + ".mwtn"), state.axes[k]);
  std::ofstream os(dir / "state.json");
  os << side.dump(2) << "\n";
  if (!os) throw FormatError("save_memory_snapshot: write failed");
}

template <typename T>
std::pair<MemoryState<T>, AggregationKind> load_memory_snapshot(
    const std::filesystem::path& dir) {
  std::ifstream is(dir / "state.json");
  if (!is) throw FormatError("load_memory_snapshot: missing sidecar");
  nlohmann::json side;
  try {
    is >> side;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_memory_snapshot: bad sidecar: " +
                      std::string(e.what()));
  }
  auto state = make_memory_state<T>(side.at("strides").get<std::vector<int>>());
  state.frame_counter = side.at("frame_counter").get<long>();
  const auto init = side.at("initialized").get<std::vector<int>>();
  for (std::size_t k = 0; k < init.size(); ++k) {
    state.initialized[k] = static_cast<char>(init[k]);
    if (init[k]) {
      auto m = read_tensor(dir / ("axis" + std::to_string(k) + ".mwtn"));
      state.axes[k] = m.template cast<T>();
    }
  }
  return {state, aggregation_kind_from(side.at("scheme").get<std::string>())};
}

}  // namespace memwarp
