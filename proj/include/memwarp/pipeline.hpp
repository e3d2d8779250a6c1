#pragma once

#include "memwarp/detection.hpp"
#include "memwarp/memory.hpp"
#include "memwarp/model.hpp"
#include "memwarp/motion.hpp"
#include "memwarp/training.hpp"
#include "memwarp/worldgen.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>
#include <queue>
#include <thread>
#include <vector>

namespace memwarp {

inline constexpr double kScoreThreshold = 0.05;
inline constexpr double kNmsIou = 0.5;

// MEMWARP_THREADS caps how many workers the evaluation harness may spawn.
inline int worker_cap() {
  if (const char* s = std::getenv("MEMWARP_THREADS")) {
    const int v = std::atoi(s);
    if (v >= 1) return v;
  }
  return 1;
}

// Runs fn(i) for i in [0, n), sharded across workers when allowed. Each call
// owns slot i of whatever it fills, so the merge is order-independent.
template <typename Fn>
void for_each_index(std::size_t n, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(worker_cap()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1))
        fn(i);
    });
  for (auto& t : pool) t.join();
}

template <typename T>
DisplacementField<T> negate(const DisplacementField<T>& f) {
  DisplacementField<T> out(f.height, f.width);
  out.data = -f.data;
  return out;
}

// --- single-stream inference over a sequence -------------------------------

// Runs one model's recurrence frame by frame through the public memory
// operations. Copyable, so evaluation protocols can snapshot and branch.
template <typename T>
struct RecurrentDetector {
  const DetectionModel<T>* model = nullptr;
  AggregationScheme<T> scheme;
  MemoryState<T> state;
  std::deque<DisplacementField<T>> window;  // per-frame fields, newest last
  bool axes_reconciled = false;

  explicit RecurrentDetector(const DetectionModel<T>& m) : model(&m) {
    scheme = m.scheme_view();
    reset();
  }

  void reset() {
    const auto strides = model->cfg.strides();
    if (!strides.empty()) state = make_memory_state<T>(strides);
    window.clear();
  }

  bool per_frame() const {
    return model->cfg.variant == ModelVariant::PerFrame;
  }

  // Brings every slow axis from its last update frame into the frame the
  // recurrence last processed, composing the trailing per-frame fields it
  // missed. Propagation must start from a fully aligned state or the stale
  // axes stay displaced forever.
  void reconcile_axes() {
    if (axes_reconciled) return;
    const long c = state.frame_counter - 1;
    for (int k = 0; k < state.num_axes(); ++k) {
      if (!state.initialized[k])
        throw InitializationError("reconcile_axes: uninitialized axis");
      const int gap = static_cast<int>(c % state.strides[k]);
      if (gap == 0) continue;
      if (static_cast<int>(window.size()) < gap)
        throw std::invalid_argument("reconcile_axes: missing trailing fields");
      DisplacementField<T> span = *(window.end() - gap);
      for (auto it = window.end() - gap + 1; it != window.end(); ++it)
        span = compose_fields(span, *it);
      state.axes[k] = warp(state.axes[k], span);
    }
    axes_reconciled = true;
  }

  // Pure alignment: every axis is warped into the next frame, no clock and
  // no evidence involved. This is the per-frame advance of the propagation
  // and anticipation protocols, where no evidence exists to gate.
  FeatureMap<T> align_step(const DisplacementField<T>& field) {
    reconcile_axes();
    for (int k = 0; k < state.num_axes(); ++k)
      state.axes[k] = warp(state.axes[k], field);
    return fuse_axes(state);
  }

  // Advance one frame. Passing a null image runs an evidence-free step of
  // the normal recurrence (due axes warp on their cadence); field is
  // D_(t,t-1) and is ignored on the first frame. Returns the map the head
  // consumes.
  FeatureMap<T> step(const FeatureMap<T>* image,
                     const DisplacementField<T>* field) {
    if (per_frame()) {
      if (!image)
        throw std::invalid_argument(
            "RecurrentDetector: per-frame model needs evidence every frame");
      return extract_features(*image, model->params);
    }
    axes_reconciled = false;
    std::optional<FeatureMap<T>> evidence;
    if (image) evidence = extract_features(*image, model->params);
    if (state.frame_counter > 0) {
      if (!field)
        throw std::invalid_argument("RecurrentDetector: missing field");
      window.push_back(*field);
      const int keep = model->cfg.max_stride();
      while (static_cast<int>(window.size()) > keep) window.pop_front();
    }
    clocknet_step(state, evidence ? &*evidence : nullptr, window, scheme);
    return fuse_axes(state);
  }

  std::vector<Box> detect(const FeatureMap<T>& fused) const {
    return decode(detect_head(fused, model->params), kScoreThreshold, kNmsIou);
  }
};

// Standard full-evidence evaluation: pooled detections over every frame of
// every sequence against the ground truth.
template <typename T>
ApResult evaluate_model(const DetectionModel<T>& model,
                        const std::vector<SequenceRecord>& dataset) {
  std::vector<std::vector<std::vector<Box>>> dets(dataset.size());
  for_each_index(dataset.size(), [&](std::size_t s) {
    const auto& rec = dataset[s];
    RecurrentDetector<T> det(model);
    for (int t = 0; t < rec.length(); ++t) {
      FeatureMap<T> img = rec.frames[t].template cast<T>();
      DisplacementField<T> fld = rec.fields[t].template cast<T>();
      auto fused = det.step(&img, t >= 1 ? &fld : nullptr);
      dets[s].push_back(det.detect(fused));
    }
  });
  std::vector<std::vector<Box>> flat_dets, flat_gts;
  for (std::size_t s = 0; s < dataset.size(); ++s)
    for (int t = 0; t < dataset[s].length(); ++t) {
      flat_dets.push_back(std::move(dets[s][t]));
      flat_gts.push_back(dataset[s].boxes[t]);
    }
  return average_precision(flat_dets, flat_gts, 0.5);
}

// --- propagation / anticipation sweeps -------------------------------------

enum class PropagationMode { FeatureProp, BoxProp };

struct SweepRow {
  int delta = 0;
  double map = 0;
  double cost_proxy = 0;  // modeled relative per-frame cost, falls with delta
  std::string mode;
};

namespace detail {

// Snapshots of the running detector after every frame, so each evaluation
// frame can branch off t - delta without replaying the prefix.
template <typename T>
struct EvalPass {
  std::vector<RecurrentDetector<T>> snapshots;  // index t = state after frame t
  std::vector<std::vector<Box>> live_dets;      // full-evidence detections
};

template <typename T>
EvalPass<T> run_full_pass(const DetectionModel<T>& model,
                          const SequenceRecord& rec) {
  EvalPass<T> pass;
  RecurrentDetector<T> det(model);
  for (int t = 0; t < rec.length(); ++t) {
    FeatureMap<T> img = rec.frames[t].template cast<T>();
    DisplacementField<T> fld = rec.fields[t].template cast<T>();
    auto fused = det.step(&img, t >= 1 ? &fld : nullptr);
    pass.live_dets.push_back(det.detect(fused));
    pass.snapshots.push_back(det);
  }
  return pass;
}

inline double cost_proxy_for(int delta) {
  // one full evidence pass amortized over delta propagated frames
  constexpr double evidence_cost = 10.0, warp_cost = 1.0;
  return (evidence_cost + delta * warp_cost) / (delta + 1);
}

}  // namespace detail

// Withholds image evidence on the last delta frames before each evaluation
// frame; the memory advances on true displacement fields alone
// (FeatureProp), or the stale detections are translated by the per-box mean
// displacement (BoxProp). Every delta is scored on the same evaluation
// frames, those with a full history for the largest delta requested.
template <typename T>
std::vector<SweepRow> evaluate_propagation(
    const DetectionModel<T>& model, const std::vector<SequenceRecord>& dataset,
    const std::vector<int>& deltas, PropagationMode mode) {
  if (model.cfg.variant == ModelVariant::PerFrame)
    throw std::invalid_argument(
        "evaluate_propagation: per-frame model has no memory to propagate");
  int max_delta = 0;
  for (int d : deltas) {
    if (d < 0) throw std::invalid_argument("evaluate_propagation: delta < 0");
    max_delta = std::max(max_delta, d);
  }
  const int start = max_delta + 2;
  for (const auto& rec : dataset)
    if (start >= rec.length())
      throw std::invalid_argument(
          "evaluate_propagation: delta reaches past the sequence start");

  std::vector<SweepRow> rows;
  std::vector<detail::EvalPass<T>> passes(dataset.size());
  for_each_index(dataset.size(), [&](std::size_t s) {
    passes[s] = detail::run_full_pass(model, dataset[s]);
  });

  for (int delta : deltas) {
    std::vector<std::vector<Box>> dets, gts;
    for (std::size_t s = 0; s < dataset.size(); ++s) {
      const auto& rec = dataset[s];
      for (int t = start; t < rec.length(); ++t) {
        gts.push_back(rec.boxes[t]);
        if (delta == 0) {
          dets.push_back(passes[s].live_dets[t]);
          continue;
        }
        if (mode == PropagationMode::FeatureProp) {
          RecurrentDetector<T> det = passes[s].snapshots[t - delta];
          for (int u = t - delta + 1; u <= t; ++u) {
            DisplacementField<T> fld = rec.fields[u].template cast<T>();
            det.step(nullptr, &fld);
          }
          det.reconcile_axes();
          dets.push_back(det.detect(fuse_axes(det.state)));
        } else {
          std::vector<Box> boxes = passes[s].live_dets[t - delta];
          for (int u = t - delta + 1; u <= t; ++u)
            boxes = propagate_boxes(
                boxes, negate(rec.fields[u].template cast<T>()), kFeatureStride);
          dets.push_back(std::move(boxes));
        }
      }
    }
    rows.push_back({delta, average_precision(dets, gts, 0.5).mean,
                    detail::cost_proxy_for(delta),
                    mode == PropagationMode::FeatureProp ? "feature" : "box"});
  }
  return rows;
}

// No image information at all after t - delta: the withheld frames run on
// displacement fields extrapolated from the two last observed ones.
template <typename T>
std::vector<SweepRow> evaluate_anticipation(
    const DetectionModel<T>& model, const std::vector<SequenceRecord>& dataset,
    const std::vector<int>& deltas) {
  if (model.cfg.variant == ModelVariant::PerFrame)
    throw std::invalid_argument(
        "evaluate_anticipation: per-frame model has no memory to propagate");
  int max_delta = 0;
  for (int d : deltas) {
    if (d < 1)
      throw std::invalid_argument("evaluate_anticipation: delta must be >= 1");
    max_delta = std::max(max_delta, d);
  }
  const int start = max_delta + 3;  // two observed fields before the cut
  for (const auto& rec : dataset)
    if (start >= rec.length())
      throw std::invalid_argument("evaluate_anticipation: insufficient history");

  std::vector<detail::EvalPass<T>> passes(dataset.size());
  for_each_index(dataset.size(), [&](std::size_t s) {
    passes[s] = detail::run_full_pass(model, dataset[s]);
  });

  std::vector<SweepRow> rows;
  for (int delta : deltas) {
    std::vector<std::vector<Box>> dets, gts;
    for (std::size_t s = 0; s < dataset.size(); ++s) {
      const auto& rec = dataset[s];
      for (int t = start; t < rec.length(); ++t) {
        gts.push_back(rec.boxes[t]);
        const int cut = t - delta;
        FlowHistory<T> hist;
        hist.push(rec.fields[cut - 1].template cast<T>());
        hist.push(rec.fields[cut].template cast<T>());
        auto preds = extrapolate_flow(hist, delta);
        RecurrentDetector<T> det = passes[s].snapshots[cut];
        for (int i = 0; i < delta; ++i) det.step(nullptr, &preds[i]);
        det.reconcile_axes();
        dets.push_back(det.detect(fuse_axes(det.state)));
      }
    }
    rows.push_back({delta, average_precision(dets, gts, 0.5).mean,
                    detail::cost_proxy_for(delta), "anticipation"});
  }
  return rows;
}

// --- two-thread fast/strong pipeline ---------------------------------------

template <typename T>
struct TimedPayload {
  int frame_index = -1;
  double ready_time = 0;       // simulated milliseconds
  FeatureMap<T> features;      // strong fused memory snapshot
  std::vector<Box> detections; // strong detections (box alignment mode)
};

enum class AlignmentMode { FeatureProp, BoxProp, None };

inline const char* to_string(AlignmentMode m) {
  switch (m) {
    case AlignmentMode::FeatureProp: return "feature_prop";
    case AlignmentMode::BoxProp: return "box_prop";
    default: return "none";
  }
}

struct PipelineConfig {
  double frame_period_ms = 50;
  double fast_latency_ms = 15;
  double strong_latency_ms = 170;
  int strong_update_period = 4;  // strong consumes evidence every Nth frame
  AlignmentMode alignment = AlignmentMode::FeatureProp;
  double tick_ms = 1.0;

  // Minimum frame gap after which a strong result can reach the fuser.
  int delta() const {
    if (strong_latency_ms <= fast_latency_ms) return 0;
    return static_cast<int>(
        std::ceil((strong_latency_ms - fast_latency_ms) / frame_period_ms));
  }
};

struct TraceRow {
  int frame = 0;
  double arrival_ms = 0;
  double emit_ms = 0;
  int strong_frame = -1;  // -1 during warm-up
  bool warmup = true;
  std::string mode;
};

template <typename T>
struct SimulationResult {
  std::vector<std::vector<Box>> detections;  // per frame
  std::vector<TraceRow> trace;
};

template <typename T>
struct PipelineModels {
  const DetectionModel<T>* fast = nullptr;    // per-frame detector
  const DetectionModel<T>* fused = nullptr;   // fast architecture trained on
                                              // averaged features; optional
                                              // for box alignment
  const DetectionModel<T>* strong = nullptr;  // memory model
};

namespace detail {

// Everything the strong worker publishes, precomputed in frame order.
template <typename T>
std::vector<TimedPayload<T>> strong_schedule(const DetectionModel<T>& strong,
                                             const SequenceRecord& rec,
                                             const PipelineConfig& cfg) {
  RecurrentDetector<T> det(strong);
  std::vector<TimedPayload<T>> payloads;
  double busy_until = 0;
  for (int t = 0; t < rec.length(); ++t) {
    const bool evidence_frame = t % cfg.strong_update_period == 0;
    FeatureMap<T> img = rec.frames[t].template cast<T>();
    DisplacementField<T> fld = rec.fields[t].template cast<T>();
    auto fused = det.step(evidence_frame ? &img : nullptr,
                          t >= 1 ? &fld : nullptr);
    if (!evidence_frame) continue;
    const double arrival = t * cfg.frame_period_ms;
    const double start = std::max(arrival, busy_until);
    busy_until = start + cfg.strong_latency_ms;
    TimedPayload<T> p;
    p.frame_index = t;
    p.ready_time = busy_until;
    p.features = fused;
    p.detections = det.detect(fused);
    payloads.push_back(std::move(p));
  }
  return payloads;
}

}  // namespace detail

// Virtual-time discrete-event run of the two-thread detector. Every frame
// emits at its fast-path completion time; the newest strong payload already
// finished by then is aligned across the frame gap and fused by averaging.
// Frames before the first strong payload emit fast-only output, flagged as
// warm-up in the trace.
template <typename T>
SimulationResult<T> simulate(const PipelineModels<T>& models,
                             const SequenceRecord& rec,
                             const PipelineConfig& cfg) {
  if (!models.fast || !models.strong)
    throw std::invalid_argument("simulate: fast and strong models required");
  if (models.fast->cfg.feat_channels != models.strong->cfg.feat_channels)
    throw DimensionError(
        "simulate: fast and strong feature widths must match for fusion");
  if (cfg.alignment != AlignmentMode::BoxProp && !models.fused)
    throw std::invalid_argument(
        "simulate: feature alignment needs the fused-head model");

  const auto payloads = detail::strong_schedule(*models.strong, rec, cfg);
  SimulationResult<T> res;
  double fast_busy = 0;
  for (int t = 0; t < rec.length(); ++t) {
    const double arrival = t * cfg.frame_period_ms;
    const double fast_start = std::max(arrival, fast_busy);
    const double emit = fast_start + cfg.fast_latency_ms;
    fast_busy = emit;

    FeatureMap<T> img = rec.frames[t].template cast<T>();

    // newest strong payload finished before the fuser runs; causal by
    // construction since payloads carry frame_index <= t when ready
    const TimedPayload<T>* use = nullptr;
    for (const auto& p : payloads) {
      if (p.ready_time > emit || p.frame_index > t) break;
      use = &p;
    }

    TraceRow row;
    row.frame = t;
    row.arrival_ms = arrival;
    row.emit_ms = emit;
    row.warmup = use == nullptr;
    row.strong_frame = use ? use->frame_index : -1;
    row.mode = use ? to_string(cfg.alignment) : "fast_only";

    std::vector<Box> dets;
    if (!use) {
      auto fast_feat = extract_features(img, models.fast->params);
      dets = decode(detect_head(fast_feat, models.fast->params),
                    kScoreThreshold, kNmsIou);
    } else if (cfg.alignment == AlignmentMode::BoxProp) {
      std::vector<Box> strong_boxes = use->detections;
      for (int u = use->frame_index + 1; u <= t; ++u)
        strong_boxes = propagate_boxes(
            strong_boxes, negate(rec.fields[u].template cast<T>()),
            kFeatureStride);
      auto fast_feat = extract_features(img, models.fast->params);
      auto fast_dets = decode(detect_head(fast_feat, models.fast->params),
                              kScoreThreshold, kNmsIou);
      // pre-suppression merge of both detection sets
      fast_dets.insert(fast_dets.end(), strong_boxes.begin(),
                       strong_boxes.end());
      dets = nms(std::move(fast_dets), kNmsIou);
    } else {
      // the deployed fast detector is the one trained on fused input
      auto own_feat = extract_features(img, models.fused->params);
      FeatureMap<T> aligned = use->features;
      if (cfg.alignment == AlignmentMode::FeatureProp &&
          use->frame_index < t) {
        DisplacementField<T> span =
            rec.fields[use->frame_index + 1].template cast<T>();
        for (int u = use->frame_index + 2; u <= t; ++u)
          span = compose_fields(span, rec.fields[u].template cast<T>());
        aligned = warp(aligned, span);
      }
      FeatureMap<T> fused_map(own_feat.height, own_feat.width,
                              own_feat.channels);
      fused_map.data = T(0.5) * (own_feat.data + aligned.data);
      dets = decode(detect_head(fused_map, models.fused->params),
                    kScoreThreshold, kNmsIou);
    }
    res.detections.push_back(std::move(dets));
    res.trace.push_back(std::move(row));
  }
  return res;
}

// Per-frame aligned strong features under the same scheduling rules the
// simulator applies, for training the fused head on its deployment-time
// input distribution. Warm-up frames fall back to the frame's own features.
template <typename T>
std::vector<FeatureMap<T>> aligned_strong_features(
    const DetectionModel<T>& strong, const SequenceRecord& rec,
    const PipelineConfig& cfg) {
  const auto payloads = detail::strong_schedule(strong, rec, cfg);
  std::vector<FeatureMap<T>> out;
  double fast_busy = 0;
  for (int t = 0; t < rec.length(); ++t) {
    const double arrival = t * cfg.frame_period_ms;
    const double emit = std::max(arrival, fast_busy) + cfg.fast_latency_ms;
    fast_busy = emit;
    const TimedPayload<T>* use = nullptr;
    for (const auto& p : payloads) {
      if (p.ready_time > emit || p.frame_index > t) break;
      use = &p;
    }
    if (!use) {
      out.emplace_back();  // caller substitutes the frame's own features
      continue;
    }
    FeatureMap<T> aligned = use->features;
    if (use->frame_index < t) {
      DisplacementField<T> span =
          rec.fields[use->frame_index + 1].template cast<T>();
      for (int u = use->frame_index + 2; u <= t; ++u)
        span = compose_fields(span, rec.fields[u].template cast<T>());
      aligned = warp(aligned, span);
    }
    out.push_back(std::move(aligned));
  }
  return out;
}

// --- real-thread execution mode ---------------------------------------------

namespace detail {

template <typename M>
class MessageQueue {
 public:
  void push(M m) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      q_.push(std::move(m));
    }
    cv_.notify_one();
  }
  M pop() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return !q_.empty(); });
    M m = std::move(q_.front());
    q_.pop();
    return m;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::queue<M> q_;
};

template <typename T>
struct FastMessage {
  int frame = 0;
  double emit_time = 0;
  FeatureMap<T> fused_features;  // from the fused model's extractor
  std::vector<Box> detections;   // baseline fast head output
};

}  // namespace detail

// Demonstration mode with the two workers on real threads, exchanging
// TimedPayloads through queues. Payload selection still follows the virtual
// clock, so the output is identical to simulate(); only the computation
// itself runs concurrently.
template <typename T>
SimulationResult<T> simulate_threaded(const PipelineModels<T>& models,
                                      const SequenceRecord& rec,
                                      const PipelineConfig& cfg) {
  if (!models.fast || !models.strong)
    throw std::invalid_argument("simulate: fast and strong models required");
  if (models.fast->cfg.feat_channels != models.strong->cfg.feat_channels)
    throw DimensionError(
        "simulate: fast and strong feature widths must match for fusion");
  if (cfg.alignment != AlignmentMode::BoxProp && !models.fused)
    throw std::invalid_argument(
        "simulate: feature alignment needs the fused-head model");

  detail::MessageQueue<detail::FastMessage<T>> fast_q;
  detail::MessageQueue<TimedPayload<T>> strong_q;

  std::thread fast_worker([&]() {
    double busy = 0;
    for (int t = 0; t < rec.length(); ++t) {
      detail::FastMessage<T> msg;
      msg.frame = t;
      const double arrival = t * cfg.frame_period_ms;
      busy = std::max(arrival, busy) + cfg.fast_latency_ms;
      msg.emit_time = busy;
      FeatureMap<T> img = rec.frames[t].template cast<T>();
      auto fast_feat = extract_features(img, models.fast->params);
      msg.detections = decode(detect_head(fast_feat, models.fast->params),
                              kScoreThreshold, kNmsIou);
      if (models.fused)
        msg.fused_features = extract_features(img, models.fused->params);
      fast_q.push(std::move(msg));
    }
  });

  std::thread strong_worker([&]() {
    for (auto& p : detail::strong_schedule(*models.strong, rec, cfg))
      strong_q.push(std::move(p));
    TimedPayload<T> done;
    done.frame_index = -1;  // end marker
    strong_q.push(std::move(done));
  });

  // The fuser knows the strong cadence, so it can pop exactly the payloads
  // that would have finished by each emission time.
  SimulationResult<T> res;
  std::vector<TimedPayload<T>> seen;
  bool strong_done = false;
  double next_ready = cfg.strong_latency_ms;  // first evidence frame is 0
  for (int t = 0; t < rec.length(); ++t) {
    auto fast = fast_q.pop();
    while (!strong_done && next_ready <= fast.emit_time) {
      auto p = strong_q.pop();
      if (p.frame_index < 0) {
        strong_done = true;
        break;
      }
      const double arrival_next =
          (p.frame_index + cfg.strong_update_period) * cfg.frame_period_ms;
      next_ready = std::max(arrival_next, p.ready_time) + cfg.strong_latency_ms;
      seen.push_back(std::move(p));
    }
    const TimedPayload<T>* use = nullptr;
    for (const auto& p : seen) {
      if (p.ready_time > fast.emit_time || p.frame_index > t) break;
      use = &p;
    }

    TraceRow row;
    row.frame = t;
    row.arrival_ms = t * cfg.frame_period_ms;
    row.emit_ms = fast.emit_time;
    row.warmup = use == nullptr;
    row.strong_frame = use ? use->frame_index : -1;
    row.mode = use ? to_string(cfg.alignment) : "fast_only";

    std::vector<Box> dets;
    if (!use) {
      dets = fast.detections;
    } else if (cfg.alignment == AlignmentMode::BoxProp) {
      std::vector<Box> strong_boxes = use->detections;
      for (int u = use->frame_index + 1; u <= t; ++u)
        strong_boxes = propagate_boxes(
            strong_boxes, negate(rec.fields[u].template cast<T>()),
            kFeatureStride);
      auto merged = fast.detections;
      merged.insert(merged.end(), strong_boxes.begin(), strong_boxes.end());
      dets = nms(std::move(merged), kNmsIou);
    } else {
      FeatureMap<T> aligned = use->features;
      if (cfg.alignment == AlignmentMode::FeatureProp &&
          use->frame_index < t) {
        DisplacementField<T> span =
            rec.fields[use->frame_index + 1].template cast<T>();
        for (int u = use->frame_index + 2; u <= t; ++u)
          span = compose_fields(span, rec.fields[u].template cast<T>());
        aligned = warp(aligned, span);
      }
      FeatureMap<T> fused_map(fast.fused_features.height,
                              fast.fused_features.width,
                              fast.fused_features.channels);
      fused_map.data = T(0.5) * (fast.fused_features.data + aligned.data);
      dets = decode(detect_head(fused_map, models.fused->params),
                    kScoreThreshold, kNmsIou);
    }
    res.detections.push_back(std::move(dets));
    res.trace.push_back(std::move(row));
  }
  fast_worker.join();
  while (!strong_done && strong_q.pop().frame_index >= 0) {
  }
  strong_worker.join();
  return res;
}

// Convenience wrapper wiring the strong model's scheduled payloads in as the
// side features (warm-up frames carry none and train unfused).
template <typename T>
TrainStats train_fused(DetectionModel<T>& model,
                       const std::vector<SequenceRecord>& dataset,
                       const DetectionModel<T>& strong,
                       const PipelineConfig& cfg, const TrainConfig& tc,
                       std::ostream* metrics = nullptr) {
  if (model.cfg.feat_channels != strong.cfg.feat_channels)
    throw DimensionError("train_fused: feature widths must match");
  std::vector<std::vector<FeatureMap<T>>> sides(dataset.size());
  for_each_index(dataset.size(), [&](std::size_t s) {
    sides[s] = aligned_strong_features(strong, dataset[s], cfg);
  });
  return train_with_side(model, dataset, tc,
                         [&](std::size_t s) { return std::move(sides[s]); },
                         metrics);
}

// --- split-halves baseline --------------------------------------------------

namespace detail {
template <typename T>
FeatureMap<T> crop_cols(const FeatureMap<T>& m, int x0, int w) {
  FeatureMap<T> out(m.height, w, m.channels);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < w; ++x) out.pixel(y, x) = m.pixel(y, x0 + x);
  return out;
}

template <typename T>
DisplacementField<T> crop_cols(const DisplacementField<T>& f, int x0, int w) {
  DisplacementField<T> out(f.height, w);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < w; ++x) {
      out.dx(y, x) = f.dx(y, x0 + x);
      out.dy(y, x) = f.dy(y, x0 + x);
    }
  return out;
}
}  // namespace detail

// Two-worker baseline that splits each frame into left/right halves with a
// centered 8 px overlap, runs the detector on each half and merges the
// detections before suppression.
template <typename T>
ApResult evaluate_split(const DetectionModel<T>& model,
                        const std::vector<SequenceRecord>& dataset,
                        int overlap_px = 8) {
  std::vector<std::vector<Box>> dets, gts;
  for (const auto& rec : dataset) {
    const int W = rec.frames[0].width;
    const int half_w = W / 2 + overlap_px / 2;
    const int right_x0 = W - half_w;
    if (half_w % kFeatureStride != 0 || right_x0 % kFeatureStride != 0)
      throw DimensionError("evaluate_split: halves must divide by the stride");
    RecurrentDetector<T> left(model), right(model);
    for (int t = 0; t < rec.length(); ++t) {
      FeatureMap<T> img = rec.frames[t].template cast<T>();
      DisplacementField<T> fld = rec.fields[t].template cast<T>();
      auto img_l = detail::crop_cols(img, 0, half_w);
      auto img_r = detail::crop_cols(img, right_x0, half_w);
      auto fld_l = detail::crop_cols(fld, 0, half_w / kFeatureStride);
      auto fld_r = detail::crop_cols(fld, right_x0 / kFeatureStride,
                                     half_w / kFeatureStride);
      auto fused_l = left.step(&img_l, t >= 1 ? &fld_l : nullptr);
      auto fused_r = right.step(&img_r, t >= 1 ? &fld_r : nullptr);
      auto dl = decode(detect_head(fused_l, model.params), kScoreThreshold,
                       kNmsIou);
      auto dr = decode(detect_head(fused_r, model.params), kScoreThreshold,
                       kNmsIou);
      for (auto& b : dr) {
        b.x0 += right_x0;
        b.x1 += right_x0;
      }
      dl.insert(dl.end(), dr.begin(), dr.end());
      dets.push_back(nms(std::move(dl), kNmsIou));
      gts.push_back(rec.boxes[t]);
    }
  }
  return average_precision(dets, gts, 0.5);
}

}  // namespace memwarp
