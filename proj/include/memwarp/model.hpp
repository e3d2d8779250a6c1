#pragma once

#include "memwarp/detection.hpp"
#include "memwarp/memory.hpp"
#include "memwarp/motion.hpp"
#include "memwarp/params.hpp"
#include "memwarp/tape.hpp"
#include "memwarp/worldgen.hpp"

#include <json.hpp>

#include <random>
#include <string>
#include <vector>

namespace memwarp {

enum class ModelVariant { PerFrame, MemNet, ClockNet };

inline const char* to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::PerFrame: return "perframe";
    case ModelVariant::MemNet: return "memnet";
    default: return "clocknet";
  }
}
inline ModelVariant model_variant_from(const std::string& s) {
  if (s == "perframe") return ModelVariant::PerFrame;
  if (s == "memnet") return ModelVariant::MemNet;
  if (s == "clocknet") return ModelVariant::ClockNet;
  throw FormatError("unknown model variant: " + s);
}

enum class FlowKind { GroundTruth, ToyEstimator };

struct ModelConfig {
  ModelVariant variant = ModelVariant::MemNet;
  int img_channels = 3;
  int mid_channels = 12;
  int feat_channels = 16;
  int num_classes = 2;
  int weight_hidden = 8;
  int flow_hidden = 12;
  AggregationKind aggregation = AggregationKind::Average;
  FlowKind flow = FlowKind::GroundTruth;
  std::vector<int> clock_axes = {1, 2, 3};  // ClockNet only
  bool fuse_side = false;  // per-frame head fed mean(own features, side input)

  std::vector<int> strides() const {
    switch (variant) {
      case ModelVariant::PerFrame: return {};
      case ModelVariant::MemNet: return {1};
      default: return ClockConfig{clock_axes}.strides();
    }
  }
  int max_stride() const {
    auto s = strides();
    return s.empty() ? 0 : s.back();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["variant"] = to_string(variant);
    j["img_channels"] = img_channels;
    j["mid_channels"] = mid_channels;
    j["feat_channels"] = feat_channels;
    j["num_classes"] = num_classes;
    j["weight_hidden"] = weight_hidden;
    j["flow_hidden"] = flow_hidden;
    j["aggregation"] = memwarp::to_string(aggregation);
    j["flow"] = flow == FlowKind::GroundTruth ? "ground_truth" : "toy_estimator";
    j["clock_axes"] = clock_axes;
    j["fuse_side"] = fuse_side;
    return j;
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.variant = model_variant_from(j.at("variant"));
    c.img_channels = j.value("img_channels", 3);
    c.mid_channels = j.value("mid_channels", 12);
    c.feat_channels = j.value("feat_channels", 16);
    c.num_classes = j.value("num_classes", 2);
    c.weight_hidden = j.value("weight_hidden", 8);
    c.flow_hidden = j.value("flow_hidden", 12);
    c.aggregation = aggregation_kind_from(j.value("aggregation", "average"));
    c.flow = j.value("flow", "ground_truth") == std::string("toy_estimator")
                 ? FlowKind::ToyEstimator
                 : FlowKind::GroundTruth;
    c.clock_axes = j.value("clock_axes", std::vector<int>{1, 2, 3});
    c.fuse_side = j.value("fuse_side", false);
    return c;
  }
};

template <typename T>
struct HeadVars {
  Var<T> objectness, class_logits, box_deltas;

  HeadOutput<T> to_output() const {
    return {objectness->value, class_logits->value, box_deltas->value};
  }
};

template <typename T>
struct DetectionModel {
  ModelConfig cfg;
  ModelParams<T> params;

  void init(unsigned seed) {
    params.entries.clear();
    std::mt19937 rng(seed);
    add_extractor_params(params, cfg.img_channels, cfg.mid_channels,
                         cfg.feat_channels, rng);
    add_head_params(params, cfg.feat_channels, cfg.num_classes, rng);
    if (cfg.aggregation == AggregationKind::LearnedWeighting &&
        cfg.variant != ModelVariant::PerFrame) {
      for (const char* net : {"agg.psi_m", "agg.psi_f"}) {
        const std::string base(net);
        init_conv(params.add(base + ".conv1.w",
                             {3, 3, cfg.feat_channels, cfg.weight_hidden}),
                  9 * cfg.feat_channels, rng);
        params.add(base + ".conv1.b", {cfg.weight_hidden});
        init_conv(params.add(base + ".conv2.w", {1, 1, cfg.weight_hidden, 1}),
                  cfg.weight_hidden, rng);
        params.add(base + ".conv2.b", {1});
      }
    }
    if (cfg.flow == FlowKind::ToyEstimator &&
        cfg.variant != ModelVariant::PerFrame) {
      const int in = 2 * cfg.img_channels;
      init_conv(params.add("flow.conv1.w", {3, 3, in, cfg.flow_hidden}), 9 * in,
                rng);
      params.add("flow.conv1.b", {cfg.flow_hidden});
      init_conv(
          params.add("flow.conv2.w", {3, 3, cfg.flow_hidden, cfg.flow_hidden}),
          9 * cfg.flow_hidden, rng);
      params.add("flow.conv2.b", {cfg.flow_hidden});
      params.add("flow.conv3.w", {3, 3, cfg.flow_hidden, 2});  // zero init
      params.add("flow.conv3.b", {2});
    }
  }

  // --- taped forwards (tape may be null for plain inference) ---

  Var<T> features(Tape<T>* tape, const FeatureMap<T>& image) {
    auto x = make_var(image);
    auto h = op_relu(tape, op_conv2d(tape, x, params.at("feat.conv1.w"),
                                     params.at("feat.conv1.b"), 3, 3,
                                     cfg.mid_channels, 1, 1));
    auto d = op_avgpool(tape, h, kFeatureStride);
    return op_relu(tape, op_conv2d(tape, d, params.at("feat.conv2.w"),
                                   params.at("feat.conv2.b"), 3, 3,
                                   cfg.feat_channels, 1, 1));
  }

  // H x W x 2 field variable from the learnable estimator
  Var<T> flow_field(Tape<T>* tape, const FeatureMap<T>& frame_t,
                    const FeatureMap<T>& frame_prev) {
    auto x = make_var(stack_frames(frame_t, frame_prev));
    auto h1 = op_relu(tape, op_conv2d(tape, x, params.at("flow.conv1.w"),
                                      params.at("flow.conv1.b"), 3, 3,
                                      cfg.flow_hidden, 1, 1));
    auto d1 = op_avgpool(tape, h1, 2);
    auto h2 = op_relu(tape, op_conv2d(tape, d1, params.at("flow.conv2.w"),
                                      params.at("flow.conv2.b"), 3, 3,
                                      cfg.flow_hidden, 1, 1));
    auto d2 = op_avgpool(tape, h2, 2);
    return op_conv2d(tape, d2, params.at("flow.conv3.w"),
                     params.at("flow.conv3.b"), 3, 3, 2, 1, 1);
  }

  Var<T> aggregate_step(Tape<T>* tape, const Var<T>& warped_memory,
                        const Var<T>& evidence) {
    if (cfg.aggregation == AggregationKind::Average)
      return op_average(tape, warped_memory, evidence);
    auto score = [&](const char* base, const Var<T>& in) {
      const std::string b(base);
      auto h = op_relu(tape, op_conv2d(tape, in, params.at(b + ".conv1.w"),
                                       params.at(b + ".conv1.b"), 3, 3,
                                       cfg.weight_hidden, 1, 1));
      return op_conv2d(tape, h, params.at(b + ".conv2.w"),
                       params.at(b + ".conv2.b"), 1, 1, 1, 1, 0);
    };
    auto sm = score("agg.psi_m", warped_memory);
    auto sf = score("agg.psi_f", evidence);
    return op_convex_blend(tape, warped_memory, evidence, sm, sf);
  }

  HeadVars<T> head(Tape<T>* tape, const Var<T>& fused) {
    auto trunk = op_relu(tape, op_conv2d(tape, fused, params.at("head.trunk.w"),
                                         params.at("head.trunk.b"), 3, 3,
                                         cfg.feat_channels, 1, 1));
    HeadVars<T> out;
    out.objectness = op_conv2d(tape, trunk, params.at("head.obj.w"),
                               params.at("head.obj.b"), 1, 1, 1, 1, 0);
    out.class_logits = op_conv2d(tape, trunk, params.at("head.cls.w"),
                                 params.at("head.cls.b"), 1, 1,
                                 cfg.num_classes, 1, 0);
    out.box_deltas = op_conv2d(tape, trunk, params.at("head.box.w"),
                               params.at("head.box.b"), 1, 1, 4, 1, 0);
    return out;
  }

  // Copies of the trained nets, for the standalone inference operations.
  AggregationScheme<T> scheme_view() const {
    AggregationScheme<T> s;
    s.kind = cfg.aggregation;
    if (cfg.aggregation == AggregationKind::LearnedWeighting) {
      auto fill = [&](const char* base, WeightNetParams<T>& net) {
        const std::string b(base);
        net.channels = cfg.feat_channels;
        net.hidden = cfg.weight_hidden;
        net.w1 = params.at(b + ".conv1.w").value;
        net.b1 = params.at(b + ".conv1.b").value;
        net.w2 = params.at(b + ".conv2.w").value;
        net.b2 = params.at(b + ".conv2.b").value;
      };
      fill("agg.psi_m", s.psi_memory);
      fill("agg.psi_f", s.psi_feature);
    }
    return s;
  }

  FlowNetParams<T> flow_view() const {
    FlowNetParams<T> p;
    p.in_channels = 2 * cfg.img_channels;
    p.hidden = cfg.flow_hidden;
    p.w1 = params.at("flow.conv1.w").value;
    p.b1 = params.at("flow.conv1.b").value;
    p.w2 = params.at("flow.conv2.w").value;
    p.b2 = params.at("flow.conv2.b").value;
    p.w3 = params.at("flow.conv3.w").value;
    p.b3 = params.at("flow.conv3.b").value;
    return p;
  }

  template <typename U>
  DetectionModel<U> cast() const {
    DetectionModel<U> out;
    out.cfg = cfg;
    out.params = params.template cast<U>();
    return out;
  }
};

template <typename T>
void save_model(const DetectionModel<T>& model,
                const std::filesystem::path& dir) {
  save_checkpoint(model.params, dir, model.cfg.to_json());
}

template <typename T>
DetectionModel<T> load_model(const std::filesystem::path& dir) {
  ModelParams<T> params;
  auto extra = load_checkpoint(params, dir);
  DetectionModel<T> model;
  model.cfg = ModelConfig::from_json(extra);
  model.params = std::move(params);
  return model;
}

// --- training-time sequence unroll ------------------------------------

// A window of frames with ground truth, borrowed from a SequenceRecord.
template <typename T>
struct SequenceWindow {
  std::vector<FeatureMap<T>> images;
  std::vector<DisplacementField<T>> fields;  // fields[t] = D_(t,t-1), t >= 1
  std::vector<std::vector<Box>> boxes;
  std::vector<FeatureMap<T>> side;  // optional per-frame side features

  int length() const { return static_cast<int>(images.size()); }

  static SequenceWindow from_record(const SequenceRecord& rec, int begin,
                                    int count) {
    if (begin < 0 || begin + count > rec.length())
      throw std::invalid_argument("SequenceWindow: range out of sequence");
    SequenceWindow w;
    for (int t = begin; t < begin + count; ++t) {
      if constexpr (std::is_same_v<T, float>) {
        w.images.push_back(rec.frames[t]);
        w.fields.push_back(rec.fields[t]);
      } else {
        w.images.push_back(rec.frames[t].template cast<T>());
        w.fields.push_back(rec.fields[t].template cast<T>());
      }
      w.boxes.push_back(rec.boxes[t]);
    }
    return w;
  }
};

template <typename T>
struct ForwardResult {
  Tape<T> tape;
  std::vector<HeadVars<T>> heads;   // one per frame
  std::vector<char> evidence_used;  // dropout record
};

// Unrolls the per-frame recurrence over the window, recording the tape.
// Evidence dropout skips the aggregation (the step degenerates to the bare
// warp); the first frame always carries evidence. The window-local frame
// counter drives the clock, frame 0 initializing every axis.
template <typename T>
ForwardResult<T> forward_sequence(DetectionModel<T>& model,
                                  const SequenceWindow<T>& win,
                                  double dropout_prob, std::mt19937& rng) {
  ForwardResult<T> out;
  Tape<T>* tape = &out.tape;
  const auto strides = model.cfg.strides();
  const int K = static_cast<int>(strides.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Var<T>> axes(K);
  std::vector<Var<T>> frame_fields;  // learned fields, index t >= 1

  for (int t = 0; t < win.length(); ++t) {
    const bool dropped =
        t > 0 && dropout_prob > 0 && unit(rng) < dropout_prob &&
        model.cfg.variant != ModelVariant::PerFrame;
    out.evidence_used.push_back(dropped ? 0 : 1);

    Var<T> evidence;
    if (!dropped) evidence = model.features(tape, win.images[t]);

    Var<T> fused;
    if (model.cfg.variant == ModelVariant::PerFrame) {
      fused = evidence;
      if (model.cfg.fuse_side && t < static_cast<int>(win.side.size()) &&
          win.side[t].size() > 0)
        fused = op_average(tape, evidence, make_var(win.side[t]));
    } else {
      if (t >= 1 && model.cfg.flow == FlowKind::ToyEstimator)
        frame_fields.push_back(
            model.flow_field(tape, win.images[t], win.images[t - 1]));
      if (t == 0) {
        for (int k = 0; k < K; ++k) axes[k] = evidence;
      } else {
        for (int k = 0; k < K; ++k) {
          const int s = strides[k];
          if (t % s != 0) continue;
          Var<T> warped;
          if (model.cfg.flow == FlowKind::ToyEstimator) {
            // frame_fields[i] covers step i+1; compose the last s of them
            Var<T> span = frame_fields[t - s];
            for (int u = t - s + 1; u < t; ++u)
              span = op_compose(tape, span, frame_fields[u]);
            warped = op_warp_var(tape, axes[k], span);
          } else {
            DisplacementField<T> span = win.fields[t - s + 1];
            for (int u = t - s + 2; u <= t; ++u)
              span = compose_fields(span, win.fields[u]);
            warped = op_warp(tape, axes[k], span);
          }
          axes[k] = dropped ? warped
                            : model.aggregate_step(tape, warped, evidence);
        }
      }
      fused = K == 1 ? axes[0] : op_mean(tape, axes);
    }
    out.heads.push_back(model.head(tape, fused));
  }
  return out;
}

// Seeds the recorded heads with per-frame loss gradients and replays the
// tape; parameter gradients accumulate in the registry (zeroed first).
template <typename T>
T backward_sequence(DetectionModel<T>& model, ForwardResult<T>& fwd,
                    const std::vector<LossResult<T>>& losses) {
  if (losses.size() != fwd.heads.size())
    throw std::invalid_argument("backward_sequence: loss/tape mismatch");
  model.params.zero_grads();
  T total = T(0);
  for (std::size_t t = 0; t < losses.size(); ++t) {
    total += losses[t].loss;
    fwd.heads[t].objectness->grad.data += losses[t].d_objectness.data;
    fwd.heads[t].class_logits->grad.data += losses[t].d_class_logits.data;
    fwd.heads[t].box_deltas->grad.data += losses[t].d_box_deltas.data;
  }
  fwd.tape.backward();
  return total;
}

}  // namespace memwarp
