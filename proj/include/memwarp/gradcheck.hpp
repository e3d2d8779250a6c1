#pragma once

// Finite-difference gradient checks, run in 64-bit precision: the per-op
// kernels at 1e-4 max relative error and the fully unrolled two-frame model
// at 1e-3, each over at least one hundred random coordinates.

#include "memwarp/model.hpp"
#include "memwarp/training.hpp"

#include <functional>
#include <iostream>
#include <random>

namespace memwarp {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  int coords = 0;
  // coordinates whose step-1e-4 interval straddles a kink (rectifier zero or
  // bilinear cell edge); they are re-verified at step 1e-5 and excluded from
  // max_rel_err
  int refined = 0;
  bool ok() const { return max_rel_err < tolerance; }

  // folds one coordinate into the result, refining kink-straddling steps
  void take(double analytic, const std::function<double()>& loss, double* slot,
            double step) {
    ++coords;
    const double fd = gradcheck_detail_central(loss, slot, step);
    double err = gradcheck_detail_rel(analytic, fd);
    if (err >= tolerance) {
      const double fine = gradcheck_detail_central(loss, slot, step / 10);
      if (gradcheck_detail_rel(analytic, fine) < tolerance &&
          gradcheck_detail_rel(fine, fd) >= tolerance) {
        ++refined;  // the coarse difference itself was invalid
        return;
      }
    }
    max_rel_err = std::max(max_rel_err, err);
  }

  static double gradcheck_detail_central(const std::function<double()>& f,
                                         double* slot, double h);
  static double gradcheck_detail_rel(double got, double want);
};

namespace gradcheck_detail {

inline double central_diff(const std::function<double()>& f, double* slot,
                           double h) {
  const double saved = *slot;
  *slot = saved + h;
  const double fp = f();
  *slot = saved - h;
  const double fm = f();
  *slot = saved;
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double got, double want) {
  const double denom = std::max({std::abs(got), std::abs(want), 1e-8});
  return std::abs(got - want) / denom;
}

template <typename Fill>
FeatureMap<double> filled(int h, int w, int c, std::mt19937& rng, Fill&& f) {
  FeatureMap<double> m(h, w, c);
  for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data[i] = f(rng);
  return m;
}

}  // namespace gradcheck_detail

inline double GradCheckResult::gradcheck_detail_central(
    const std::function<double()>& f, double* slot, double h) {
  return gradcheck_detail::central_diff(f, slot, h);
}
inline double GradCheckResult::gradcheck_detail_rel(double got, double want) {
  return gradcheck_detail::rel_err(got, want);
}

inline GradCheckResult check_warp_backward(unsigned seed) {
  using namespace gradcheck_detail;
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> uf(-0.43, 0.43);
  auto src = filled(5, 5, 3, rng, [&](auto& r) { return u(r); });
  DisplacementField<double> fld(5, 5);
  for (Eigen::Index i = 0; i < fld.data.size(); ++i)
    fld.data[i] = uf(rng) + 0.011;  // off the integer lattice
  auto up = filled(5, 5, 3, rng, [&](auto& r) { return u(r); });

  std::function<double()> loss = [&]() {
    return (warp(src, fld).data * up.data).sum();
  };
  auto g = warp_backward(src, fld, up);
  GradCheckResult res;
  res.name = "warp_backward";
  res.tolerance = 1e-4;
  for (Eigen::Index i = 0; i < src.data.size(); ++i)
    res.take(g.d_source.data[i], loss, &src.data[i], 1e-4);
  for (Eigen::Index i = 0; i < fld.data.size(); ++i)
    res.take(g.d_field.data[i], loss, &fld.data[i], 1e-4);
  return res;
}

inline GradCheckResult check_learned_aggregation(unsigned seed) {
  using namespace gradcheck_detail;
  std::mt19937 rng(seed + 1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.feat_channels = 4;
  cfg.weight_hidden = 4;
  cfg.aggregation = AggregationKind::LearnedWeighting;
  DetectionModel<double> model;
  model.cfg = cfg;
  model.init(seed + 1);

  auto mem = filled(4, 4, 4, rng, [&](auto& r) { return u(r); });
  auto evid = filled(4, 4, 4, rng, [&](auto& r) { return u(r); });
  auto readout = filled(4, 4, 4, rng, [&](auto& r) { return u(r); });

  std::function<double()> loss = [&]() {
    auto m = make_var(mem);
    auto f = make_var(evid);
    auto out = model.aggregate_step(nullptr, m, f);
    return (out->value.data * readout.data).sum();
  };

  model.params.zero_grads();
  Tape<double> tape;
  auto m = make_var(mem);
  auto f = make_var(evid);
  auto out = model.aggregate_step(&tape, m, f);
  out->grad = readout;
  tape.backward();

  GradCheckResult res;
  res.name = "aggregate_learned_weighting";
  res.tolerance = 1e-4;
  for (const char* base : {"agg.psi_m", "agg.psi_f"})
    for (const char* leaf : {".conv1.w", ".conv1.b", ".conv2.w", ".conv2.b"}) {
      auto& e = model.params.at(std::string(base) + leaf);
      for (Eigen::Index i = 0; i < e.size(); ++i)
        res.take(e.grad[i], loss, &e.value[i], 1e-4);
    }
  for (Eigen::Index i = 0; i < mem.data.size(); ++i)
    res.take(m->grad.data[i], loss, &mem.data[i], 1e-4);
  return res;
}

inline GradCheckResult check_detection_loss(unsigned seed) {
  using namespace gradcheck_detail;
  std::mt19937 rng(seed + 2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  HeadOutput<double> head;
  head.objectness = filled(6, 6, 1, rng, [&](auto& r) { return u(r); });
  head.class_logits = filled(6, 6, 3, rng, [&](auto& r) { return u(r); });
  head.box_deltas = filled(6, 6, 4, rng, [&](auto& r) { return u(r); });
  std::vector<Box> gt{{3, 2, 14, 13, 0, 1.0}, {12, 11, 22, 23, 2, 1.0}};

  std::function<double()> loss = [&]() {
    return double(detection_loss(head, gt, 4).loss);
  };
  auto res_grad = detection_loss(head, gt, 4);
  GradCheckResult res;
  res.name = "detection_loss";
  res.tolerance = 1e-4;
  auto sweep = [&](FeatureMap<double>& m, const FeatureMap<double>& g) {
    for (Eigen::Index i = 0; i < m.data.size(); ++i)
      res.take(g.data[i], loss, &m.data[i], 1e-4);
  };
  sweep(head.objectness, res_grad.d_objectness);
  sweep(head.class_logits, res_grad.d_class_logits);
  sweep(head.box_deltas, res_grad.d_box_deltas);
  return res;
}

inline GradCheckResult check_full_model(unsigned seed) {
  using namespace gradcheck_detail;
  SceneSpec spec;
  spec.image_height = 8;
  spec.image_width = 8;
  spec.noise_level = 0.01;
  ObjectSpec o;
  o.half_w = 1.8;
  o.half_h = 1.8;
  o.start_x = 3.1;
  o.start_y = 3.7;
  o.vel_x = 0.55;
  o.vel_y = 0.35;
  spec.objects.push_back(o);
  auto rec = generate(spec, 2, seed + 3);

  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.mid_channels = 4;
  cfg.feat_channels = 6;
  cfg.weight_hidden = 4;
  cfg.flow_hidden = 6;
  cfg.aggregation = AggregationKind::LearnedWeighting;
  cfg.flow = FlowKind::ToyEstimator;
  DetectionModel<double> model;
  model.cfg = cfg;
  model.init(seed + 3);
  {
    // give the flow head some signal so the field path is exercised
    std::mt19937 frng(seed + 4);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    auto& w3 = model.params.at("flow.conv3.w");
    for (Eigen::Index i = 0; i < w3.size(); ++i) w3.value[i] = u(frng);
    model.params.at("flow.conv3.b").value[0] = 0.19;
    model.params.at("flow.conv3.b").value[1] = -0.23;
    // push rectifier inputs away from zero: the central difference at step
    // 1e-4 must not straddle a kink
    for (auto& [name, e] : model.params.entries)
      if (name != "flow.conv3.b" && name.size() > 2 &&
          name.compare(name.size() - 2, 2, ".b") == 0)
        e.value.setConstant(0.2);
  }

  auto win = SequenceWindow<double>::from_record(rec, 0, 2);
  std::function<double()> loss = [&]() {
    std::mt19937 rng(1);
    auto fwd = forward_sequence(model, win, 0.0, rng);
    double sum = 0;
    for (int t = 0; t < 2; ++t)
      sum += double(detection_loss(fwd.heads[t].to_output(), win.boxes[t]).loss);
    return sum;
  };
  {
    std::mt19937 rng(1);
    auto fwd = forward_sequence(model, win, 0.0, rng);
    std::vector<LossResult<double>> losses;
    for (int t = 0; t < 2; ++t)
      losses.push_back(detection_loss(fwd.heads[t].to_output(), win.boxes[t]));
    backward_sequence(model, fwd, losses);
  }

  GradCheckResult res;
  res.name = "full_model_two_frames";
  res.tolerance = 1e-3;
  std::mt19937 pick(seed + 5);
  std::vector<std::string> names;
  for (auto& [name, e] : model.params.entries) names.push_back(name);
  while (res.coords < 120) {
    auto& e = model.params.at(names[pick() % names.size()]);
    const Eigen::Index i = Eigen::Index(pick() % e.size());
    res.take(e.grad[i], loss, &e.value[i], 1e-4);
  }
  return res;
}

inline bool run_gradient_checks(unsigned seed, std::ostream& os) {
  bool all = true;
  for (auto* fn : {check_warp_backward, check_learned_aggregation,
                   check_detection_loss, check_full_model}) {
    const auto r = fn(seed);
    os << (r.ok() ? "[ok]   " : "[FAIL] ") << r.name
       << " max_rel_err=" << r.max_rel_err << " tol=" << r.tolerance
       << " coords=" << r.coords << " kink_refined=" << r.refined << "\n";
    all = all && r.ok();
  }
  return all;
}

}  // namespace memwarp
