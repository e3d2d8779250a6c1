#include "doctest.h"

#include "memwarp/model.hpp"
#include "memwarp/training.hpp"

#include "oracles.hpp"

#include <random>

using namespace memwarp;

namespace {

// Fixed linear readout so the finite-difference loss is smooth.
struct Readout {
  FeatureMap<double> weights;
  double operator()(const FeatureMap<double>& m) const {
    return (m.data * weights.data).sum();
  }
};

Readout make_readout(int h, int w, int c, unsigned seed) {
  std::mt19937 rng(seed);
  return {oracle::random_map<double>(h, w, c, rng)};
}

SceneSpec tiny_scene(double vel = 0.6, double acc = 0.0) {
  SceneSpec spec;
  spec.image_height = 8;
  spec.image_width = 8;
  spec.noise_level = 0.01;
  ObjectSpec o;
  o.half_w = 1.8;
  o.half_h = 1.8;
  o.start_x = 3.2;
  o.start_y = 3.6;
  o.vel_x = vel;
  o.vel_y = 0.3;
  o.acc_x = acc;
  spec.objects.push_back(o);
  return spec;
}

}  // namespace

TEST_CASE("taped convolution matches finite differences") {
  std::mt19937 rng(1);
  ModelParams<double> params;
  init_conv(params.add("w", {3, 3, 2, 3}), 18, rng);
  auto& b = params.add("b", {3});
  for (Eigen::Index i = 0; i < 3; ++i) b.value[i] = 0.1 * double(i) - 0.1;

  auto x_map = oracle::random_map<double>(5, 4, 2, rng);
  auto readout = make_readout(5, 4, 3, 7);

  auto loss = [&]() {
    auto x = make_var(x_map);
    auto y = op_conv2d<double>(nullptr, x, params.at("w"), params.at("b"), 3, 3,
                               3, 1, 1);
    return readout(y->value);
  };

  params.zero_grads();
  Tape<double> tape;
  auto x = make_var(x_map);
  auto y = op_conv2d(&tape, x, params.at("w"), params.at("b"), 3, 3, 3, 1, 1);
  y->grad = readout.weights;
  tape.backward();

  double max_rel = 0;
  for (auto name : {"w", "b"}) {
    auto& e = params.at(name);
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      const double fd = oracle::central_diff(loss, &e.value[i], 1e-5);
      max_rel = std::max(max_rel, oracle::rel_err(e.grad[i], fd));
    }
  }
  for (Eigen::Index i = 0; i < x_map.data.size(); ++i) {
    const double fd = oracle::central_diff(loss, &x_map.data[i], 1e-5);
    max_rel = std::max(max_rel, oracle::rel_err(x->grad.data[i], fd));
  }
  CHECK(max_rel < 1e-7);
}

TEST_CASE("taped warp, compose and blend match finite differences") {
  std::mt19937 rng(3);
  auto src_map = oracle::random_map<double>(4, 4, 2, rng);
  auto fld1_map = oracle::random_map<double>(4, 4, 2, rng, -0.4, 0.4);
  auto fld2_map = oracle::random_map<double>(4, 4, 2, rng, -0.4, 0.4);
  fld1_map.data += 0.017;  // keep off the integer lattice
  fld2_map.data += 0.013;
  auto sm_map = oracle::random_map<double>(4, 4, 1, rng);
  auto sf_map = oracle::random_map<double>(4, 4, 1, rng);
  auto evid_map = oracle::random_map<double>(4, 4, 2, rng);
  auto readout = make_readout(4, 4, 2, 11);

  // graph: blend(warp(src, compose(f1, f2)), evidence; sm, sf)
  auto forward = [&](Tape<double>* tape, Var<double>& src, Var<double>& f1,
                     Var<double>& f2, Var<double>& sm, Var<double>& sf,
                     Var<double>& ev) {
    src = make_var(src_map);
    f1 = make_var(fld1_map);
    f2 = make_var(fld2_map);
    sm = make_var(sm_map);
    sf = make_var(sf_map);
    ev = make_var(evid_map);
    auto span = op_compose(tape, f1, f2);
    auto warped = op_warp_var(tape, src, span);
    return op_convex_blend(tape, warped, ev, sm, sf);
  };

  Var<double> src, f1, f2, sm, sf, ev;
  Tape<double> tape;
  auto out = forward(&tape, src, f1, f2, sm, sf, ev);
  out->grad = readout.weights;
  tape.backward();

  auto loss = [&]() {
    Var<double> a, b, c, d, e, f;
    auto o = forward(nullptr, a, b, c, d, e, f);
    return readout(o->value);
  };

  double max_rel = 0;
  auto check = [&](FeatureMap<double>& leaf, const Var<double>& v) {
    for (Eigen::Index i = 0; i < leaf.data.size(); ++i) {
      const double fd = oracle::central_diff(loss, &leaf.data[i], 1e-6);
      if (std::abs(fd) < 1e-10 && std::abs(v->grad.data[i]) < 1e-10) continue;
      max_rel = std::max(max_rel, oracle::rel_err(v->grad.data[i], fd));
    }
  };
  check(src_map, src);
  check(fld1_map, f1);
  check(fld2_map, f2);
  check(sm_map, sm);
  check(sf_map, sf);
  check(evid_map, ev);
  CHECK(max_rel < 1e-4);
}

TEST_CASE("single-frame window equals the per-frame detector") {
  auto rec = generate(tiny_scene(), 3, 5);
  ModelConfig mem_cfg;
  mem_cfg.variant = ModelVariant::MemNet;
  mem_cfg.img_channels = 3;
  mem_cfg.mid_channels = 4;
  mem_cfg.feat_channels = 6;
  DetectionModel<double> mem;
  mem.cfg = mem_cfg;
  mem.init(99);

  DetectionModel<double> per = mem;
  per.cfg.variant = ModelVariant::PerFrame;

  auto win = SequenceWindow<double>::from_record(rec, 0, 1);
  std::mt19937 r1(1), r2(1);
  auto a = forward_sequence(mem, win, 0.8, r1);
  auto b = forward_sequence(per, win, 0.8, r2);
  CHECK((a.heads[0].objectness->value.data ==
         b.heads[0].objectness->value.data).all());
  CHECK((a.heads[0].class_logits->value.data ==
         b.heads[0].class_logits->value.data).all());
  CHECK((a.heads[0].box_deltas->value.data ==
         b.heads[0].box_deltas->value.data).all());
}

TEST_CASE("static frames reach a fixed point after the second frame") {
  auto spec = tiny_scene(0.0);
  spec.objects[0].vel_y = 0;
  spec.noise_level = 0;
  auto rec = generate(spec, 4, 5);
  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.mid_channels = 4;
  cfg.feat_channels = 6;
  DetectionModel<double> model;
  model.cfg = cfg;
  model.init(7);

  auto win = SequenceWindow<double>::from_record(rec, 0, 4);
  std::mt19937 rng(1);
  auto fwd = forward_sequence(model, win, 0.0, rng);
  for (int t = 1; t < 4; ++t)
    CHECK((fwd.heads[t].objectness->value.data ==
           fwd.heads[0].objectness->value.data).all());
}

TEST_CASE("forward_sequence is reproducible under the seed") {
  auto rec = generate(tiny_scene(), 6, 2);
  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.mid_channels = 4;
  cfg.feat_channels = 6;
  DetectionModel<double> model;
  model.cfg = cfg;
  model.init(3);
  auto win = SequenceWindow<double>::from_record(rec, 0, 6);

  std::mt19937 r1(42), r2(42), r3(43);
  auto a = forward_sequence(model, win, 0.5, r1);
  auto b = forward_sequence(model, win, 0.5, r2);
  auto c = forward_sequence(model, win, 0.5, r3);
  CHECK(a.evidence_used == b.evidence_used);
  CHECK(a.tape.size() == b.tape.size());
  for (int t = 0; t < 6; ++t)
    CHECK((a.heads[t].objectness->value.data ==
           b.heads[t].objectness->value.data).all());
  bool differs = a.evidence_used != c.evidence_used;
  CHECK(differs);  // different seed, different dropout draw (p = 0.5, 5 coins)
}

TEST_CASE("dropping all evidence routes gradients through the first frame") {
  auto rec = generate(tiny_scene(), 4, 6);
  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.mid_channels = 4;
  cfg.feat_channels = 6;
  DetectionModel<double> model;
  model.cfg = cfg;
  model.init(13);

  auto win = SequenceWindow<double>::from_record(rec, 0, 4);
  std::mt19937 rng(1);
  auto fwd = forward_sequence(model, win, 0.999999, rng);
  CHECK(fwd.evidence_used == std::vector<char>{1, 0, 0, 0});

  // loss only at the last frame
  std::vector<LossResult<double>> losses(4);
  for (int t = 0; t < 4; ++t) {
    losses[t].d_objectness = FeatureMap<double>(2, 2, 1);
    losses[t].d_class_logits = FeatureMap<double>(2, 2, cfg.num_classes);
    losses[t].d_box_deltas = FeatureMap<double>(2, 2, 4);
  }
  losses[3].d_objectness.data.setConstant(1.0);
  backward_sequence(model, fwd, losses);
  const auto g_total = model.params.at("feat.conv1.w").grad.eval();
  CHECK(g_total.abs().maxCoeff() > 0);

  // the same memory built by hand from frame 0 evidence alone
  Tape<double> tape;
  auto f0 = model.features(&tape, win.images[0]);
  auto m = f0;
  for (int t = 1; t < 4; ++t) m = op_warp(&tape, m, win.fields[t]);
  auto head = model.head(&tape, m);
  model.params.zero_grads();
  head.objectness->grad.data.setConstant(1.0);
  tape.backward();
  CHECK((model.params.at("feat.conv1.w").grad == g_total).all());
}

TEST_CASE("zero upstream losses leave zero gradients") {
  auto rec = generate(tiny_scene(), 3, 8);
  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.mid_channels = 4;
  cfg.feat_channels = 6;
  DetectionModel<double> model;
  model.cfg = cfg;
  model.init(21);
  auto win = SequenceWindow<double>::from_record(rec, 0, 3);
  std::mt19937 rng(1);
  auto fwd = forward_sequence(model, win, 0.0, rng);
  std::vector<LossResult<double>> losses(3);
  for (int t = 0; t < 3; ++t) {
    losses[t].d_objectness = FeatureMap<double>(2, 2, 1);
    losses[t].d_class_logits = FeatureMap<double>(2, 2, cfg.num_classes);
    losses[t].d_box_deltas = FeatureMap<double>(2, 2, 4);
  }
  backward_sequence(model, fwd, losses);
  for (auto& [name, e] : model.params.entries)
    CHECK(e.grad.abs().maxCoeff() == 0.0);
}

TEST_CASE("full model gradients match finite differences over two frames") {
  // everything trainable in the loop: toy flow, learned weighting, extractor
  // and head, through the warp and the recurrence
  auto rec = generate(tiny_scene(0.45, 0.1), 2, 17);
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
  model.init(31);
  // a rough flow head so the field gradient path is non-degenerate
  {
    std::mt19937 frng(5);
    auto& w3 = model.params.at("flow.conv3.w");
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (Eigen::Index i = 0; i < w3.size(); ++i) w3.value[i] = u(frng);
    model.params.at("flow.conv3.b").value[0] = 0.21;
    model.params.at("flow.conv3.b").value[1] = -0.17;
  }

  auto win = SequenceWindow<double>::from_record(rec, 0, 2);
  auto total_loss = [&]() {
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

  std::mt19937 pick(77);
  double max_rel = 0;
  int checked = 0;
  std::vector<std::string> names;
  for (auto& [name, e] : model.params.entries) names.push_back(name);
  while (checked < 120) {
    auto& e = model.params.at(names[pick() % names.size()]);
    const Eigen::Index i = Eigen::Index(pick() % e.size());
    const double fd = oracle::central_diff(total_loss, &e.value[i], 1e-4);
    if (std::abs(fd) < 1e-10 && std::abs(e.grad[i]) < 1e-10) {
      ++checked;
      continue;
    }
    max_rel = std::max(max_rel, oracle::rel_err(e.grad[i], fd));
    ++checked;
  }
  CHECK(max_rel < 1e-3);
}

TEST_CASE("sgd basics") {
  ModelParams<double> params;
  auto& e = params.add("theta", {1});
  e.value[0] = 5.0;

  // lr = 0 leaves parameters alone
  e.grad[0] = 3.0;
  sgd_step(params, 0.0);
  CHECK(e.value[0] == 5.0);

  // quadratic bowl 0.5 * (theta - 2)^2 converges
  for (int it = 0; it < 200; ++it) {
    e.grad[0] = e.value[0] - 2.0;
    sgd_step(params, 0.1);
  }
  CHECK(std::abs(e.value[0] - 2.0) < 1e-6);
}

TEST_CASE("training runs, decreases loss and reproduces itself") {
  SceneSpec spec = tiny_scene(0.5);
  std::vector<SequenceRecord> data;
  for (unsigned s = 0; s < 4; ++s) data.push_back(generate(spec, 6, 100 + s));

  ModelConfig cfg;
  cfg.variant = ModelVariant::MemNet;
  cfg.mid_channels = 4;
  cfg.feat_channels = 6;
  TrainConfig tc;
  tc.sequence_length = 3;
  tc.epochs = 6;
  tc.learning_rate = 0.05;
  tc.evidence_dropout = 0.5;
  tc.seed = 3;

  DetectionModel<float> m1;
  m1.cfg = cfg;
  m1.init(11);
  auto s1 = train(m1, data, tc);
  CHECK(s1.epoch_loss.back() < s1.epoch_loss.front());

  DetectionModel<float> m2;
  m2.cfg = cfg;
  m2.init(11);
  auto s2 = train(m2, data, tc);
  CHECK(s1.final_loss == s2.final_loss);
  for (auto& [name, e] : m1.params.entries)
    CHECK((e.value == m2.params.at(name).value).all());
}

TEST_CASE("checkpoint save/load round trip") {
  namespace fs = std::filesystem;
  ModelConfig cfg;
  cfg.variant = ModelVariant::ClockNet;
  cfg.clock_axes = {1, 2, 3};
  cfg.aggregation = AggregationKind::LearnedWeighting;
  DetectionModel<float> model;
  model.cfg = cfg;
  model.init(5);

  const fs::path dir = fs::temp_directory_path() / "memwarp_ckpt_test";
  fs::remove_all(dir);
  save_model(model, dir);
  auto loaded = load_model<float>(dir);
  CHECK(loaded.cfg.variant == ModelVariant::ClockNet);
  CHECK(loaded.cfg.aggregation == AggregationKind::LearnedWeighting);
  CHECK(loaded.cfg.clock_axes == std::vector<int>{1, 2, 3});
  for (auto& [name, e] : model.params.entries)
    CHECK((e.value == loaded.params.at(name).value).all());

  // byte-exact re-save
  const fs::path dir2 = fs::temp_directory_path() / "memwarp_ckpt_test2";
  fs::remove_all(dir2);
  save_model(loaded, dir2);
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream a(entry.path(), std::ios::binary);
    std::ifstream b(dir2 / fs::relative(entry.path(), dir), std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
