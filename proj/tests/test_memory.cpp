#include "doctest.h"

#include "memwarp/memory.hpp"

#include "oracles.hpp"

#include <filesystem>
#include <random>

using namespace memwarp;

TEST_CASE("average aggregation") {
  std::mt19937 rng(2);
  auto x = oracle::random_map<double>(4, 4, 3, rng);
  auto scheme = AggregationScheme<double>::average();

  auto same = aggregate(x, x, scheme);
  CHECK((same.data == x.data).all());

  FeatureMap<double> two(1, 1, 1, 2.0), four(1, 1, 1, 4.0);
  auto mid = aggregate(two, four, scheme);
  CHECK(mid.at(0, 0, 0) == doctest::Approx(3.0).epsilon(1e-15));

  FeatureMap<double> other(5, 4, 3);
  CHECK_THROWS_AS(aggregate(x, other, scheme), DimensionError);
}

TEST_CASE("learned weighting with identical score maps averages exactly") {
  std::mt19937 rng(3);
  auto scheme = AggregationScheme<double>::learned(3, rng);
  // constant nets score every input the same -> softmax gives half/half
  for (auto* net : {&scheme.psi_memory, &scheme.psi_feature}) {
    net->w1.setZero();
    net->w2.setZero();
    net->b1.setConstant(0.3);
    net->b2.setConstant(-1.7);
  }
  auto m = oracle::random_map<double>(4, 4, 3, rng);
  auto f = oracle::random_map<double>(4, 4, 3, rng);
  auto out = aggregate(m, f, scheme);
  FeatureMap<double> want(4, 4, 3);
  want.data = 0.5 * (m.data + f.data);
  CHECK((out.data - want.data).abs().maxCoeff() < 1e-12);
}

TEST_CASE("learned weighting is a per-pixel convex combination") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto scheme = AggregationScheme<double>::learned(4, rng);
    auto m = oracle::random_map<double>(5, 6, 4, rng, -2.0, 2.0);
    auto f = oracle::random_map<double>(5, 6, 4, rng, -2.0, 2.0);
    auto [am, af] = aggregate_weights(scheme, m, f);
    CHECK((am.data + af.data - 1.0).abs().maxCoeff() < 1e-6);
    CHECK(am.data.minCoeff() >= 0.0);
    CHECK(am.data.maxCoeff() <= 1.0);
    CHECK(af.data.minCoeff() >= 0.0);
    CHECK(af.data.maxCoeff() <= 1.0);

    // the aggregate matches the weights it reports
    auto out = aggregate(m, f, scheme);
    FeatureMap<double> want(5, 6, 4);
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x)
        want.pixel(y, x) =
            am.at(y, x, 0) * m.pixel(y, x) + af.at(y, x, 0) * f.pixel(y, x);
    CHECK((out.data - want.data).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("memnet first frame adopts the evidence") {
  std::mt19937 rng(5);
  auto f1 = oracle::random_map<double>(4, 4, 2, rng);
  auto state = make_memnet_state<double>();
  DisplacementField<double> zero(4, 4);
  memnet_step(state, &f1, zero, AggregationScheme<double>::average());
  CHECK((state.axes[0].data == f1.data).all());
  CHECK(state.frame_counter == 1);
}

TEST_CASE("memnet first frame without evidence is an error") {
  auto state = make_memnet_state<double>();
  DisplacementField<double> zero(4, 4);
  CHECK_THROWS_AS(
      memnet_step<double>(state, nullptr, zero, AggregationScheme<double>::average()),
      InitializationError);
}

TEST_CASE("constant evidence under identity motion is a fixed point") {
  std::mt19937 rng(6);
  auto f = oracle::random_map<double>(4, 4, 2, rng);
  auto state = make_memnet_state<double>();
  DisplacementField<double> zero(4, 4);
  auto scheme = AggregationScheme<double>::average();
  for (int t = 0; t < 8; ++t) memnet_step(state, &f, zero, scheme);
  CHECK((state.axes[0].data - f.data).abs().maxCoeff() < 1e-14);
}

TEST_CASE("averaging decays past evidence exponentially") {
  // with identity motion, M_t = sum_k c_k F_(t-k) with c_k = 2^-k for
  // k = 0..t-2 and c_(t-1) = 2^-(t-1); checked against the explicit sum
  std::mt19937 rng(7);
  const int T = 10;
  std::vector<FeatureMap<double>> evidence;
  for (int t = 0; t < T; ++t)
    evidence.push_back(oracle::random_map<double>(3, 3, 2, rng));

  auto state = make_memnet_state<double>();
  DisplacementField<double> zero(3, 3);
  auto scheme = AggregationScheme<double>::average();
  for (int t = 0; t < T; ++t) {
    memnet_step(state, &evidence[t], zero, scheme);
    FeatureMap<double> want(3, 3, 2);
    for (int j = 0; j <= t; ++j) {
      const double coeff = j == 0 ? std::pow(0.5, t) : std::pow(0.5, t - j + 1);
      want.data += coeff * evidence[j].data;
    }
    CHECK((state.axes[0].data - want.data).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("clocknet with one unit-stride axis matches memnet") {
  std::mt19937 rng(8);
  auto scheme = AggregationScheme<double>::average();
  auto mem = make_memnet_state<double>();
  auto clock = make_clocknet_state<double>(ClockConfig{{1}});
  std::deque<DisplacementField<double>> window;
  for (int t = 0; t < 6; ++t) {
    auto f = oracle::random_map<double>(4, 4, 2, rng);
    auto d = oracle::random_field<double>(4, 4, rng, -0.8, 0.8);
    memnet_step(mem, &f, d, scheme);
    window.clear();
    window.push_back(d);
    clocknet_step(clock, &f, window, scheme);
    CHECK((mem.axes[0].data == clock.axes[0].data).all());
  }
}

TEST_CASE("clockwork schedule: update counts and gating") {
  std::mt19937 rng(9);
  auto scheme = AggregationScheme<double>::average();
  auto state = make_clocknet_state<double>(ClockConfig{{1, 3, 4}});
  REQUIRE(state.strides == std::vector<int>{1, 4, 8});

  std::deque<DisplacementField<double>> window;
  std::vector<int> changes(3, 0);
  std::vector<FeatureMap<double>> prev(3);
  for (int t = 0; t < 64; ++t) {
    auto f = oracle::random_map<double>(4, 4, 2, rng);
    auto d = oracle::random_field<double>(4, 4, rng, -0.5, 0.5);
    if (t >= 1) {
      window.push_back(d);
      while (window.size() > 8) window.pop_front();
    }
    for (int k = 0; k < 3; ++k)
      if (state.initialized[k]) prev[k] = state.axes[k];
    clocknet_step(state, &f, window, scheme);
    for (int k = 0; k < 3; ++k) {
      const bool due = t % state.strides[k] == 0;
      if (t > 0) {
        const bool identical = (prev[k].data == state.axes[k].data).all();
        if (!due) CHECK(identical);  // untouched between updates, bit for bit
      }
      if (due) ++changes[k];
    }
  }
  CHECK(changes == std::vector<int>{64, 16, 8});
}

TEST_CASE("at frame five only the unit-stride axis updates") {
  std::mt19937 rng(10);
  auto scheme = AggregationScheme<double>::average();
  auto state = make_clocknet_state<double>(ClockConfig{{1, 3, 4}});
  std::deque<DisplacementField<double>> window;
  std::vector<FeatureMap<double>> at4(3);
  for (int t = 0; t <= 5; ++t) {
    auto f = oracle::random_map<double>(4, 4, 2, rng);
    auto d = oracle::random_field<double>(4, 4, rng, -0.5, 0.5);
    if (t >= 1) window.push_back(d);
    if (t == 5)
      for (int k = 0; k < 3; ++k) at4[k] = state.axes[k];
    clocknet_step(state, &f, window, scheme);
    if (t == 5) {
      CHECK_FALSE((at4[0].data == state.axes[0].data).all());
      CHECK((at4[1].data == state.axes[1].data).all());
      CHECK((at4[2].data == state.axes[2].data).all());
    }
  }
}

TEST_CASE("clocknet rejects a due axis without enough fields") {
  std::mt19937 rng(11);
  auto scheme = AggregationScheme<double>::average();
  auto state = make_clocknet_state<double>(ClockConfig{{1, 3}});  // strides 1, 4
  std::deque<DisplacementField<double>> window;
  auto f = oracle::random_map<double>(4, 4, 2, rng);
  clocknet_step(state, &f, window, scheme);  // frame 0 initializes
  DisplacementField<double> d(4, 4);
  for (int t = 1; t < 4; ++t) {
    window.push_back(d);
    clocknet_step(state, &f, window, scheme);
  }
  // frame 4 is due for the stride-4 axis but only sees 3 fields
  window.clear();
  window.push_back(d);
  window.push_back(d);
  window.push_back(d);
  CHECK_THROWS_WITH_AS(clocknet_step(state, &f, window, scheme),
                       doctest::Contains("missing field"),
                       std::invalid_argument);
}

TEST_CASE("fuse_axes averages initialized axes") {
  std::mt19937 rng(12);
  auto x = oracle::random_map<double>(3, 3, 2, rng);

  auto single = make_memory_state<double>({1});
  single.axes[0] = x;
  single.initialized[0] = 1;
  CHECK((fuse_axes(single).data == x.data).all());

  auto dual = make_memory_state<double>({1, 2});
  dual.axes[0] = x;
  dual.axes[1] = scale(x, 3.0);
  dual.initialized = {1, 1};
  auto fused = fuse_axes(dual);
  CHECK((fused.data - 2.0 * x.data).abs().maxCoeff() < 1e-12);

  auto triple = make_memory_state<double>({1, 2, 4});
  for (int k = 0; k < 3; ++k) {
    triple.axes[k] = x;
    triple.initialized[k] = 1;
  }
  CHECK((fuse_axes(triple).data - x.data).abs().maxCoeff() < 1e-15);

  auto empty = make_memory_state<double>({1});
  CHECK_THROWS_AS(fuse_axes(empty), InitializationError);
}

TEST_CASE("absent evidence degenerates to pure sequential warping") {
  std::mt19937 rng(13);
  auto scheme = AggregationScheme<double>::average();
  auto state = make_memnet_state<double>();
  auto f0 = oracle::random_map<double>(5, 5, 3, rng);
  DisplacementField<double> zero(5, 5);
  memnet_step(state, &f0, zero, scheme);
  auto f1 = oracle::random_map<double>(5, 5, 3, rng);
  auto d1 = oracle::random_field<double>(5, 5, rng, -0.7, 0.7);
  memnet_step(state, &f1, d1, scheme);
  const FeatureMap<double> anchor = state.axes[0];

  FeatureMap<double> want = anchor;
  for (int i = 0; i < 4; ++i) {
    auto d = oracle::random_field<double>(5, 5, rng, -0.7, 0.7);
    memnet_step(state, static_cast<const FeatureMap<double>*>(nullptr), d,
                scheme);
    want = warp(want, d);
    CHECK((state.axes[0].data == want.data).all());
  }
}

TEST_CASE("memnet_step factors as aggregate(warp(M, D), F)") {
  std::mt19937 rng(14);
  auto scheme = AggregationScheme<double>::learned(3, rng);
  auto state = make_memnet_state<double>();
  auto f0 = oracle::random_map<double>(4, 4, 3, rng);
  DisplacementField<double> zero(4, 4);
  memnet_step(state, &f0, zero, scheme);

  auto m_before = state.axes[0];
  auto f1 = oracle::random_map<double>(4, 4, 3, rng);
  auto d1 = oracle::random_field<double>(4, 4, rng, -0.9, 0.9);
  memnet_step(state, &f1, d1, scheme);

  auto manual = aggregate(warp(m_before, d1), f1, scheme);
  CHECK((state.axes[0].data == manual.data).all());
}

TEST_CASE("memory snapshot round trip") {
  namespace fs = std::filesystem;
  std::mt19937 rng(15);
  auto scheme = AggregationScheme<float>::average();
  auto state = make_clocknet_state<float>(ClockConfig{{1, 2}});
  auto f = oracle::random_map<float>(4, 4, 2, rng);
  std::deque<DisplacementField<float>> window;
  clocknet_step(state, &f, window, scheme);
  DisplacementField<float> d(4, 4, 0.25f, -0.5f);
  window.push_back(d);
  clocknet_step(state, &f, window, scheme);

  const fs::path dir = fs::temp_directory_path() / "memwarp_snapshot_test";
  save_memory_snapshot(state, AggregationKind::Average, dir);
  auto [loaded, kind] = load_memory_snapshot<float>(dir);
  CHECK(kind == AggregationKind::Average);
  CHECK(loaded.frame_counter == state.frame_counter);
  CHECK(loaded.strides == state.strides);
  for (int k = 0; k < state.num_axes(); ++k)
    CHECK((loaded.axes[k].data == state.axes[k].data).all());
  fs::remove_all(dir);
}
