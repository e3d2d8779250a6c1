#include "doctest.h"

#include "memwarp/io.hpp"
#include "memwarp/tensor.hpp"
#include "memwarp/warp.hpp"

#include "oracles.hpp"

#include <filesystem>
#include <random>

using namespace memwarp;

namespace {

FeatureMap<double> map2x2() {
  FeatureMap<double> m(2, 2, 1);
  m.at(0, 0, 0) = 1;
  m.at(0, 1, 0) = 2;
  m.at(1, 0, 0) = 3;
  m.at(1, 1, 0) = 4;
  return m;
}

}  // namespace

TEST_CASE("warp with zero field is the identity") {
  auto m = map2x2();
  DisplacementField<double> d(2, 2);
  auto out = warp(m, d);
  CHECK((out.data == m.data).all());

  std::mt19937 rng(7);
  auto big = oracle::random_map<double>(9, 7, 5, rng);
  DisplacementField<double> zero(9, 7);
  auto big_out = warp(big, zero);
  CHECK((big_out.data == big.data).all());
}

TEST_CASE("warp half-pixel example") {
  auto m = map2x2();
  DisplacementField<double> d(2, 2, 0.5, 0.5);
  auto out = warp(m, d);
  // (1+2+3+4)/4 at the top-left pixel
  CHECK(out.at(0, 0, 0) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("warp fully out of bounds yields zero") {
  auto m = map2x2();
  DisplacementField<double> d(2, 2, 2.0, 2.0);  // (W, H)
  auto out = warp(m, d);
  CHECK((out.data == 0.0).all());
}

TEST_CASE("warp rejects mismatched shapes") {
  auto m = map2x2();
  DisplacementField<double> d(3, 2);
  CHECK_THROWS_AS(warp(m, d), DimensionError);
}

TEST_CASE("warp matches the scalar oracle on random inputs") {
  std::mt19937 rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 2 + static_cast<int>(rng() % 15);
    const int w = 2 + static_cast<int>(rng() % 15);
    const int c = 1 + static_cast<int>(rng() % 8);
    auto src = oracle::random_map<double>(h, w, c, rng);
    auto fld = oracle::random_field<double>(h, w, rng, -3.0, 3.0);
    auto got = warp(src, fld);
    auto want = oracle::warp_reference(src, fld);
    CHECK(((got.data - want.data).abs().maxCoeff()) < 1e-12);
  }
}

TEST_CASE("warp is linear in the source") {
  std::mt19937 rng(5);
  auto a = oracle::random_map<double>(6, 5, 3, rng);
  auto b = oracle::random_map<double>(6, 5, 3, rng);
  auto d = oracle::random_field<double>(6, 5, rng, -2.0, 2.0);
  const double alpha = 0.7, beta = -1.3;
  FeatureMap<double> mix(6, 5, 3);
  mix.data = alpha * a.data + beta * b.data;
  auto lhs = warp(mix, d);
  auto wa = warp(a, d);
  auto wb = warp(b, d);
  FeatureMap<double> rhs(6, 5, 3);
  rhs.data = alpha * wa.data + beta * wb.data;
  CHECK((lhs.data - rhs.data).abs().maxCoeff() < 1e-12);
}

TEST_CASE("warp with constant integer field is a translation with zero fill") {
  std::mt19937 rng(11);
  auto src = oracle::random_map<double>(7, 6, 2, rng);
  DisplacementField<double> d(7, 6, 2.0, -1.0);
  auto out = warp(src, d);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 6; ++x)
      for (int c = 0; c < 2; ++c) {
        const int sy = y - 1, sx = x + 2;
        const double want =
            (sy >= 0 && sy < 7 && sx >= 0 && sx < 6) ? src.at(sy, sx, c) : 0.0;
        CHECK(out.at(y, x, c) == doctest::Approx(want).epsilon(1e-13));
      }
}

TEST_CASE("interpolation weights sum to the in-bounds fraction") {
  // Warp an all-ones map: the output pixel value equals the summed weight of
  // its in-bounds corners.
  FeatureMap<double> ones(5, 5, 1, 1.0);
  std::mt19937 rng(17);
  auto d = oracle::random_field<double>(5, 5, rng, -1.4, 1.4);
  auto out = warp(ones, d);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      const double sx = x + d.dx(y, x), sy = y + d.dy(y, x);
      // expected weight mass = sum over the in-bounds corners
      const int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      const double ax = sx - x0, ay = sy - y0;
      double want = 0;
      const double w[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax),
                           ay * ax};
      const int cy[4] = {y0, y0, y0 + 1, y0 + 1};
      const int cx[4] = {x0, x0 + 1, x0, x0 + 1};
      for (int k = 0; k < 4; ++k)
        if (cy[k] >= 0 && cy[k] < 5 && cx[k] >= 0 && cx[k] < 5) want += w[k];
      CHECK(out.at(y, x, 0) == doctest::Approx(want).epsilon(1e-12));
      const bool fully_inside = sx >= 0 && sx <= 4 && sy >= 0 && sy <= 4;
      if (fully_inside)
        CHECK(out.at(y, x, 0) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("warp_backward passes gradient through for identity fields") {
  std::mt19937 rng(3);
  auto src = oracle::random_map<double>(4, 4, 2, rng);
  DisplacementField<double> d(4, 4);
  FeatureMap<double> up(4, 4, 2, 1.0);
  auto g = warp_backward(src, d, up);
  CHECK((g.d_source.data == 1.0).all());
}

TEST_CASE("warp_backward is zero for fully out-of-bounds fields") {
  std::mt19937 rng(4);
  auto src = oracle::random_map<double>(4, 4, 2, rng);
  DisplacementField<double> d(4, 4, 10.0, 10.0);
  FeatureMap<double> up(4, 4, 2, 1.0);
  auto g = warp_backward(src, d, up);
  CHECK((g.d_source.data == 0.0).all());
}

TEST_CASE("warp_backward matches central finite differences") {
  std::mt19937 rng(99);
  auto src = oracle::random_map<double>(4, 4, 2, rng);
  // small non-integer offsets keep sampling away from lattice corners
  auto fld = oracle::random_field<double>(4, 4, rng, -0.45, 0.45);
  fld.data += 0.013;
  auto up = oracle::random_map<double>(4, 4, 2, rng);

  auto loss = [&]() {
    auto out = warp(src, fld);
    return (out.data * up.data).sum();
  };
  auto g = warp_backward(src, fld, up);

  double max_rel = 0.0;
  for (Eigen::Index i = 0; i < src.data.size(); ++i) {
    const double fd = oracle::central_diff(loss, &src.data[i], 1e-4);
    max_rel = std::max(max_rel, oracle::rel_err(g.d_source.data[i], fd));
  }
  for (Eigen::Index i = 0; i < fld.data.size(); ++i) {
    const double fd = oracle::central_diff(loss, &fld.data[i], 1e-4);
    max_rel = std::max(max_rel, oracle::rel_err(g.d_field.data[i], fd));
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("compose_fields basics") {
  DisplacementField<double> zero(6, 6);
  auto z = compose_fields(zero, zero);
  CHECK((z.data == 0.0).all());

  DisplacementField<double> u(6, 6, 1.25, -0.5);
  DisplacementField<double> v(6, 6, -0.75, 2.0);
  auto uv = compose_fields(u, v);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      CHECK(uv.dx(y, x) == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(uv.dy(y, x) == doctest::Approx(1.5).epsilon(1e-12));
    }
}

TEST_CASE("composed warp approximates sequential warps on smooth fields") {
  // Smooth fields that taper to zero near the border keep every sample
  // in bounds, so the two routes differ only by interpolation error.
  const int H = 16, W = 16;
  FeatureMap<double> src(H, W, 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        src.at(y, x, c) = 1.0 + 0.5 * std::sin(M_PI * x / W + c) *
                                    std::cos(M_PI * y / H);
  auto window = [&](int y, int x) {
    const double fy = std::sin(M_PI * y / double(H - 1));
    const double fx = std::sin(M_PI * x / double(W - 1));
    return fy * fy * fx * fx;
  };
  DisplacementField<double> first(H, W), second(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      first.dx(y, x) = 0.8 * window(y, x);
      first.dy(y, x) = -0.6 * window(y, x);
      second.dx(y, x) = -0.5 * window(y, x);
      second.dy(y, x) = 0.7 * window(y, x);
    }
  auto sequential = warp(warp(src, first), second);
  auto composed = warp(src, compose_fields(first, second));
  const double denom = sequential.data.abs().maxCoeff();
  CHECK((sequential.data - composed.data).abs().maxCoeff() / denom < 1e-2);
}

TEST_CASE("elementwise ops") {
  std::mt19937 rng(8);
  auto a = oracle::random_map<double>(3, 4, 2, rng);
  auto b = oracle::random_map<double>(3, 4, 2, rng);

  auto la = lerp(a, a, 0.7);
  CHECK((la.data - a.data).abs().maxCoeff() < 1e-15);

  auto mid = lerp(a, b, 0.5);
  auto avg = scale(add(a, b), 0.5);
  CHECK((mid.data - avg.data).abs().maxCoeff() < 1e-15);

  FeatureMap<double> c(4, 4, 2);
  CHECK_THROWS_AS(add(a, c), DimensionError);
}

TEST_CASE("tensor file round-trip and error taxonomy") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "memwarp_io_test";
  fs::create_directories(dir);

  std::mt19937 rng(21);
  auto m = oracle::random_map<float>(5, 3, 4, rng);
  const fs::path p = dir / "t.mwtn";
  write_tensor(p, m);
  auto back = read_tensor(p);
  CHECK(back.height == 5);
  CHECK(back.width == 3);
  CHECK(back.channels == 4);
  CHECK((back.data == m.data).all());

  // save -> load -> save is byte-identical
  const fs::path p2 = dir / "t2.mwtn";
  write_tensor(p2, back);
  std::ifstream f1(p, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  // corrupted magic
  {
    std::string bad = s1;
    bad[0] = 'X';
    std::ofstream o(dir / "bad_magic.mwtn", std::ios::binary);
    o << bad;
  }
  CHECK_THROWS_WITH_AS(read_tensor(dir / "bad_magic.mwtn"),
                       doctest::Contains("bad magic"), FormatError);

  // truncated payload
  {
    std::ofstream o(dir / "trunc.mwtn", std::ios::binary);
    o << s1.substr(0, s1.size() - 6);
  }
  CHECK_THROWS_WITH_AS(read_tensor(dir / "trunc.mwtn"),
                       doctest::Contains("truncated"), FormatError);

  // dims inconsistent with file size
  {
    std::string bad = s1;
    bad[8] = static_cast<char>(200);  // H low byte
    std::ofstream o(dir / "dim.mwtn", std::ios::binary);
    o << bad;
  }
  CHECK_THROWS_AS(read_tensor(dir / "dim.mwtn"), FormatError);

  fs::remove_all(dir);
}
