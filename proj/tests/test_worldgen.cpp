#include "doctest.h"

#include "memwarp/conv.hpp"
#include "memwarp/warp.hpp"
#include "memwarp/worldgen.hpp"

#include <filesystem>
#include <fstream>

using namespace memwarp;

namespace {

SceneSpec two_object_spec() {
  SceneSpec spec;
  spec.noise_level = 0;
  ObjectSpec a;
  a.kind = ShapeKind::Rectangle;
  a.class_id = 0;
  a.half_w = 4;
  a.half_h = 3;
  a.start_x = 9;
  a.start_y = 10;
  a.vel_x = 1.0;
  a.vel_y = 0.5;
  ObjectSpec b;
  b.kind = ShapeKind::GaussianBlob;
  b.class_id = 1;
  b.half_w = 1.6;
  b.half_h = 1.6;
  b.start_x = 22;
  b.start_y = 22;
  b.vel_x = -0.75;
  spec.objects = {a, b};
  return spec;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

}  // namespace

TEST_CASE("static scene renders identical frames and zero fields") {
  SceneSpec spec = two_object_spec();
  for (auto& o : spec.objects) {
    o.vel_x = o.vel_y = 0;
  }
  auto rec = generate(spec, 5, 9);
  for (int t = 1; t < 5; ++t) {
    CHECK((rec.frames[t].data == rec.frames[0].data).all());
    CHECK((rec.fields[t].data == 0.0f).all());
  }
}

TEST_CASE("generation is deterministic under the seed") {
  SceneSpec spec = two_object_spec();
  spec.noise_level = 0.03;
  auto a = generate(spec, 6, 77);
  auto b = generate(spec, 6, 77);
  auto c = generate(spec, 6, 78);
  for (int t = 0; t < 6; ++t)
    CHECK((a.frames[t].data == b.frames[t].data).all());
  CHECK_FALSE((a.frames[0].data == c.frames[0].data).all());
}

TEST_CASE("occluded frames keep boxes but hide pixels") {
  SceneSpec spec = two_object_spec();
  spec.objects[0].occlusions = {{2, 3}};
  auto rec = generate(spec, 6, 5);
  for (int t = 0; t < 6; ++t) REQUIRE(rec.boxes[t].size() == 2);

  // at an occluded frame, pixels at the object's location match a render of
  // the scene without that object
  SceneSpec bare = spec;
  bare.objects.erase(bare.objects.begin());
  auto ghost = generate(bare, 6, 5);
  const auto& box = rec.boxes[2][0];
  for (int y = int(box.y0); y < int(box.x1); ++y)
    for (int x = int(box.x0); x < int(box.x1); ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(rec.frames[2].at(y, x, c) ==
              doctest::Approx(ghost.frames[2].at(y, x, c)).epsilon(1e-12));
  // on a visible frame the object is actually there
  double diff = 0;
  for (int c = 0; c < 3; ++c)
    diff += std::abs(rec.frames[1].at(int(rec.boxes[1][0].cy()),
                                      int(rec.boxes[1][0].cx()), c) -
                     ghost.frames[1].at(int(rec.boxes[1][0].cy()),
                                        int(rec.boxes[1][0].cx()), c));
  CHECK(diff > 0.3);
}

TEST_CASE("warping the previous downsampled frame matches the next one") {
  SceneSpec spec = two_object_spec();
  spec.camera_vx = 0.5;
  auto rec = generate(spec, 8, 21);
  for (int t = 1; t < 8; ++t) {
    auto prev = avgpool_forward(rec.frames[t - 1], kFeatureStride);
    auto cur = avgpool_forward(rec.frames[t], kFeatureStride);
    auto warped = warp(prev, rec.fields[t]);
    for (const auto& o : spec.objects) {
      const auto s = genimpl::object_at(o, t);
      if (genimpl::occluded_at(o, t)) continue;
      for (int i = 0; i < cur.height; ++i)
        for (int j = 0; j < cur.width; ++j) {
          const double cx = (j + 0.5) * kFeatureStride;
          const double cy = (i + 0.5) * kFeatureStride;
          // interior cells only: one stride of margin dodges the mixed
          // object/background cells at the silhouette
          if (cx > s.cx - s.ext_x + kFeatureStride &&
              cx < s.cx + s.ext_x - kFeatureStride &&
              cy > s.cy - s.ext_y + kFeatureStride &&
              cy < s.cy + s.ext_y - kFeatureStride) {
            for (int c = 0; c < 3; ++c)
              CHECK(std::abs(warped.at(i, j, c) - cur.at(i, j, c)) < 5e-2);
          }
        }
    }
  }
}

TEST_CASE("boxes bound the rendered support tightly at zero noise") {
  SceneSpec spec = two_object_spec();
  auto rec = generate(spec, 3, 11);
  SceneSpec empty = spec;
  empty.objects.clear();
  auto bg = generate(empty, 3, 11);
  for (int t = 0; t < 3; ++t) {
    for (std::size_t o = 0; o < spec.objects.size(); ++o) {
      const auto& box = rec.boxes[t][o];
      // support pixels differing from the background must sit inside the
      // box inflated by one pixel
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          double d = 0;
          for (int c = 0; c < 3; ++c)
            d += std::abs(rec.frames[t].at(y, x, c) - bg.frames[t].at(y, x, c));
          const bool other =
              spec.objects.size() > 1 &&
              x >= rec.boxes[t][1 - o].x0 - 1 && x <= rec.boxes[t][1 - o].x1 + 1 &&
              y >= rec.boxes[t][1 - o].y0 - 1 && y <= rec.boxes[t][1 - o].y1 + 1;
          if (d > 0.15 && !other) {
            CHECK(x + 0.5 >= box.x0 - 1.0);
            CHECK(x + 0.5 <= box.x1 + 1.0);
            CHECK(y + 0.5 >= box.y0 - 1.0);
            CHECK(y + 0.5 <= box.y1 + 1.0);
          }
        }
    }
  }
}

TEST_CASE("spec violations are rejected") {
  SceneSpec spec = two_object_spec();
  spec.objects[0].vel_x = 6.0;  // runs off the image
  CHECK_THROWS_AS(generate(spec, 8, 1), std::invalid_argument);

  SceneSpec bad_occ = two_object_spec();
  bad_occ.objects[0].occlusions = {{4, 9}};
  CHECK_THROWS_AS(generate(bad_occ, 6, 1), std::invalid_argument);
}

TEST_CASE("sequence save/load round trip is byte exact") {
  namespace fs = std::filesystem;
  SceneSpec spec = two_object_spec();
  spec.objects[0].occlusions = {{1, 2}};
  spec.noise_level = 0.02;
  auto rec = generate(spec, 5, 33);

  const fs::path d1 = fs::temp_directory_path() / "memwarp_seq_a";
  const fs::path d2 = fs::temp_directory_path() / "memwarp_seq_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  save(rec, d1);
  auto loaded = load(d1);
  CHECK(loaded.length() == rec.length());
  for (int t = 0; t < rec.length(); ++t) {
    CHECK((loaded.frames[t].data == rec.frames[t].data).all());
    CHECK((loaded.fields[t].data == rec.fields[t].data).all());
    REQUIRE(loaded.boxes[t].size() == rec.boxes[t].size());
  }
  save(loaded, d2);
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1);
    CHECK(slurp(entry.path()) == slurp(d2 / rel));
  }

  // corrupting the manifest yields a format error, not a crash
  {
    std::ofstream os(d1 / "manifest.json");
    os << "{ not json";
  }
  CHECK_THROWS_AS(load(d1), FormatError);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("dataset save/load round trip") {
  namespace fs = std::filesystem;
  SceneSpec spec = two_object_spec();
  std::vector<SequenceRecord> seqs{generate(spec, 4, 1), generate(spec, 4, 2)};
  const fs::path dir = fs::temp_directory_path() / "memwarp_dataset_test";
  fs::remove_all(dir);
  save_dataset(seqs, dir);
  auto back = load_dataset(dir);
  REQUIRE(back.size() == 2);
  CHECK((back[1].frames[3].data == seqs[1].frames[3].data).all());
  fs::remove_all(dir);
}
