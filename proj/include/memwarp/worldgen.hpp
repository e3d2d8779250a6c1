#pragma once

#include "memwarp/detection.hpp"
#include "memwarp/io.hpp"
#include "memwarp/tensor.hpp"
#include "memwarp/warp.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace memwarp {

enum class ShapeKind { Rectangle, GaussianBlob };

struct ObjectSpec {
  ShapeKind kind = ShapeKind::Rectangle;
  int class_id = 0;
  double half_w = 4, half_h = 4;  // rectangle half extents / blob sigma in half_w
  double start_x = 16, start_y = 16;
  double vel_x = 0, vel_y = 0;    // screen px per frame
  double acc_x = 0, acc_y = 0;    // screen px per frame^2
  unsigned texture_seed = 0;      // appearance jitter
  std::vector<std::pair<int, int>> occlusions;  // inclusive frame ranges
};

struct SceneSpec {
  int image_height = 32;
  int image_width = 32;
  std::vector<ObjectSpec> objects;
  double noise_level = 0.02;
  double camera_vx = 0, camera_vy = 0;  // camera pan, px per frame
};

// Frames, exact per-frame ground truth and the displacement fields at
// feature resolution. fields[t] holds D_(t,t-1) for t >= 1 and maps frame-t
// feature cells to their frame-(t-1) positions; fields[0] is zero padding.
struct SequenceRecord {
  SceneSpec spec;
  unsigned seed = 0;
  std::vector<FeatureMap<float>> frames;
  std::vector<std::vector<Box>> boxes;
  std::vector<DisplacementField<float>> fields;

  int length() const { return static_cast<int>(frames.size()); }
};

namespace genimpl {

struct ObjectState {
  double cx, cy;        // screen center at frame t
  double ext_x, ext_y;  // box half extents
  float color[3];
  bool blob;
};

inline bool occluded_at(const ObjectSpec& o, int t) {
  for (auto [a, b] : o.occlusions)
    if (t >= a && t <= b) return true;
  return false;
}

inline ObjectState object_at(const ObjectSpec& o, int t) {
  ObjectState s;
  s.cx = o.start_x + o.vel_x * t + 0.5 * o.acc_x * t * t;
  s.cy = o.start_y + o.vel_y * t + 0.5 * o.acc_y * t * t;
  s.blob = o.kind == ShapeKind::GaussianBlob;
  // blob support radius where the profile falls below ~0.05
  const double rr = std::sqrt(2.0 * std::log(20.0));
  s.ext_x = s.blob ? rr * o.half_w : o.half_w;
  s.ext_y = s.blob ? rr * o.half_h : o.half_h;
  std::mt19937 crng(o.texture_seed * 7919u + 13u);
  std::uniform_real_distribution<double> j(-0.08, 0.08);
  const double jit = j(crng);
  if (o.class_id % 2 == 0) {
    s.color[0] = float(0.82 + jit);
    s.color[1] = float(0.28 + 0.5 * j(crng));
    s.color[2] = float(0.20 + 0.5 * j(crng));
  } else {
    s.color[0] = float(0.20 + 0.5 * j(crng));
    s.color[1] = float(0.30 + 0.5 * j(crng));
    s.color[2] = float(0.84 + jit);
  }
  return s;
}

// Screen displacement of the object from frame t-1 to frame t.
inline std::pair<double, double> object_step(const ObjectSpec& o, int t) {
  return {o.vel_x + o.acc_x * (t - 0.5), o.vel_y + o.acc_y * (t - 0.5)};
}

// Coverage of pixel [x, x+1) x [y, y+1) by the object; rectangles get
// exact area overlap, blobs evaluate the Gaussian profile at the center.
inline double coverage(const ObjectState& s, const ObjectSpec& o, int y, int x) {
  if (!s.blob) {
    const double ox = std::min(double(x) + 1, s.cx + s.ext_x) -
                      std::max(double(x), s.cx - s.ext_x);
    const double oy = std::min(double(y) + 1, s.cy + s.ext_y) -
                      std::max(double(y), s.cy - s.ext_y);
    return std::max(0.0, ox) * std::max(0.0, oy);
  }
  const double dx = (x + 0.5 - s.cx) / o.half_w;
  const double dy = (y + 0.5 - s.cy) / o.half_h;
  const double r2 = dx * dx + dy * dy;
  const double cut = 2.0 * std::log(20.0);
  return r2 <= cut ? std::exp(-0.5 * r2) : 0.0;
}

inline float background_at(const SceneSpec& spec, int t, int y, int x, int c) {
  // faint texture that pans with the camera
  const double u = x + spec.camera_vx * t;
  const double v = y + spec.camera_vy * t;
  const double tex = 0.03 * std::sin(0.55 * u + 0.2 * c) * std::cos(0.45 * v);
  const double base[3] = {0.11, 0.12, 0.10};
  return float(base[c] + tex);
}

}  // namespace genimpl

inline void validate_spec(const SceneSpec& spec, int length) {
  if (spec.image_height % kFeatureStride != 0 ||
      spec.image_width % kFeatureStride != 0)
    throw std::invalid_argument("SceneSpec: image dims must divide by stride");
  for (const auto& o : spec.objects) {
    for (auto [a, b] : o.occlusions)
      if (a < 0 || b >= length || a > b)
        throw std::invalid_argument("SceneSpec: occlusion range out of sequence");
    for (int t = 0; t < length; ++t) {
      const auto s = genimpl::object_at(o, t);
      const double vis_x = std::min(s.cx + s.ext_x, double(spec.image_width)) -
                           std::max(s.cx - s.ext_x, 0.0);
      const double vis_y = std::min(s.cy + s.ext_y, double(spec.image_height)) -
                           std::max(s.cy - s.ext_y, 0.0);
      const double frac =
          std::max(0.0, vis_x) * std::max(0.0, vis_y) / (4 * s.ext_x * s.ext_y);
      if (frac < 0.5)
        throw std::invalid_argument(
            "SceneSpec: object leaves the image (frame " + std::to_string(t) +
            ")");
    }
  }
}

// Renders the sequence and derives boxes and displacement fields
// analytically from the rigid per-object and camera motion. A frame range
// in an object's occluder schedule paints the object over with background,
// while its ground-truth box stays.
inline SequenceRecord generate(const SceneSpec& spec, int length,
                               unsigned seed) {
  validate_spec(spec, length);
  const int H = spec.image_height, W = spec.image_width;
  const int fh = H / kFeatureStride, fw = W / kFeatureStride;
  SequenceRecord rec;
  rec.spec = spec;
  rec.seed = seed;
  std::mt19937 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  for (int t = 0; t < length; ++t) {
    FeatureMap<float> img(H, W, 3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(y, x, c) = genimpl::background_at(spec, t, y, x, c);

    std::vector<Box> gt;
    for (const auto& o : spec.objects) {
      const auto s = genimpl::object_at(o, t);
      Box b;
      b.x0 = std::clamp(s.cx - s.ext_x, 0.0, double(W));
      b.x1 = std::clamp(s.cx + s.ext_x, 0.0, double(W));
      b.y0 = std::clamp(s.cy - s.ext_y, 0.0, double(H));
      b.y1 = std::clamp(s.cy + s.ext_y, 0.0, double(H));
      b.class_id = o.class_id;
      b.score = 1.0;
      gt.push_back(b);
      if (genimpl::occluded_at(o, t)) continue;  // hidden by the occluder
      const int px0 = std::max(0, int(std::floor(s.cx - s.ext_x)) - 1);
      const int px1 = std::min(W - 1, int(std::ceil(s.cx + s.ext_x)) + 1);
      const int py0 = std::max(0, int(std::floor(s.cy - s.ext_y)) - 1);
      const int py1 = std::min(H - 1, int(std::ceil(s.cy + s.ext_y)) + 1);
      for (int y = py0; y <= py1; ++y)
        for (int x = px0; x <= px1; ++x) {
          const double a = std::min(1.0, genimpl::coverage(s, o, y, x));
          if (a <= 0) continue;
          for (int c = 0; c < 3; ++c)
            img.at(y, x, c) = float((1.0 - a) * img.at(y, x, c) + a * s.color[c]);
        }
    }
    if (spec.noise_level > 0)
      for (Eigen::Index i = 0; i < img.data.size(); ++i)
        img.data[i] += float(spec.noise_level * noise(rng));

    rec.frames.push_back(std::move(img));
    rec.boxes.push_back(std::move(gt));

    // D_(t,t-1): cells on an object's destination support carry the inverse
    // of its screen step; everywhere else the camera pan dominates.
    DisplacementField<float> field(fh, fw);
    if (t >= 1) {
      const float bg_dx = float(spec.camera_vx / kFeatureStride);
      const float bg_dy = float(spec.camera_vy / kFeatureStride);
      for (int i = 0; i < fh; ++i)
        for (int j = 0; j < fw; ++j) {
          field.dx(i, j) = bg_dx;
          field.dy(i, j) = bg_dy;
        }
      for (const auto& o : spec.objects) {
        const auto s = genimpl::object_at(o, t);
        const auto [sx, sy] = genimpl::object_step(o, t);
        for (int i = 0; i < fh; ++i)
          for (int j = 0; j < fw; ++j) {
            const double cx = (j + 0.5) * kFeatureStride;
            const double cy = (i + 0.5) * kFeatureStride;
            if (cx >= s.cx - s.ext_x && cx <= s.cx + s.ext_x &&
                cy >= s.cy - s.ext_y && cy <= s.cy + s.ext_y) {
              field.dx(i, j) = float(-sx / kFeatureStride);
              field.dy(i, j) = float(-sy / kFeatureStride);
            }
          }
      }
    }
    rec.fields.push_back(std::move(field));
  }
  return rec;
}

struct RandomSceneOptions {
  int image_size = 32;
  int min_objects = 2;
  int max_objects = 2;
  double max_speed = 1.1;        // px per frame
  double accel_fraction = 0.3;   // chance an object accelerates
  double occlusion_fraction = 1.0;  // chance an object gets hidden once
  int occlusion_min = 4;
  int occlusion_max = 6;
  double noise_level = 0.02;
  double max_camera = 0.3;
};

// A randomized two-class scene (rectangles vs blobs) whose objects stay
// fully inside the image over the whole sequence.
inline SceneSpec random_scene(int length, std::mt19937& rng,
                              const RandomSceneOptions& opt = {}) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SceneSpec spec;
  spec.image_height = spec.image_width = opt.image_size;
  spec.noise_level = opt.noise_level;
  spec.camera_vx = opt.max_camera * (2 * unit(rng) - 1);
  spec.camera_vy = opt.max_camera * (2 * unit(rng) - 1);
  const int n = opt.min_objects +
                int(unit(rng) * (opt.max_objects - opt.min_objects + 0.999));
  for (int i = 0; i < n; ++i) {
    ObjectSpec o;
    o.kind = i % 2 == 0 ? ShapeKind::Rectangle : ShapeKind::GaussianBlob;
    o.class_id = i % 2;
    if (o.kind == ShapeKind::Rectangle) {
      o.half_w = 3.0 + 2.0 * unit(rng);
      o.half_h = 3.0 + 2.0 * unit(rng);
    } else {
      o.half_w = o.half_h = 1.3 + 0.6 * unit(rng);
    }
    o.texture_seed = rng();
    const auto probe = genimpl::object_at(o, 0);
    const double margin_x = probe.ext_x + 1.0, margin_y = probe.ext_y + 1.0;
    const double span_x = opt.image_size - 2 * margin_x;
    const double span_y = opt.image_size - 2 * margin_y;
    o.start_x = margin_x + unit(rng) * span_x;
    o.start_y = margin_y + unit(rng) * span_y;
    auto pick_motion = [&](double start, double margin, double span_hi,
                           double& vel, double& acc) {
      const double room_pos = span_hi - margin - start;
      const double room_neg = start - margin;
      const bool positive = room_pos > room_neg ? unit(rng) < 0.75
                                                : unit(rng) < 0.25;
      const double room = positive ? room_pos : room_neg;
      double v = std::min(opt.max_speed, 0.9 * room / length);
      v = v * (0.35 + 0.65 * unit(rng));
      vel = positive ? v : -v;
      acc = 0;
      if (unit(rng) < opt.accel_fraction) {
        // accelerate, then shrink the velocity so the end point still fits
        acc = vel / length * (0.5 + 0.5 * unit(rng));
        vel *= 0.6;
      }
    };
    pick_motion(o.start_x, margin_x, opt.image_size, o.vel_x, o.acc_x);
    pick_motion(o.start_y, margin_y, opt.image_size, o.vel_y, o.acc_y);
    if (unit(rng) < opt.occlusion_fraction && length > opt.occlusion_max + 6) {
      const int len = opt.occlusion_min +
                      int(unit(rng) * (opt.occlusion_max - opt.occlusion_min + 0.999));
      const int lo = 3 + int(unit(rng) * (length - len - 6));
      o.occlusions.push_back({lo, lo + len - 1});
    }
    spec.objects.push_back(std::move(o));
  }
  return spec;
}

// --- spec <-> json ---------------------------------------------------------

inline nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["image_height"] = spec.image_height;
  j["image_width"] = spec.image_width;
  j["noise_level"] = spec.noise_level;
  j["camera_vx"] = spec.camera_vx;
  j["camera_vy"] = spec.camera_vy;
  j["objects"] = nlohmann::json::array();
  for (const auto& o : spec.objects) {
    nlohmann::json jo;
    jo["kind"] = o.kind == ShapeKind::Rectangle ? "rectangle" : "blob";
    jo["class_id"] = o.class_id;
    jo["half_w"] = o.half_w;
    jo["half_h"] = o.half_h;
    jo["start_x"] = o.start_x;
    jo["start_y"] = o.start_y;
    jo["vel_x"] = o.vel_x;
    jo["vel_y"] = o.vel_y;
    jo["acc_x"] = o.acc_x;
    jo["acc_y"] = o.acc_y;
    jo["texture_seed"] = o.texture_seed;
    jo["occlusions"] = nlohmann::json::array();
    for (auto [a, b] : o.occlusions) jo["occlusions"].push_back({a, b});
    j["objects"].push_back(jo);
  }
  return j;
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec spec;
  spec.image_height = j.at("image_height");
  spec.image_width = j.at("image_width");
  spec.noise_level = j.value("noise_level", 0.0);
  spec.camera_vx = j.value("camera_vx", 0.0);
  spec.camera_vy = j.value("camera_vy", 0.0);
  for (const auto& jo : j.value("objects", nlohmann::json::array())) {
    ObjectSpec o;
    o.kind = jo.value("kind", "rectangle") == "blob" ? ShapeKind::GaussianBlob
                                                     : ShapeKind::Rectangle;
    o.class_id = jo.value("class_id", 0);
    o.half_w = jo.value("half_w", 4.0);
    o.half_h = jo.value("half_h", 4.0);
    o.start_x = jo.at("start_x");
    o.start_y = jo.at("start_y");
    o.vel_x = jo.value("vel_x", 0.0);
    o.vel_y = jo.value("vel_y", 0.0);
    o.acc_x = jo.value("acc_x", 0.0);
    o.acc_y = jo.value("acc_y", 0.0);
    o.texture_seed = jo.value("texture_seed", 0u);
    for (const auto& r : jo.value("occlusions", nlohmann::json::array()))
      o.occlusions.emplace_back(r.at(0).get<int>(), r.at(1).get<int>());
    spec.objects.push_back(std::move(o));
  }
  return spec;
}

// --- sequence (de)serialization --------------------------------------------

inline void save(const SequenceRecord& rec, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "fields");
  nlohmann::json manifest;
  manifest["format"] = "memwarp-sequence";
  manifest["version"] = 1;
  manifest["length"] = rec.length();
  manifest["seed"] = rec.seed;
  manifest["spec"] = to_json(rec.spec);
  auto files = nlohmann::json::array();
  char name[32];
  for (int t = 0; t < rec.length(); ++t) {
    std::snprintf(name, sizeof(name), "images/img_%04d.mwtn", t);
    write_tensor(dir / name, rec.frames[t]);
    files.push_back(name);
    if (t >= 1) {
      std::snprintf(name, sizeof(name), "fields/field_%04d.mwtn", t);
      write_field(dir / name, rec.fields[t]);
      files.push_back(name);
    }
  }
  files.push_back("boxes.txt");
  manifest["files"] = files;
  write_box_records(dir / "boxes.txt", rec.boxes, /*with_score=*/false);
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw FormatError("save: manifest write failed in " + dir.string());
}

inline SequenceRecord load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("load: missing manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load: bad manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "memwarp-sequence")
    throw FormatError("load: not a sequence manifest in " + dir.string());
  SequenceRecord rec;
  rec.seed = manifest.value("seed", 0u);
  rec.spec = scene_spec_from_json(manifest.at("spec"));
  const int length = manifest.at("length");
  char name[32];
  for (int t = 0; t < length; ++t) {
    std::snprintf(name, sizeof(name), "images/img_%04d.mwtn", t);
    rec.frames.push_back(read_tensor(dir / name));
    if (t >= 1) {
      std::snprintf(name, sizeof(name), "fields/field_%04d.mwtn", t);
      rec.fields.push_back(read_field(dir / name));
    } else {
      rec.fields.emplace_back(rec.frames[0].height / kFeatureStride,
                              rec.frames[0].width / kFeatureStride);
    }
  }
  rec.boxes = read_box_records(dir / "boxes.txt", length);
  if (static_cast<int>(rec.boxes.size()) != length)
    throw FormatError("load: box records exceed sequence length");
  return rec;
}

// A dataset is a directory of sequences plus a top-level manifest.
inline void save_dataset(const std::vector<SequenceRecord>& seqs,
                         const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "memwarp-dataset";
  manifest["count"] = seqs.size();
  auto list = nlohmann::json::array();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "seq_%03zu", i);
    save(seqs[i], dir / name);
    list.push_back(name);
  }
  manifest["sequences"] = list;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw FormatError("save_dataset: manifest write failed");
}

inline std::vector<SequenceRecord> load_dataset(
    const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("load_dataset: missing manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_dataset: bad manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "memwarp-dataset")
    throw FormatError("load_dataset: not a dataset manifest");
  std::vector<SequenceRecord> seqs;
  for (const auto& name : manifest.at("sequences"))
    seqs.push_back(load(dir / name.get<std::string>()));
  return seqs;
}

}  // namespace memwarp
