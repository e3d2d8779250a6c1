#pragma once

#include "memwarp/conv.hpp"
#include "memwarp/params.hpp"
#include "memwarp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace memwarp {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int class_id = 0;
  double score = 0;

  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
};

inline double iou(const Box& a, const Box& b) {
  const double ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const double ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const double inter = std::max(0.0, ix1 - ix0) * std::max(0.0, iy1 - iy0);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Dense per-cell outputs over the memory map. Box deltas are distances from
// the cell's grid point to the box edges (left, top, right, bottom), in
// feature-grid units.
template <typename T>
struct HeadOutput {
  FeatureMap<T> objectness;    // H x W x 1 logits
  FeatureMap<T> class_logits;  // H x W x C
  FeatureMap<T> box_deltas;    // H x W x 4
};

// Feature extractor: 3x3 conv + rectifier, 4x average pool, 3x3 conv +
// rectifier. Downsamples by 4.
inline constexpr int kFeatureStride = 4;

template <typename T>
void add_extractor_params(ModelParams<T>& p, int img_channels, int mid,
                          int feat, std::mt19937& rng) {
  init_conv(p.add("feat.conv1.w", {3, 3, img_channels, mid}), 9 * img_channels,
            rng);
  p.add("feat.conv1.b", {mid});
  init_conv(p.add("feat.conv2.w", {3, 3, mid, feat}), 9 * mid, rng);
  p.add("feat.conv2.b", {feat});
}

template <typename T>
FeatureMap<T> extract_features(const FeatureMap<T>& image,
                               const ModelParams<T>& p) {
  if (image.height % kFeatureStride != 0 || image.width % kFeatureStride != 0)
    throw DimensionError("extract_features: image dims must divide by stride");
  const auto& w1 = p.at("feat.conv1.w");
  const auto& w2 = p.at("feat.conv2.w");
  auto h = relu_forward(conv2d_forward(image, w1.value, p.at("feat.conv1.b").value,
                                       3, 3, w1.shape[3], 1, 1));
  auto d = avgpool_forward(h, kFeatureStride);
  return relu_forward(conv2d_forward(d, w2.value, p.at("feat.conv2.b").value, 3,
                                     3, w2.shape[3], 1, 1));
}

template <typename T>
void add_head_params(ModelParams<T>& p, int feat, int num_classes,
                     std::mt19937& rng) {
  init_conv(p.add("head.trunk.w", {3, 3, feat, feat}), 9 * feat, rng);
  p.add("head.trunk.b", {feat});
  init_conv(p.add("head.obj.w", {1, 1, feat, 1}), feat, rng);
  p.add("head.obj.b", {1});
  init_conv(p.add("head.cls.w", {1, 1, feat, num_classes}), feat, rng);
  p.add("head.cls.b", {num_classes});
  init_conv(p.add("head.box.w", {1, 1, feat, 4}), feat, rng);
  p.add("head.box.b", {4});
}

template <typename T>
HeadOutput<T> detect_head(const FeatureMap<T>& memory, const ModelParams<T>& p) {
  const auto& tw = p.at("head.trunk.w");
  auto trunk = relu_forward(conv2d_forward(
      memory, tw.value, p.at("head.trunk.b").value, 3, 3, tw.shape[3], 1, 1));
  HeadOutput<T> out;
  out.objectness = conv2d_forward(trunk, p.at("head.obj.w").value,
                                  p.at("head.obj.b").value, 1, 1, 1, 1, 0);
  const auto& cw = p.at("head.cls.w");
  out.class_logits = conv2d_forward(trunk, cw.value, p.at("head.cls.b").value,
                                    1, 1, cw.shape[3], 1, 0);
  out.box_deltas = conv2d_forward(trunk, p.at("head.box.w").value,
                                  p.at("head.box.b").value, 1, 1, 4, 1, 0);
  return out;
}

namespace detail {
template <typename T>
inline T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}
}  // namespace detail

// Greedy per-class suppression of overlaps above the threshold.
inline std::vector<Box> nms(std::vector<Box> boxes, double iou_threshold);

// Cell (i, j) anchors at image point (j*stride, i*stride); a decoded box is
// the anchor offset by stride-scaled deltas, clipped to the image.
template <typename T>
std::vector<Box> decode(const HeadOutput<T>& head, double score_threshold,
                        double nms_iou, int stride = kFeatureStride) {
  const int H = head.objectness.height, W = head.objectness.width;
  const int C = head.class_logits.channels;
  const double img_w = double(W) * stride, img_h = double(H) * stride;
  std::vector<Box> kept;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const double obj = detail::sigmoid(double(head.objectness.at(i, j, 0)));
      if (obj < score_threshold) continue;  // softmax factor can only shrink it
      double mx = -1e30;
      for (int c = 0; c < C; ++c)
        mx = std::max(mx, double(head.class_logits.at(i, j, c)));
      double denom = 0;
      for (int c = 0; c < C; ++c)
        denom += std::exp(double(head.class_logits.at(i, j, c)) - mx);
      const double ax = double(j) * stride, ay = double(i) * stride;
      for (int c = 0; c < C; ++c) {
        const double p =
            std::exp(double(head.class_logits.at(i, j, c)) - mx) / denom;
        const double s = obj * p;
        if (s < score_threshold) continue;
        Box b;
        b.x0 = std::clamp(ax - stride * double(head.box_deltas.at(i, j, 0)), 0.0, img_w);
        b.y0 = std::clamp(ay - stride * double(head.box_deltas.at(i, j, 1)), 0.0, img_h);
        b.x1 = std::clamp(ax + stride * double(head.box_deltas.at(i, j, 2)), 0.0, img_w);
        b.y1 = std::clamp(ay + stride * double(head.box_deltas.at(i, j, 3)), 0.0, img_h);
        b.class_id = c;
        b.score = s;
        if (b.x1 - b.x0 > 1e-9 && b.y1 - b.y0 > 1e-9) kept.push_back(b);
      }
    }
  return nms(kept, nms_iou);
}

inline std::vector<Box> nms(std::vector<Box> boxes, double iou_threshold) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.x0 != b.x0) return a.x0 < b.x0;
    return a.y0 < b.y0;
  });
  std::vector<Box> kept;
  std::vector<bool> removed(boxes.size(), false);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(boxes[i]);
    for (std::size_t j = i + 1; j < boxes.size(); ++j) {
      if (removed[j] || boxes[j].class_id != boxes[i].class_id) continue;
      if (iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = true;
    }
  }
  return kept;
}

// --- loss --------------------------------------------------------------

template <typename T>
struct LossResult {
  T loss = T(0);
  FeatureMap<T> d_objectness, d_class_logits, d_box_deltas;
};

struct CellTarget {
  bool positive = false;
  int class_id = 0;
  double deltas[4] = {0, 0, 0, 0};
};

// Positive cell: its anchor point lies inside a ground-truth box (first
// match wins); a box covering no anchor claims the nearest cell.
inline std::vector<CellTarget> assign_targets(const std::vector<Box>& gt,
                                              int H, int W, int stride) {
  std::vector<CellTarget> cells(static_cast<std::size_t>(H) * W);
  auto claim = [&](int i, int j, const Box& b) {
    auto& c = cells[static_cast<std::size_t>(i) * W + j];
    if (c.positive) return;
    c.positive = true;
    c.class_id = b.class_id;
    const double ax = double(j) * stride, ay = double(i) * stride;
    c.deltas[0] = (ax - b.x0) / stride;
    c.deltas[1] = (ay - b.y0) / stride;
    c.deltas[2] = (b.x1 - ax) / stride;
    c.deltas[3] = (b.y1 - ay) / stride;
  };
  for (const auto& b : gt) {
    bool any = false;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double ax = double(j) * stride, ay = double(i) * stride;
        if (ax >= b.x0 && ax <= b.x1 && ay >= b.y0 && ay <= b.y1) {
          claim(i, j, b);
          any = true;
        }
      }
    if (!any) {
      int bi = 0, bj = 0;
      double best = 1e30;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double dx = double(j) * stride - b.cx();
          const double dy = double(i) * stride - b.cy();
          const double d2 = dx * dx + dy * dy;
          if (d2 < best) {
            best = d2;
            bi = i;
            bj = j;
          }
        }
      claim(bi, bj, b);
    }
  }
  return cells;
}

// Binary cross-entropy on objectness over all cells (positive cells
// up-weighted against the background majority), cross-entropy on the class
// and smooth-L1 on the deltas over positive cells. Returns the loss and its
// analytic gradient w.r.t. every head map.
template <typename T>
LossResult<T> detection_loss(const HeadOutput<T>& head,
                             const std::vector<Box>& gt,
                             int stride = kFeatureStride,
                             double positive_weight = 8.0) {
  const int H = head.objectness.height, W = head.objectness.width;
  const int C = head.class_logits.channels;
  LossResult<T> r;
  r.d_objectness = FeatureMap<T>(H, W, 1);
  r.d_class_logits = FeatureMap<T>(H, W, C);
  r.d_box_deltas = FeatureMap<T>(H, W, 4);

  const auto cells = assign_targets(gt, H, W, stride);
  int npos = 0;
  for (const auto& c : cells) npos += c.positive ? 1 : 0;

  double loss_obj = 0, loss_cls = 0, loss_box = 0;
  const double ncells = double(H) * W;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const auto& cell = cells[static_cast<std::size_t>(i) * W + j];
      const double o = double(head.objectness.at(i, j, 0));
      const double t = cell.positive ? 1.0 : 0.0;
      const double w = cell.positive ? positive_weight : 1.0;
      loss_obj +=
          w * (std::max(o, 0.0) - o * t + std::log1p(std::exp(-std::abs(o))));
      r.d_objectness.at(i, j, 0) = T(w * (detail::sigmoid(o) - t) / ncells);
      if (!cell.positive) continue;

      double mx = -1e30;
      for (int c = 0; c < C; ++c)
        mx = std::max(mx, double(head.class_logits.at(i, j, c)));
      double denom = 0;
      for (int c = 0; c < C; ++c)
        denom += std::exp(double(head.class_logits.at(i, j, c)) - mx);
      loss_cls -= double(head.class_logits.at(i, j, cell.class_id)) - mx -
                  std::log(denom);
      for (int c = 0; c < C; ++c) {
        const double p =
            std::exp(double(head.class_logits.at(i, j, c)) - mx) / denom;
        r.d_class_logits.at(i, j, c) =
            T((p - (c == cell.class_id ? 1.0 : 0.0)) / npos);
      }
      for (int d = 0; d < 4; ++d) {
        const double diff =
            double(head.box_deltas.at(i, j, d)) - cell.deltas[d];
        if (std::abs(diff) < 1.0) {
          loss_box += 0.5 * diff * diff;
          r.d_box_deltas.at(i, j, d) = T(diff / (4.0 * npos));
        } else {
          loss_box += std::abs(diff) - 0.5;
          r.d_box_deltas.at(i, j, d) = T((diff > 0 ? 1.0 : -1.0) / (4.0 * npos));
        }
      }
    }
  loss_obj /= ncells;
  if (npos > 0) {
    loss_cls /= npos;
    loss_box /= 4.0 * npos;
  }
  r.loss = T(loss_obj + loss_cls + loss_box);
  return r;
}

// --- metric ------------------------------------------------------------

struct ApResult {
  std::map<int, double> per_class;
  double mean = 0;
};

// All-point interpolated average precision at one IoU threshold, greedy
// score-ordered matching, one detection per ground-truth box. Classes are
// averaged over those present in the ground truth.
inline ApResult average_precision(
    const std::vector<std::vector<Box>>& detections,
    const std::vector<std::vector<Box>>& ground_truth, double iou_threshold) {
  if (detections.size() != ground_truth.size())
    throw std::invalid_argument("average_precision: frame count mismatch");
  const std::size_t F = ground_truth.size();
  std::map<int, int> gt_count;
  for (const auto& frame : ground_truth)
    for (const auto& b : frame) gt_count[b.class_id]++;

  ApResult res;
  if (gt_count.empty()) return res;

  struct Det {
    std::size_t frame;
    Box box;
  };
  for (const auto& [cls, total_gt] : gt_count) {
    std::vector<Det> dets;
    for (std::size_t f = 0; f < F; ++f)
      for (const auto& b : detections[f])
        if (b.class_id == cls) dets.push_back({f, b});
    std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
      if (a.box.score != b.box.score) return a.box.score > b.box.score;
      if (a.frame != b.frame) return a.frame < b.frame;
      return a.box.x0 < b.box.x0;
    });

    std::vector<std::vector<bool>> used(F);
    for (std::size_t f = 0; f < F; ++f)
      used[f].assign(ground_truth[f].size(), false);

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const auto& det : dets) {
      double best_iou = 0;
      int best_g = -1;
      const auto& gts = ground_truth[det.frame];
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || used[det.frame][g]) continue;
        const double v = iou(det.box, gts[g]);
        if (v > best_iou) {
          best_iou = v;
          best_g = static_cast<int>(g);
        }
      }
      if (best_g >= 0 && best_iou >= iou_threshold) {
        used[det.frame][best_g] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(double(tp) / (tp + fp));
      recall.push_back(double(tp) / total_gt);
    }

    // area under the right-envelope of the precision-recall curve
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
      double p_env = 0;
      for (std::size_t j = i; j < precision.size(); ++j)
        p_env = std::max(p_env, precision[j]);
      ap += (recall[i] - prev_recall) * p_env;
      prev_recall = recall[i];
    }
    res.per_class[cls] = ap;
  }
  double sum = 0;
  for (const auto& [cls, ap] : res.per_class) sum += ap;
  res.mean = sum / res.per_class.size();
  return res;
}

// --- box propagation baseline -------------------------------------------

// Translates each box by the mean displacement over its feature-grid
// footprint, scaled back to image pixels; a box with an empty footprint is
// returned unchanged.
template <typename T>
std::vector<Box> propagate_boxes(const std::vector<Box>& boxes,
                                 const DisplacementField<T>& field,
                                 int feature_stride) {
  const double img_w = double(field.width) * feature_stride;
  const double img_h = double(field.height) * feature_stride;
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (const auto& b : boxes) {
    const int j0 = std::max(0, int(std::floor(b.x0 / feature_stride)));
    const int j1 = std::min(field.width, int(std::ceil(b.x1 / feature_stride)));
    const int i0 = std::max(0, int(std::floor(b.y0 / feature_stride)));
    const int i1 = std::min(field.height, int(std::ceil(b.y1 / feature_stride)));
    if (j0 >= j1 || i0 >= i1) {
      out.push_back(b);
      continue;
    }
    double mx = 0, my = 0;
    for (int i = i0; i < i1; ++i)
      for (int j = j0; j < j1; ++j) {
        mx += double(field.dx(i, j));
        my += double(field.dy(i, j));
      }
    const double n = double(i1 - i0) * (j1 - j0);
    mx = mx / n * feature_stride;
    my = my / n * feature_stride;
    Box moved = b;
    moved.x0 = std::clamp(b.x0 + mx, 0.0, img_w);
    moved.x1 = std::clamp(b.x1 + mx, 0.0, img_w);
    moved.y0 = std::clamp(b.y0 + my, 0.0, img_h);
    moved.y1 = std::clamp(b.y1 + my, 0.0, img_h);
    if (moved.x1 - moved.x0 > 1e-9 && moved.y1 - moved.y0 > 1e-9)
      out.push_back(moved);
  }
  return out;
}

// --- record exchange format ----------------------------------------------
// One record per line: frame_index class_id x0 y0 x1 y1 [score]; ground
// truth omits the score.

inline void write_box_records(const std::filesystem::path& path,
                              const std::vector<std::vector<Box>>& per_frame,
                              bool with_score) {
  std::ofstream os(path);
  if (!os) throw FormatError("write_box_records: cannot open " + path.string());
  os.precision(6);
  os << std::fixed;
  for (std::size_t f = 0; f < per_frame.size(); ++f)
    for (const auto& b : per_frame[f]) {
      os << f << ' ' << b.class_id << ' ' << b.x0 << ' ' << b.y0 << ' ' << b.x1
         << ' ' << b.y1;
      if (with_score) os << ' ' << b.score;
      os << '\n';
    }
}

inline std::vector<std::vector<Box>> read_box_records(
    const std::filesystem::path& path, std::size_t num_frames) {
  std::ifstream is(path);
  if (!is) throw FormatError("read_box_records: cannot open " + path.string());
  std::vector<std::vector<Box>> out(num_frames);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::size_t frame;
    Box b;
    if (!(ss >> frame >> b.class_id >> b.x0 >> b.y0 >> b.x1 >> b.y1))
      throw FormatError("read_box_records: malformed line " +
                        std::to_string(lineno) + " in " + path.string());
    ss >> b.score;  // optional
    if (frame >= out.size()) out.resize(frame + 1);
    out[frame].push_back(b);
  }
  return out;
}

}  // namespace memwarp
