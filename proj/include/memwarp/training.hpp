#pragma once

#include "memwarp/model.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace memwarp {

struct TrainConfig {
  int sequence_length = 6;
  double evidence_dropout = 0.8;  // never applied at the first frame
  double learning_rate = 0.2;
  double lr_decay = 0.1;      // multiplied in once,
  double lr_decay_at = 0.67;  // at this fraction of total steps
  int epochs = 2;
  unsigned seed = 1;
  int log_every = 50;
  double loss_scale_box = 1.0;
};

template <typename T>
void sgd_step(ModelParams<T>& params, double lr) {
  for (auto& [name, e] : params.entries) e.value -= T(lr) * e.grad;
}

struct TrainStats {
  std::vector<double> epoch_loss;
  double final_loss = 0;
  int steps = 0;
};

// Plain SGD over shuffled fixed-length windows of the training sequences.
// Appends one record per logging interval to the metrics stream when given;
// val_fn, when set, is scored after every epoch and logged alongside.
template <typename T>
TrainStats train(DetectionModel<T>& model,
                 const std::vector<SequenceRecord>& dataset,
                 const TrainConfig& tc, std::ostream* metrics = nullptr,
                 const std::function<double(const DetectionModel<T>&)>* val_fn =
                     nullptr) {
  std::vector<std::pair<int, int>> windows;  // (sequence, begin)
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    const int len = dataset[s].length();
    for (int b = 0; b + tc.sequence_length <= len; b += tc.sequence_length)
      windows.emplace_back(static_cast<int>(s), b);
  }
  if (windows.empty())
    throw std::invalid_argument("train: no full windows in dataset");

  std::mt19937 rng(tc.seed);
  const int total_steps = tc.epochs * static_cast<int>(windows.size());
  const int decay_step = static_cast<int>(total_steps * tc.lr_decay_at);
  TrainStats stats;
  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(windows.begin(), windows.end(), rng);
    double epoch_sum = 0;
    for (const auto& [s, b] : windows) {
      const double lr =
          tc.learning_rate * (step >= decay_step ? tc.lr_decay : 1.0);
      auto win = SequenceWindow<T>::from_record(dataset[s], b,
                                                tc.sequence_length);
      auto fwd = forward_sequence(model, win, tc.evidence_dropout, rng);
      std::vector<LossResult<T>> losses;
      losses.reserve(win.length());
      for (int t = 0; t < win.length(); ++t)
        losses.push_back(
            detection_loss(fwd.heads[t].to_output(), win.boxes[t]));
      const T total = backward_sequence(model, fwd, losses);
      if (!std::isfinite(double(total)))
        throw std::runtime_error("train: diverged (non-finite loss at step " +
                                 std::to_string(step) + ")");
      sgd_step(model.params, lr);
      epoch_sum += double(total) / win.length();
      if (metrics && step % tc.log_every == 0)
        (*metrics) << "step=" << step << " loss=" << double(total) / win.length()
                   << " lr=" << lr << "\n";
      ++step;
    }
    stats.epoch_loss.push_back(epoch_sum / windows.size());
    stats.final_loss = stats.epoch_loss.back();
    if (val_fn && *val_fn) {
      const double v = (*val_fn)(model);
      if (metrics)
        (*metrics) << "step=" << step << " epoch=" << epoch
                   << " loss=" << stats.epoch_loss.back() << " map=" << v
                   << "\n";
    }
  }
  stats.steps = step;
  return stats;
}

// Trains a per-frame detector whose head consumes the mean of its own
// features and per-frame side features (frozen strong memory, in the
// deployed system). The model must carry cfg.fuse_side; frames whose side
// map is empty train unfused.
template <typename T, typename SideFn>
TrainStats train_with_side(DetectionModel<T>& model,
                           const std::vector<SequenceRecord>& dataset,
                           const TrainConfig& tc, SideFn&& side_for_sequence,
                           std::ostream* metrics = nullptr) {
  if (!model.cfg.fuse_side)
    throw std::invalid_argument("train_with_side: model lacks fuse_side");
  std::vector<std::vector<FeatureMap<T>>> sides(dataset.size());
  for (std::size_t s = 0; s < dataset.size(); ++s)
    sides[s] = side_for_sequence(s);

  std::vector<std::pair<int, int>> windows;
  for (std::size_t s = 0; s < dataset.size(); ++s)
    for (int b = 0; b + tc.sequence_length <= dataset[s].length();
         b += tc.sequence_length)
      windows.emplace_back(static_cast<int>(s), b);
  if (windows.empty())
    throw std::invalid_argument("train_with_side: no full windows in dataset");

  std::mt19937 rng(tc.seed);
  const int total_steps = tc.epochs * static_cast<int>(windows.size());
  const int decay_step = static_cast<int>(total_steps * tc.lr_decay_at);
  TrainStats stats;
  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(windows.begin(), windows.end(), rng);
    double epoch_sum = 0;
    for (const auto& [s, b] : windows) {
      const double lr =
          tc.learning_rate * (step >= decay_step ? tc.lr_decay : 1.0);
      auto win = SequenceWindow<T>::from_record(dataset[s], b,
                                                tc.sequence_length);
      for (int t = 0; t < tc.sequence_length; ++t)
        win.side.push_back(sides[s][b + t]);
      auto fwd = forward_sequence(model, win, 0.0, rng);
      std::vector<LossResult<T>> losses;
      for (int t = 0; t < win.length(); ++t)
        losses.push_back(
            detection_loss(fwd.heads[t].to_output(), win.boxes[t]));
      const T total = backward_sequence(model, fwd, losses);
      if (!std::isfinite(double(total)))
        throw std::runtime_error(
            "train_with_side: diverged (non-finite loss at step " +
            std::to_string(step) + ")");
      sgd_step(model.params, lr);
      epoch_sum += double(total) / win.length();
      if (metrics && step % tc.log_every == 0)
        (*metrics) << "step=" << step
                   << " loss=" << double(total) / win.length() << " lr=" << lr
                   << "\n";
      ++step;
    }
    stats.epoch_loss.push_back(epoch_sum / windows.size());
    stats.final_loss = stats.epoch_loss.back();
  }
  stats.steps = step;
  return stats;
}

}  // namespace memwarp
