#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rrnet/tensor.hpp"

namespace rrnet {

struct LrPhase {
  int first_epoch = 1;
  int last_epoch = 1;
  double lr = 0.01;

  friend bool operator==(const LrPhase&, const LrPhase&) = default;
};

/// 0.01 / 0.001 / 0.0001 over the first 2/3, next 1/6 and last 1/6 of the
/// epochs; exactly 1-40, 41-50, 51-60 for 60 epochs.
inline std::vector<LrPhase> default_lr_schedule(int epochs) {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  const int a = std::max(1, static_cast<int>(std::lround(epochs * 40.0 / 60.0)));
  const int b = std::max(a, static_cast<int>(std::lround(epochs * 50.0 / 60.0)));
  std::vector<LrPhase> s{{1, std::min(a, epochs), 0.01}};
  if (b > a) s.push_back({a + 1, b, 0.001});
  if (epochs > b) s.push_back({b + 1, epochs, 0.0001});
  return s;
}

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  std::vector<LrPhase> lr_schedule = default_lr_schedule(60);
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool augment = true;
  std::uint64_t seed = 1;
  std::optional<int> train_subset;
  std::optional<int> test_subset;
  double bn_decay = 0.9;            // EMA factor for running BN statistics
  bool recompute_bn_stats = false;  // exact pass over the training set after training

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  [[nodiscard]] double lr_for_epoch(int epoch) const {
    for (const auto& p : lr_schedule)
      if (epoch >= p.first_epoch && epoch <= p.last_epoch) return p.lr;
    throw ConfigError("no learning rate for epoch " + std::to_string(epoch));
  }
};

inline std::vector<std::string> validate(const TrainConfig& c) {
  std::vector<std::string> d;
  if (c.epochs < 1) d.push_back("epochs must be >= 1");
  if (c.batch_size < 1) d.push_back("batch_size must be >= 1");
  if (c.momentum < 0 || c.momentum >= 1) d.push_back("momentum must lie in [0, 1)");
  if (c.weight_decay < 0) d.push_back("weight_decay must be >= 0");
  if (c.bn_decay < 0 || c.bn_decay >= 1) d.push_back("bn_decay must lie in [0, 1)");
  if (c.train_subset && *c.train_subset < 1) d.push_back("train_subset must be >= 1");
  if (c.test_subset && *c.test_subset < 1) d.push_back("test_subset must be >= 1");
  int next = 1;
  for (const auto& p : c.lr_schedule) {
    if (p.first_epoch != next || p.last_epoch < p.first_epoch) {
      d.push_back("lr_schedule ranges must partition 1.." + std::to_string(c.epochs));
      return d;
    }
    if (p.lr < 0) d.push_back("learning rates must be >= 0");
    next = p.last_epoch + 1;
  }
  if (next != c.epochs + 1)
    d.push_back("lr_schedule ranges must partition 1.." + std::to_string(c.epochs));
  return d;
}

}  // namespace rrnet
