#pragma once

// Mini-batch SGD over an unrolled model, evaluation with a readout-time
// override, batch-norm statistics collection and metrics output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "rrnet/cifar.hpp"
#include "rrnet/config.hpp"
#include "rrnet/executor.hpp"
#include "rrnet/presets.hpp"
#include "rrnet/train_config.hpp"

namespace rrnet {

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;  // mean over batches of the loss summed across readouts
  double test_error = 0;  // top-1, in [0, 1]
  double wall_seconds = 0;
};

struct TrainResult {
  ParamStore<float> store;
  std::vector<EpochMetrics> history;
};

struct TrainHooks {
  std::ostream* log = nullptr;
  std::string checkpoint_path;  // written after the last epoch when non-empty
  bool eval_each_epoch = true;
  std::function<void(int epoch, const std::vector<int>& records)> on_batch;
};

/// Copy of `m` reading out only at time `t`.
inline ModelSpec with_readout(ModelSpec m, int t) {
  m.io.readout_times = {t};
  return m;
}

/// Fraction of rows whose argmax differs from the label.
template <typename T>
double top1_error(const Tensor<T>& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  if (static_cast<int>(labels.size()) != s.n) throw ConfigError("top1_error: label count mismatch");
  const int k = s.c * s.h * s.w;
  int wrong = 0;
  for (int i = 0; i < s.n; ++i) {
    const T* row = logits.data() + static_cast<std::size_t>(i) * k;
    const int pred = static_cast<int>(std::max_element(row, row + k) - row);
    if (pred != labels[i]) ++wrong;
  }
  return s.n ? static_cast<double>(wrong) / s.n : 0.0;
}

namespace detail {

inline std::vector<std::vector<int>> batches_of(std::vector<int> order, int batch) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += batch)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch));
  return out;
}

inline std::vector<int> iota_n(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace detail

/// Replaces the statistics of every BN node read by `u` with exact
/// population estimates from train-mode passes over `data` (no augmentation).
inline void collect_bn_stats(const UnrolledGraph& u, ParamStore<float>& store, const Dataset& data,
                             int batch_size) {
  if (data.size() == 0) throw ConfigError("cannot collect batch-norm statistics from an empty set");
  for (const auto& key : required_bn_stats(u)) store.set_bn_stats(key.node, key.t, {});
  for (const auto& idx : detail::batches_of(detail::iota_n(data.size()), batch_size)) {
    if (static_cast<int>(idx.size()) < batch_size && idx.size() != static_cast<std::size_t>(data.size()))
      continue;  // a short trailing batch would be over-weighted in the pooled estimate
    const auto b = data.gather(idx);
    const auto fr = forward(u, store, b.images, Mode::Train);
    record_bn_stats(u, fr.cache, store, 0.0, /*exact=*/true);
  }
}

/// Top-1 test error of `store` unrolled to readout time `t_test`. Reads the
/// stored running statistics; when some are missing and `stats_source` is
/// given, a private copy of the store first collects them from that set.
/// Never modifies `store`.
inline double evaluate(const ParamStore<float>& store, const ModelSpec& m, int t_test,
                       const Dataset& test, const Dataset* stats_source = nullptr,
                       int batch_size = 200) {
  const ModelSpec mt = with_readout(m, t_test);
  const UnrolledGraph u = unroll(mt);
  std::vector<BnKey> missing;
  for (const auto& k : required_bn_stats(u))
    if (!store.has_bn_stats(k.node, k.t)) missing.push_back(k);
  for (const auto& p : u.params(true))
    if (!store.has(p.group)) throw RuntimeError("parameter group '" + p.group + "' is not trained");

  const ParamStore<float>* use = &store;
  ParamStore<float> local;
  if (!missing.empty()) {
    if (!stats_source)
      throw RuntimeError("missing batch-norm statistics for '" + missing.front().node + "' at t=" +
                         std::to_string(missing.front().t) + " (readout time " +
                         std::to_string(t_test) + ")");
    local = store;
    collect_bn_stats(u, local, *stats_source, 64);
    use = &local;
  }
  if (test.size() == 0) throw ConfigError("evaluate: empty test set");
  double wrong = 0;
  for (const auto& idx : detail::batches_of(detail::iota_n(test.size()), batch_size)) {
    const auto b = test.gather(idx);
    const auto fr = forward(u, *use, b.images, Mode::Eval);
    wrong += top1_error(fr.logits.back(), b.labels) * static_cast<double>(idx.size());
  }
  return wrong / test.size();
}

/// Replaces each (node, t) statistic by the pooled statistic of that node
/// over all t: mean of means, and mean second moment minus squared mean.
/// Used to emulate batch normalization shared across time.
inline void pool_bn_stats_over_time(ParamStore<float>& store) {
  std::map<std::string, std::vector<int>> times;
  for (const auto& [k, _] : store.all_bn_stats()) times[k.node].push_back(k.t);
  for (const auto& [node, ts] : times) {
    if (ts.size() < 2) continue;
    const std::size_t c = store.bn_stats(node, ts.front()).mean.size();
    std::vector<double> m(c, 0.0), m2(c, 0.0);
    for (int t : ts) {
      const auto& r = store.bn_stats(node, t);
      for (std::size_t i = 0; i < c; ++i) {
        m[i] += r.mean[i];
        m2[i] += r.variance[i] + static_cast<double>(r.mean[i]) * r.mean[i];
      }
    }
    RunningBn<float> pooled;
    pooled.count = 1;
    for (std::size_t i = 0; i < c; ++i) {
      const double mean = m[i] / ts.size();
      pooled.mean.push_back(static_cast<float>(mean));
      pooled.variance.push_back(static_cast<float>(std::max(0.0, m2[i] / ts.size() - mean * mean)));
    }
    for (int t : ts) store.set_bn_stats(node, t, pooled);
  }
}

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS; every training step reallocates the same large tensors. Process-wide.
inline void retain_heap_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// Trains `m` (readouts from m.io) on data.train, reporting error on data.test.
inline TrainResult train(const ModelSpec& m, const TrainConfig& cfg, const CifarData& data,
                         const TrainHooks& hooks = {}) {
  if (auto d = validate(cfg); !d.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : d) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  const Dataset train_set = cfg.train_subset ? data.train.head(*cfg.train_subset) : data.train;
  const Dataset test_set = cfg.test_subset ? data.test.head(*cfg.test_subset) : data.test;
  if (train_set.size() == 0) throw ConfigError("training set is empty");

  const UnrolledGraph u = unroll(m);
  TrainResult res{ParamStore<float>::init(u, cfg.seed), {}};
  const auto required = live_groups(u);
  std::mt19937_64 rng(cfg.seed);
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr_for_epoch(epoch);
    std::vector<int> order = detail::iota_n(train_set.size());
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int nb = 0;
    for (const auto& idx : detail::batches_of(std::move(order), cfg.batch_size)) {
      if (hooks.on_batch) hooks.on_batch(epoch, idx);
      LabeledBatch b = train_set.gather(idx);
      if (cfg.augment) b = augment(b, rng);
      auto fr = forward(u, res.store, b.images, Mode::Train);
      std::vector<Tensor<float>> lg;
      const float loss = readout_loss(fr.logits, b.labels, lg);
      if (!std::isfinite(loss))
        throw RuntimeError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(nb + 1) + ": loss is not finite");
      const auto grads = backward(u, res.store, fr.cache, lg);
      res.store.sgd_momentum_step(grads, lr, cfg.momentum, cfg.weight_decay, required);
      record_bn_stats(u, fr.cache, res.store, cfg.bn_decay);
      loss_sum += loss;
      ++nb;
    }
    if (cfg.recompute_bn_stats && epoch == cfg.epochs) collect_bn_stats(u, res.store, train_set, cfg.batch_size);
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = loss_sum / nb;
    em.test_error = (hooks.eval_each_epoch || epoch == cfg.epochs) && test_set.size() > 0
                        ? evaluate(res.store, m, m.io.max_readout(), test_set)
                        : std::nan("");
    em.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(em);
    if (hooks.log)
      *hooks.log << "epoch " << epoch << " lr " << lr << " train_loss " << em.train_loss
                 << " test_error " << em.test_error << " wall " << em.wall_seconds << "s\n"
                 << std::flush;
  }
  if (!hooks.checkpoint_path.empty()) res.store.save(hooks.checkpoint_path, config_hash(m));
  return res;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& h) {
  os << "epoch,lr,train_loss,test_error,wall_seconds\n";
  for (const auto& e : h)
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.test_error << ','
       << e.wall_seconds << '\n';
}

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& h) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write metrics '" + path + "'");
  write_metrics_csv(os, h);
}

}  // namespace rrnet
