#pragma once

// Forward and reverse-mode passes over an UnrolledGraph. Only live nodes
// (those contributing to a readout) are evaluated. Parameter gradients are
// accumulated per tied group, which sums the per-instance gradients.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rrnet/ops.hpp"
#include "rrnet/param_store.hpp"
#include "rrnet/unroll.hpp"

namespace rrnet {

enum class Mode { Train, Eval };

template <typename T>
struct ForwardCache {
  Mode mode = Mode::Train;
  std::vector<Tensor<T>> values;                 // per node; empty for dead nodes
  std::vector<std::optional<BnStats<T>>> stats;  // per bn node: statistics used
};

template <typename T>
struct ForwardResult {
  std::vector<Tensor<T>> logits;  // one per readout time, ascending
  ForwardCache<T> cache;
};

namespace detail {

template <typename T>
BnStats<T> bn_params(const Node& n, const ParamStore<T>& store, BnStats<T> st) {
  if (n.bn_scale) st.scale = store.weight(n.bn_scale->group).vec();
  if (n.bn_shift) st.shift = store.weight(n.bn_shift->group).vec();
  return st;
}

template <typename T>
ConvParams<T> conv_params(const Node& n, const ParamStore<T>& store) {
  ConvParams<T> p{store.weight(n.weight->group), std::nullopt, n.stride, n.padding};
  return p;
}

}  // namespace detail

/// Runs the DAG on `batch`. In Train mode every BN uses the current batch
/// statistics (recorded in the cache); in Eval mode BN reads the running
/// statistics stored for its (node, t) and throws if they are missing.
template <typename T>
ForwardResult<T> forward(const UnrolledGraph& u, const ParamStore<T>& store,
                         const Tensor<T>& batch, Mode mode) {
  ForwardResult<T> r;
  auto& c = r.cache;
  c.mode = mode;
  c.values.resize(u.nodes.size());
  c.stats.resize(u.nodes.size());
  const int batch_n = batch.shape().n;
  for (const Node& n : u.nodes) {
    if (!n.live) continue;
    auto in = [&](std::size_t k) -> const Tensor<T>& { return c.values[n.inputs[k]]; };
    Tensor<T>& out = c.values[n.id];
    switch (n.op) {
      case OpKind::Input: {
        const Shape want{batch_n, n.out.c, n.out.h, n.out.w};
        if (batch.shape() != want)
          throw ConfigError("input batch has shape " + batch.shape().str() + ", expected " +
                            want.str());
        out = batch;
        break;
      }
      case OpKind::Conv: out = conv2d(in(0), detail::conv_params(n, store)); break;
      case OpKind::Deconv: out = deconv2d(in(0), detail::conv_params(n, store)); break;
      case OpKind::BatchNorm: {
        BnStats<T> st;
        if (mode == Mode::Train) {
          st = compute_bn_stats(in(0));
        } else {
          if (!store.has_bn_stats(n.bn_key, n.t))
            throw RuntimeError("missing batch-norm statistics for node " + std::to_string(n.id) +
                               " ('" + n.bn_key + "') at t=" + std::to_string(n.t));
          const auto& run = store.bn_stats(n.bn_key, n.t);
          st.mean = run.mean;
          st.variance = run.variance;
        }
        st = detail::bn_params(n, store, std::move(st));
        out = batchnorm(in(0), st);
        c.stats[n.id] = std::move(st);
        break;
      }
      case OpKind::Relu: out = relu(in(0)); break;
      case OpKind::MaxPool: out = maxpool2x2(in(0)); break;
      case OpKind::Add: {
        out = in(0);
        for (std::size_t k = 1; k < n.inputs.size(); ++k) add_inplace(out, in(k));
        break;
      }
      case OpKind::GlobalAvgPool: out = global_avg_pool(in(0)); break;
      case OpKind::FullyConnected:
        out = fully_connected(in(0), store.weight(n.weight->group),
                              store.weight(n.bias->group).vec());
        break;
    }
  }
  for (int id : u.logits) r.logits.push_back(c.values[id]);
  return r;
}

/// Reverse pass. `logit_grads` holds d loss / d logits for each readout.
/// Returns gradients keyed by tied group; a group's gradient is the sum over
/// all of its live instances.
template <typename T>
Gradients<T> backward(const UnrolledGraph& u, const ParamStore<T>& store,
                      const ForwardCache<T>& cache, const std::vector<Tensor<T>>& logit_grads) {
  if (logit_grads.size() != u.logits.size())
    throw ConfigError("backward: " + std::to_string(logit_grads.size()) +
                      " logit gradients for " + std::to_string(u.logits.size()) + " readouts");
  std::vector<std::optional<Tensor<T>>> grads(u.nodes.size());
  auto accumulate = [&](int id, Tensor<T> g) {
    if (grads[id]) {
      add_inplace(*grads[id], g);
    } else {
      grads[id] = std::move(g);
    }
  };
  Gradients<T> pg;
  auto accumulate_param = [&](const std::string& group, const Tensor<T>& g) {
    auto it = pg.find(group);
    if (it == pg.end()) {
      pg.emplace(group, g);
    } else {
      add_inplace(it->second, g);
    }
  };
  auto as_param = [](const std::vector<T>& v, const Shape& s) { return Tensor<T>(s, v); };

  for (std::size_t k = 0; k < u.logits.size(); ++k) accumulate(u.logits[k], logit_grads[k]);

  for (int id = static_cast<int>(u.nodes.size()) - 1; id >= 0; --id) {
    const Node& n = u.nodes[id];
    if (!n.live || !grads[id]) continue;
    const Tensor<T> g = std::move(*grads[id]);
    grads[id].reset();
    auto in = [&](std::size_t k) -> const Tensor<T>& { return cache.values[n.inputs[k]]; };
    switch (n.op) {
      case OpKind::Input: break;
      case OpKind::Conv: {
        auto cg = conv2d_backward(in(0), detail::conv_params(n, store), g);
        accumulate_param(n.weight->group, cg.weights);
        accumulate(n.inputs[0], std::move(cg.input));
        break;
      }
      case OpKind::Deconv: {
        auto cg = deconv2d_backward(in(0), detail::conv_params(n, store), g);
        accumulate_param(n.weight->group, cg.weights);
        accumulate(n.inputs[0], std::move(cg.input));
        break;
      }
      case OpKind::BatchNorm: {
        const BnStats<T>& st = *cache.stats[id];
        auto bg = cache.mode == Mode::Train ? batchnorm_train_backward(in(0), st, g)
                                            : batchnorm_backward(in(0), st, g);
        if (n.bn_scale) accumulate_param(n.bn_scale->group, as_param(bg.scale, n.bn_scale->shape));
        if (n.bn_shift) accumulate_param(n.bn_shift->group, as_param(bg.shift, n.bn_shift->shape));
        accumulate(n.inputs[0], std::move(bg.input));
        break;
      }
      case OpKind::Relu: accumulate(n.inputs[0], relu_backward(in(0), g)); break;
      case OpKind::MaxPool: accumulate(n.inputs[0], maxpool2x2_backward(in(0), g)); break;
      case OpKind::Add:
        for (int src : n.inputs) accumulate(src, g);
        break;
      case OpKind::GlobalAvgPool:
        accumulate(n.inputs[0], global_avg_pool_backward(in(0).shape(), g));
        break;
      case OpKind::FullyConnected: {
        auto fg = fully_connected_backward(in(0), store.weight(n.weight->group), g);
        accumulate_param(n.weight->group, fg.weights);
        accumulate_param(n.bias->group, as_param(fg.bias, n.bias->shape));
        accumulate(n.inputs[0], std::move(fg.input));
        break;
      }
    }
  }
  return pg;
}

/// Groups that must receive a gradient: those of live parametric nodes.
inline std::set<std::string> live_groups(const UnrolledGraph& u) {
  std::set<std::string> out;
  for (const auto& p : u.params(true)) out.insert(p.group);
  return out;
}

/// Folds the batch statistics of a train-mode pass into the running estimates.
template <typename T>
void record_bn_stats(const UnrolledGraph& u, const ForwardCache<T>& cache, ParamStore<T>& store,
                     double decay, bool exact = false) {
  for (const Node& n : u.nodes) {
    if (!n.live || n.op != OpKind::BatchNorm || !cache.stats[n.id]) continue;
    if (exact) {
      store.accumulate_bn_stats(n.bn_key, n.t, *cache.stats[n.id]);
    } else {
      store.update_bn_running_stats(n.bn_key, n.t, *cache.stats[n.id], decay);
    }
  }
}

/// (node key, t) pairs that an eval-mode pass over `u` would read.
inline std::vector<BnKey> required_bn_stats(const UnrolledGraph& u) {
  std::vector<BnKey> keys;
  for (const Node& n : u.nodes)
    if (n.live && n.op == OpKind::BatchNorm) keys.push_back({n.bn_key, n.t});
  return keys;
}

/// Loss summed over readouts, with matching logit gradients.
template <typename T>
T readout_loss(const std::vector<Tensor<T>>& logits, const std::vector<int>& labels,
               std::vector<Tensor<T>>& grads_out) {
  grads_out.clear();
  T total{0};
  for (const auto& l : logits) {
    auto r = softmax_cross_entropy(l, labels);
    total += r.loss;
    grads_out.push_back(std::move(r.grad));
  }
  return total;
}

}  // namespace rrnet
