#pragma once

// Reference computations that do not go through the unrolled DAG.

#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "rrnet/executor.hpp"
#include "rrnet/presets.hpp"
#include "rrnet/unroll.hpp"

namespace rrnet::oracle {

// Parameter count by walking state instances: simulate population forward,
// mark contributing instances backward from the readout, then add up layer
// shapes from k*k*cin*cout once per tied key.
inline std::size_t param_count(const ModelSpec& m) {
  const auto& g = m.graph;
  const int T = m.io.max_readout();
  const int ns = static_cast<int>(g.states.size());
  auto idx = [&](const std::string& n) { return g.state_index(n); };

  std::vector<std::vector<bool>> pop(ns, std::vector<bool>(T + 1, false));
  for (int t = 0; t <= T; ++t)
    for (int j = 0; j < ns; ++j) {
      bool p = j == 0 && m.io.input_times.contains(t);
      if (t > 0)
        for (const auto& tr : g.transitions)
          if (idx(tr.to) == j && tr.window.contains(t) && pop[idx(tr.from)][t - 1]) p = true;
      pop[j][t] = p;
    }

  std::vector<std::vector<bool>> need(ns, std::vector<bool>(T + 1, false));
  for (int r : m.io.readout_times) need[idx(g.readout_state)][r] = true;
  bool prenet = false;
  std::vector<std::tuple<int, int, int>> fired;  // (from, to, t) that contribute
  for (int t = T; t >= 0; --t)
    for (int j = 0; j < ns; ++j) {
      if (!need[j][t]) continue;
      if (j == 0 && m.io.input_times.contains(t)) prenet = true;
      if (t == 0) continue;
      for (const auto& tr : g.transitions) {
        const int i = idx(tr.from);
        if (idx(tr.to) != j || !tr.window.contains(t) || !pop[i][t - 1]) continue;
        fired.emplace_back(i, j, t);
        need[i][t - 1] = true;
      }
    }

  auto layer_sizes = [&](const TransitionSpec& tr) {
    const int ci = g.states[idx(tr.from)].channels, co = g.states[idx(tr.to)].channels;
    const int mid = (ci + co) / 2;
    switch (tr.pipeline) {
      case Pipeline::Conv:
      case Pipeline::Deconv: return std::vector<std::size_t>{9u * ci * co};
      case Pipeline::BRCx2:
      case Pipeline::BRDx2: return std::vector<std::size_t>{9u * ci * mid, 9u * mid * co};
      case Pipeline::BRCx3:
      case Pipeline::BRDx3:
        return std::vector<std::size_t>{9u * ci * mid, 9u * mid * mid, 9u * mid * co};
      case Pipeline::MaxPool2x2: return std::vector<std::size_t>{};
    }
    return std::vector<std::size_t>{};
  };

  std::map<std::string, std::size_t> groups;
  for (const auto& [i, j, t] : fired) {
    const TransitionSpec* tr = nullptr;
    for (const auto& c : g.transitions)
      if (idx(c.from) == i && idx(c.to) == j && c.window.contains(t)) tr = &c;
    const auto sizes = layer_sizes(*tr);
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      std::string key;
      switch (m.sharing.mode) {
        case SharingMode::TimeShared:
          key = std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(l);
          break;
        case SharingMode::TimeUnshared:
          key = std::to_string(i) + "," + std::to_string(j) + "," + std::to_string(l) + "@" +
                std::to_string(t);
          break;
        case SharingMode::AllShared: key = "all"; break;
        case SharingMode::Explicit: throw ConfigError("oracle does not model explicit groups");
      }
      groups[key] = sizes[l];
    }
  }
  std::size_t total = 0;
  for (const auto& [_, n] : groups) total += n;
  const int c0 = g.states[0].channels;
  if (prenet) {
    total += 9u * g.pre_net.input_channels * c0;
    if (g.pre_net.kind == PreNetKind::Deep) total += 2u * 9u * c0 * c0;
  }
  const int cr = g.states[idx(g.readout_state)].channels;
  const int k = g.post_net.num_classes;
  total += 2u * cr + static_cast<std::size_t>(k) * cr + k;
  return total;
}

// h_t = K(h_{t-1}) + h_{t-1} with K = BN-ReLU-Conv-BN-ReLU-Conv, starting from
// the pre-net conv of x, followed by the post-net; BN uses batch statistics.
template <typename T>
Tensor<T> resnet_iteration(const Tensor<T>& x, const Tensor<T>& pre_w, const Tensor<T>& k0,
                           const Tensor<T>& k1, const std::vector<T>& post_scale,
                           const std::vector<T>& post_shift, const Tensor<T>& fc_w,
                           const std::vector<T>& fc_b, int steps) {
  auto conv = [](const Tensor<T>& in, const Tensor<T>& w) {
    return conv2d(in, ConvParams<T>{w, std::nullopt, 1, 1});
  };
  auto bn_relu = [](const Tensor<T>& in) { return relu(batchnorm(in, compute_bn_stats(in))); };
  Tensor<T> h = conv(x, pre_w);
  for (int t = 0; t < steps; ++t) {
    const Tensor<T> k = conv(bn_relu(conv(bn_relu(h), k0)), k1);
    h = add(k, h);
  }
  auto st = compute_bn_stats(h);
  st.scale = post_scale;
  st.shift = post_shift;
  return fully_connected(global_avg_pool(relu(batchnorm(h, st))), fc_w, fc_b);
}

// Two 4x4x2 states wired like fullrec_2state, fed by a 3-channel 4x4 input.
inline ModelSpec toy_two_state(int readout) {
  ModelSpec m;
  m.graph.states = {{"a", 4, 4, 2}, {"b", 4, 4, 2}};
  m.graph.transitions = {{"a", "a", Pipeline::BRCx2, true, TimeSet::every()},
                         {"a", "b", Pipeline::BRCx2, false, TimeSet::every()},
                         {"b", "a", Pipeline::BRCx2, false, TimeSet::every()},
                         {"b", "b", Pipeline::BRCx2, true, TimeSet::every()}};
  m.graph.pre_net = {PreNetKind::Simple, 3, 4, 4};
  m.graph.post_net.num_classes = 3;
  m.graph.readout_state = "b";
  m.io.readout_times = {readout};
  return m;
}

// Runs `shared` (time-shared weights) and an untied clone whose per-t
// weights equal the shared ones on the same batch; returns the largest
// difference between each shared group's gradient and the sum of its untied
// instances' gradients.
inline double tied_gradient_gap(const ModelSpec& shared, std::uint64_t seed, int batch) {
  ModelSpec untied = shared;
  untied.sharing.mode = SharingMode::TimeUnshared;
  const auto us = unroll(shared);
  const auto uu = unroll(untied);
  auto ss = ParamStore<double>::init(us, seed);
  auto su = ParamStore<double>::init(uu, seed + 1);
  auto shared_name = [](const std::string& g) {
    const auto at = g.find('@');
    return at == std::string::npos ? g : g.substr(0, at) + g.substr(g.find('#'));
  };
  for (const auto& [name, w] : su.weights()) su.weight(name) = ss.weight(shared_name(name));

  const auto& in = shared.graph.pre_net;
  Tensor<double> x(Shape{batch, in.input_channels, in.input_height, in.input_width});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = nd(rng);
  std::vector<int> labels;
  for (int i = 0; i < batch; ++i) labels.push_back(i % shared.graph.post_net.num_classes);

  auto grads_of = [&](const UnrolledGraph& u, const ParamStore<double>& st) {
    auto fr = forward(u, st, x, Mode::Train);
    std::vector<Tensor<double>> lg;
    readout_loss(fr.logits, labels, lg);
    return backward(u, st, fr.cache, lg);
  };
  const auto gs = grads_of(us, ss);
  const auto gu = grads_of(uu, su);
  Gradients<double> summed;
  for (const auto& [name, g] : gu) {
    auto it = summed.find(shared_name(name));
    if (it == summed.end()) {
      summed.emplace(shared_name(name), g);
    } else {
      add_inplace(it->second, g);
    }
  }
  if (summed.size() != gs.size()) return std::numeric_limits<double>::infinity();
  double gap = 0;
  for (const auto& [name, g] : gs) {
    auto it = summed.find(name);
    if (it == summed.end()) return std::numeric_limits<double>::infinity();
    gap = std::max(gap, max_abs_diff(g, it->second));
  }
  return gap;
}

}  // namespace rrnet::oracle
