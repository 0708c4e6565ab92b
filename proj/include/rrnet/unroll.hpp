#pragma once

// Compiles a cyclic multi-state graph into an acyclic, time-stamped DAG.
//
// Simulation starts at t = 0 with only the first state populated by the
// pre-net. A transition (i -> j) active at t reads state i at t-1 and fires
// only if that instance is populated. Contributions into the same state
// instance are summed; there is no implicit carry-over between time steps.

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/graph.hpp"
#include "rrnet/presets.hpp"

namespace rrnet {

struct UnreachableReadout : ConfigError {
  using ConfigError::ConfigError;
};

enum class OpKind { Input, Conv, Deconv, BatchNorm, Relu, MaxPool, Add, GlobalAvgPool, FullyConnected };

inline std::string to_string(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Conv: return "conv";
    case OpKind::Deconv: return "deconv";
    case OpKind::BatchNorm: return "bn";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool: return "maxpool";
    case OpKind::Add: return "add";
    case OpKind::GlobalAvgPool: return "gap";
    case OpKind::FullyConnected: return "fc";
  }
  return "?";
}

/// A canonical parameter tensor referenced by a node.
struct ParamRef {
  enum class Init { He, Zeros, Ones } init = Init::He;
  std::string group;
  Shape shape;
  int fan_in = 1;

  friend bool operator==(const ParamRef&, const ParamRef&) = default;
};

struct Node {
  int id = 0;
  OpKind op = OpKind::Input;
  int t = 0;
  std::vector<int> inputs;
  Shape out;  // per-sample shape; n is always 1
  std::string label;

  std::optional<ParamRef> weight;  // conv, deconv, fc
  std::optional<ParamRef> bias;    // fc
  int stride = 1;
  int padding = 0;

  std::string bn_key;  // bn: statistics are keyed by (bn_key, t)
  std::optional<ParamRef> bn_scale;
  std::optional<ParamRef> bn_shift;

  int readout = -1;  // fc nodes producing logits: the readout time
  bool live = true;  // contributes to some readout

  friend bool operator==(const Node&, const Node&) = default;
};

struct UnrolledGraph {
  std::vector<Node> nodes;  // topological order
  std::vector<int> logits;  // one fc node per readout time, ascending
  std::vector<int> readout_times;
  int horizon = 0;
  std::vector<std::string> state_names;
  std::vector<std::vector<int>> state_node;  // [state][t] -> node id, -1 when empty
  std::size_t core_size = 0;                 // nodes before the post-net

  [[nodiscard]] bool populated(const std::string& state, int t) const {
    for (std::size_t i = 0; i < state_names.size(); ++i)
      if (state_names[i] == state)
        return t >= 0 && t <= horizon && state_node[i][t] >= 0;
    return false;
  }

  /// Every parameter reference, deduplicated by group, in first-use order.
  [[nodiscard]] std::vector<ParamRef> params(bool live_only) const {
    std::vector<ParamRef> out;
    std::set<std::string> seen;
    for (const auto& n : nodes) {
      if (live_only && !n.live) continue;
      for (const auto* p : {&n.weight, &n.bias, &n.bn_scale, &n.bn_shift})
        if (*p && seen.insert((*p)->group).second) out.push_back(**p);
    }
    return out;
  }
};

namespace detail {

class GraphBuilder {
 public:
  explicit GraphBuilder(UnrolledGraph& u) : u_(u) {}

  int add(Node n) {
    n.id = static_cast<int>(u_.nodes.size());
    u_.nodes.push_back(std::move(n));
    return u_.nodes.back().id;
  }

  [[nodiscard]] const Shape& shape(int id) const { return u_.nodes[id].out; }

  int conv(int in, int t, int out_c, int stride, const std::string& label, ParamRef w,
           bool deconv = false) {
    const Shape& s = shape(in);
    Node n;
    n.op = deconv ? OpKind::Deconv : OpKind::Conv;
    n.t = t;
    n.inputs = {in};
    n.label = label;
    n.stride = stride;
    n.padding = 1;
    // 3x3 kernels, padding 1
    const int h = deconv ? s.h * stride : (s.h - 1) / stride + 1;
    const int wd = deconv ? s.w * stride : (s.w - 1) / stride + 1;
    n.out = Shape{1, out_c, h, wd};
    n.weight = std::move(w);
    return add(std::move(n));
  }

  int simple(OpKind op, int in, int t, const std::string& label) {
    Node n;
    n.op = op;
    n.t = t;
    n.inputs = {in};
    n.label = label;
    n.out = shape(in);
    if (op == OpKind::MaxPool) {
      n.out.h /= 2;
      n.out.w /= 2;
    }
    if (op == OpKind::GlobalAvgPool) n.out.h = n.out.w = 1;
    return add(std::move(n));
  }

  int bn(int in, int t, const std::string& key) {
    Node n;
    n.op = OpKind::BatchNorm;
    n.t = t;
    n.inputs = {in};
    n.label = key;
    n.bn_key = key;
    n.out = shape(in);
    return add(std::move(n));
  }

  int sum(std::vector<int> ins, int t, const std::string& label) {
    if (ins.size() == 1) return ins.front();
    Node n;
    n.op = OpKind::Add;
    n.t = t;
    n.out = shape(ins.front());
    n.inputs = std::move(ins);
    n.label = label;
    return add(std::move(n));
  }

 private:
  UnrolledGraph& u_;
};

inline ParamRef conv_weight(std::string group, int in_c, int out_c) {
  return ParamRef{ParamRef::Init::He, std::move(group), Shape{out_c, in_c, 3, 3}, in_c * 9};
}

// Deconv weights are stored as the conv they are the adjoint of.
inline ParamRef deconv_weight(std::string group, int in_c, int out_c, int stride) {
  return ParamRef{ParamRef::Init::He, std::move(group), Shape{in_c, out_c, 3, 3},
                  std::max(1, in_c * 9 / (stride * stride))};
}

}  // namespace detail

/// Builds the time-unrolled DAG up to `horizon`. Throws ConfigError when
/// the description does not validate, UnreachableReadout when the readout
/// state is empty at a requested readout time.
inline UnrolledGraph unroll(const GraphSpec& g, const SharingSpec& s, const IOSchedule& io,
                            int horizon) {
  if (auto diag = validate(g, s, io); !diag.empty()) {
    std::string msg = "invalid model:";
    for (const auto& d : diag) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  if (horizon < io.max_readout())
    throw ConfigError("unroll horizon " + std::to_string(horizon) +
                      " is before the last readout time " + std::to_string(io.max_readout()));

  UnrolledGraph u;
  u.horizon = horizon;
  u.readout_times.assign(io.readout_times.begin(), io.readout_times.end());
  const std::size_t ns = g.states.size();
  for (const auto& st : g.states) u.state_names.push_back(st.name);
  u.state_node.assign(ns, std::vector<int>(horizon + 1, -1));
  detail::GraphBuilder b(u);

  Node input;
  input.op = OpKind::Input;
  input.label = "input";
  input.out = Shape{1, g.pre_net.input_channels, g.pre_net.input_height, g.pre_net.input_width};
  int cur = b.add(input);

  const int c0 = g.states[0].channels;
  int prenet_out = -1;
  auto build_prenet = [&](int t) {
    if (prenet_out >= 0) return prenet_out;
    const int layers = g.pre_net.kind == PreNetKind::Deep ? 3 : 1;
    int in_c = g.pre_net.input_channels;
    for (int l = 0; l < layers; ++l) {
      if (l > 0) {
        cur = b.bn(cur, t, "pre.bn" + std::to_string(l - 1));
        cur = b.simple(OpKind::Relu, cur, t, "pre.relu" + std::to_string(l - 1));
      }
      const std::string name = "pre.conv" + std::to_string(l);
      cur = b.conv(cur, t, c0, 1, name, detail::conv_weight(name, in_c, c0));
      in_c = c0;
    }
    prenet_out = cur;
    return prenet_out;
  };

  // canonical summation order: (from state, pipeline)
  std::vector<std::size_t> order(g.transitions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b2) {
    const auto& x = g.transitions[a];
    const auto& y = g.transitions[b2];
    const int fx = g.state_index(x.from), fy = g.state_index(y.from);
    if (fx != fy) return fx < fy;
    return static_cast<int>(x.pipeline) < static_cast<int>(y.pipeline);
  });

  for (int t = 0; t <= horizon; ++t) {
    for (std::size_t j = 0; j < ns; ++j) {
      const auto& to = g.states[j];
      std::vector<int> contributions;
      if (j == 0 && io.input_times.contains(t)) contributions.push_back(build_prenet(t));
      if (t > 0) {
        for (std::size_t ti : order) {
          const auto& tr = g.transitions[ti];
          if (tr.to != to.name || !tr.window.contains(t)) continue;
          const int i = g.state_index(tr.from);
          const int src = u.state_node[i][t - 1];
          if (src < 0) continue;
          const auto plan = *plan_pipeline(tr.pipeline, g.states[i], to);
          const std::string base = tr.from + ">" + tr.to;
          int x = src;
          int slot = 0, bn_index = 0;
          for (const auto& layer : plan) {
            if (layer.kind == LayerPlan::Kind::MaxPool) {
              x = b.simple(OpKind::MaxPool, x, t, base + ".pool");
              continue;
            }
            if (layer.bn_relu_before) {
              x = b.bn(x, t, base + ".bn" + std::to_string(bn_index));
              x = b.simple(OpKind::Relu, x, t, base + ".relu" + std::to_string(bn_index));
              ++bn_index;
            }
            const std::string group = s.group_id(tr.from, tr.to, t, slot);
            const bool de = layer.kind == LayerPlan::Kind::Deconv;
            const std::string label = base + (de ? ".deconv" : ".conv") + std::to_string(slot);
            x = b.conv(x, t, layer.out_channels, layer.stride, label,
                       de ? detail::deconv_weight(group, layer.in_channels, layer.out_channels,
                                                  layer.stride)
                          : detail::conv_weight(group, layer.in_channels, layer.out_channels),
                       de);
            ++slot;
          }
          if (tr.identity_shortcut) x = b.sum({x, src}, t, base + ".shortcut");
          contributions.push_back(x);
        }
      }
      if (!contributions.empty())
        u.state_node[j][t] = b.sum(contributions, t, to.name + "@" + std::to_string(t));
    }
  }
  u.core_size = u.nodes.size();

  const int r_idx = g.state_index(g.readout_state);
  const int r_c = g.states[r_idx].channels;
  const int classes = g.post_net.num_classes;
  for (int r : u.readout_times) {
    const int src = u.state_node[r_idx][r];
    if (src < 0)
      throw UnreachableReadout("readout state '" + g.readout_state + "' is not populated at t=" +
                               std::to_string(r));
    int x = b.bn(src, r, "post.bn");
    u.nodes[x].bn_scale = ParamRef{ParamRef::Init::Ones, "post.bn.scale", Shape{1, r_c, 1, 1}, 1};
    u.nodes[x].bn_shift = ParamRef{ParamRef::Init::Zeros, "post.bn.shift", Shape{1, r_c, 1, 1}, 1};
    x = b.simple(OpKind::Relu, x, r, "post.relu");
    x = b.simple(OpKind::GlobalAvgPool, x, r, "post.gap");
    Node fc;
    fc.op = OpKind::FullyConnected;
    fc.t = r;
    fc.inputs = {x};
    fc.label = "post.fc";
    fc.out = Shape{1, classes, 1, 1};
    fc.weight = ParamRef{ParamRef::Init::He, "post.fc.weight", Shape{classes, r_c, 1, 1}, r_c};
    fc.bias = ParamRef{ParamRef::Init::Zeros, "post.fc.bias", Shape{1, classes, 1, 1}, 1};
    fc.readout = r;
    u.logits.push_back(b.add(std::move(fc)));
  }

  // liveness: reverse reachability from the logits
  for (auto& n : u.nodes) n.live = false;
  for (int id : u.logits) u.nodes[id].live = true;
  for (int id = static_cast<int>(u.nodes.size()) - 1; id >= 0; --id) {
    if (!u.nodes[id].live) continue;
    for (int in : u.nodes[id].inputs) u.nodes[in].live = true;
  }
  return u;
}

inline UnrolledGraph unroll(const ModelSpec& m) {
  return unroll(m.graph, m.sharing, m.io, m.io.max_readout());
}

/// Number of canonical parameters feeding at least one readout. Each tied
/// group counts once.
inline std::size_t param_count(const UnrolledGraph& u) {
  std::size_t total = 0;
  for (const auto& p : u.params(true)) total += p.shape.numel();
  return total;
}

/// One line per node: id, op, t, tied group, input ids, label. Dead nodes
/// (not contributing to a readout) carry a trailing " dead".
inline void dump(const UnrolledGraph& u, std::ostream& os) {
  os << "# id op t group inputs label\n";
  for (const auto& n : u.nodes) {
    os << n.id << ' ' << to_string(n.op) << ' ' << n.t << ' ';
    os << (n.weight ? n.weight->group : std::string("-")) << ' ';
    if (n.inputs.empty()) os << '-';
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? "," : "") << n.inputs[i];
    os << ' ' << n.label << (n.live ? "" : " dead") << '\n';
  }
}

inline std::string dump(const UnrolledGraph& u) {
  std::ostringstream os;
  dump(u, os);
  return os.str();
}

/// Biological latency estimate for readout time t: 20 to 50 ms per step.
inline std::pair<double, double> wall_clock_estimate(int t) {
  if (t < 0) throw ConfigError("wall_clock_estimate: t must be >= 0");
  return {20.0 * t, 50.0 * t};
}

}  // namespace rrnet
