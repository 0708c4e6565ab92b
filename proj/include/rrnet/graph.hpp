#pragma once

// Declarative description of a multi-state recurrent system: states,
// time-windowed transitions, weight-sharing sets and input/output schedules.

#include <algorithm>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/tensor.hpp"

namespace rrnet {

struct StateSpec {
  std::string name;
  int height = 1;
  int width = 1;
  int channels = 1;

  friend bool operator==(const StateSpec&, const StateSpec&) = default;
};

enum class Pipeline { Conv, BRCx2, BRCx3, BRDx2, BRDx3, Deconv, MaxPool2x2 };

inline const std::vector<std::pair<Pipeline, std::string>>& pipeline_names() {
  static const std::vector<std::pair<Pipeline, std::string>> names = {
      {Pipeline::Conv, "Conv"},   {Pipeline::BRCx2, "BRCx2"},   {Pipeline::BRCx3, "BRCx3"},
      {Pipeline::BRDx2, "BRDx2"}, {Pipeline::BRDx3, "BRDx3"},   {Pipeline::Deconv, "Deconv"},
      {Pipeline::MaxPool2x2, "MaxPool2x2"}};
  return names;
}

inline std::string to_string(Pipeline p) {
  for (const auto& [k, v] : pipeline_names())
    if (k == p) return v;
  return "?";
}

inline std::optional<Pipeline> parse_pipeline(const std::string& s) {
  for (const auto& [k, v] : pipeline_names())
    if (v == s) return k;
  return std::nullopt;
}

/// Number of weighted (conv or deconv) layers in a pipeline.
inline int weighted_layers(Pipeline p) {
  switch (p) {
    case Pipeline::Conv:
    case Pipeline::Deconv: return 1;
    case Pipeline::BRCx2:
    case Pipeline::BRDx2: return 2;
    case Pipeline::BRCx3:
    case Pipeline::BRDx3: return 3;
    case Pipeline::MaxPool2x2: return 0;
  }
  return 0;
}

inline bool is_upsampling(Pipeline p) {
  return p == Pipeline::Deconv || p == Pipeline::BRDx2 || p == Pipeline::BRDx3;
}

inline bool has_batchnorm(Pipeline p) {
  return p != Pipeline::Conv && p != Pipeline::Deconv && p != Pipeline::MaxPool2x2;
}

/// A set of time steps, or every time step.
struct TimeSet {
  bool all = false;
  std::set<int> times;

  static TimeSet every() { return TimeSet{true, {}}; }
  static TimeSet of(std::initializer_list<int> ts) { return TimeSet{false, ts}; }
  static TimeSet range(int first, int last) {
    TimeSet s;
    for (int t = first; t <= last; ++t) s.times.insert(t);
    return s;
  }

  [[nodiscard]] bool contains(int t) const { return all || times.count(t) > 0; }
  [[nodiscard]] bool empty() const { return !all && times.empty(); }

  friend bool operator==(const TimeSet&, const TimeSet&) = default;
};

struct TransitionSpec {
  std::string from;
  std::string to;
  Pipeline pipeline = Pipeline::BRCx2;
  bool identity_shortcut = false;
  TimeSet window = TimeSet::every();

  friend bool operator==(const TransitionSpec&, const TransitionSpec&) = default;
};

enum class PreNetKind { Simple, Deep };

struct PreNetSpec {
  PreNetKind kind = PreNetKind::Simple;
  int input_channels = 3;
  int input_height = 32;
  int input_width = 32;

  friend bool operator==(const PreNetSpec&, const PreNetSpec&) = default;
};

/// BN (with learnable scale/shift) -> ReLU -> global average pool -> FC.
struct PostNetSpec {
  int num_classes = 10;

  friend bool operator==(const PostNetSpec&, const PostNetSpec&) = default;
};

struct GraphSpec {
  std::vector<StateSpec> states;
  std::vector<TransitionSpec> transitions;
  PreNetSpec pre_net;
  PostNetSpec post_net;
  std::string readout_state;

  [[nodiscard]] int state_index(const std::string& name) const {
    for (std::size_t i = 0; i < states.size(); ++i)
      if (states[i].name == name) return static_cast<int>(i);
    return -1;
  }
  [[nodiscard]] const StateSpec& state(const std::string& name) const {
    const int i = state_index(name);
    if (i < 0) throw ConfigError("unknown state '" + name + "'");
    return states[i];
  }

  friend bool operator==(const GraphSpec&, const GraphSpec&) = default;
};

/// (from, to, t) identifies one transition-weight instance; t = kAnyTime
/// inside an explicit group stands for every active t of that transition.
struct WeightKey {
  static constexpr int kAnyTime = -1;
  std::string from;
  std::string to;
  int t = kAnyTime;

  friend auto operator<=>(const WeightKey&, const WeightKey&) = default;
  friend bool operator==(const WeightKey&, const WeightKey&) = default;
};

enum class SharingMode { TimeShared, TimeUnshared, AllShared, Explicit };

inline std::string to_string(SharingMode m) {
  switch (m) {
    case SharingMode::TimeShared: return "time_shared";
    case SharingMode::TimeUnshared: return "time_unshared";
    case SharingMode::AllShared: return "all_shared";
    case SharingMode::Explicit: return "explicit";
  }
  return "?";
}

inline std::optional<SharingMode> parse_sharing_mode(const std::string& s) {
  for (auto m : {SharingMode::TimeShared, SharingMode::TimeUnshared, SharingMode::AllShared,
                 SharingMode::Explicit})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

/// Partition of transition-weight instances into tied groups. Instances not
/// covered by an explicit group are singletons. Tying is per weighted layer:
/// layer k of every member instance shares one tensor.
struct SharingSpec {
  SharingMode mode = SharingMode::TimeShared;
  std::vector<std::vector<WeightKey>> groups;  // Explicit mode only

  /// Tied-group id of weighted layer `slot` of transition from->to at t.
  [[nodiscard]] std::string group_id(const std::string& from, const std::string& to, int t,
                                     int slot) const {
    const std::string suffix = "#" + std::to_string(slot);
    switch (mode) {
      case SharingMode::TimeShared: return from + ">" + to + suffix;
      case SharingMode::AllShared: return "shared";
      case SharingMode::TimeUnshared: break;
      case SharingMode::Explicit:
        for (std::size_t g = 0; g < groups.size(); ++g)
          for (const auto& k : groups[g])
            if (k.from == from && k.to == to && (k.t == WeightKey::kAnyTime || k.t == t))
              return "g" + std::to_string(g) + suffix;
        break;
    }
    return from + ">" + to + "@" + std::to_string(t) + suffix;
  }

  friend bool operator==(const SharingSpec&, const SharingSpec&) = default;
};

struct IOSchedule {
  TimeSet input_times = TimeSet::of({0});
  std::set<int> readout_times;

  [[nodiscard]] int max_readout() const {
    return readout_times.empty() ? 0 : *readout_times.rbegin();
  }
  [[nodiscard]] bool is_static() const {
    return input_times == TimeSet::of({0}) && readout_times.size() == 1;
  }

  friend bool operator==(const IOSchedule&, const IOSchedule&) = default;
};

/// Rounded mean of two feature counts, halves rounded down.
inline int intermediate_feature_size(int from_channels, int to_channels) {
  if (from_channels < 1 || to_channels < 1)
    throw ConfigError("intermediate_feature_size: counts must be >= 1");
  return (from_channels + to_channels) / 2;
}

/// One weighted or pooling layer inside a transition pipeline.
struct LayerPlan {
  enum class Kind { Conv, Deconv, MaxPool } kind = Kind::Conv;
  bool bn_relu_before = false;  // BN -> ReLU precedes this layer
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
};

/// Expands a transition into its layer sequence. Spatial scaling by 2^k is
/// realised with stride 2 on the first k weighted layers. Returns nullopt
/// when the pipeline cannot map `from` onto `to`.
inline std::optional<std::vector<LayerPlan>> plan_pipeline(Pipeline p, const StateSpec& from,
                                                           const StateSpec& to) {
  int factor_log2 = 0;
  bool up = false;
  auto ratio_log2 = [](int a, int b) -> std::optional<int> {
    if (a % b != 0) return std::nullopt;
    int r = a / b, k = 0;
    while (r > 1) {
      if (r % 2 != 0) return std::nullopt;
      r /= 2;
      ++k;
    }
    return k;
  };
  if (from.height >= to.height && from.width >= to.width) {
    auto kh = ratio_log2(from.height, to.height), kw = ratio_log2(from.width, to.width);
    if (!kh || !kw || *kh != *kw) return std::nullopt;
    factor_log2 = *kh;
  } else if (from.height <= to.height && from.width <= to.width) {
    auto kh = ratio_log2(to.height, from.height), kw = ratio_log2(to.width, from.width);
    if (!kh || !kw || *kh != *kw) return std::nullopt;
    factor_log2 = *kh;
    up = true;
  } else {
    return std::nullopt;
  }

  std::vector<LayerPlan> layers;
  if (p == Pipeline::MaxPool2x2) {
    if (up || factor_log2 != 1 || from.channels != to.channels) return std::nullopt;
    layers.push_back({LayerPlan::Kind::MaxPool, false, from.channels, to.channels, 2});
    return layers;
  }
  const int n = weighted_layers(p);
  if (factor_log2 > 0 && up != is_upsampling(p)) return std::nullopt;
  if (factor_log2 > n) return std::nullopt;
  const int mid = intermediate_feature_size(from.channels, to.channels);
  const bool brx = has_batchnorm(p);
  for (int i = 0; i < n; ++i) {
    LayerPlan l;
    l.kind = is_upsampling(p) ? LayerPlan::Kind::Deconv : LayerPlan::Kind::Conv;
    l.bn_relu_before = brx;
    l.in_channels = i == 0 ? from.channels : mid;
    l.out_channels = i == n - 1 ? to.channels : mid;
    l.stride = i < factor_log2 ? 2 : 1;
    layers.push_back(l);
  }
  return layers;
}

/// Simulates input population up to `horizon`: populated[i][t].
inline std::vector<std::vector<bool>> simulate_population(const GraphSpec& g, const IOSchedule& io,
                                                          int horizon) {
  const std::size_t ns = g.states.size();
  std::vector<std::vector<bool>> pop(ns, std::vector<bool>(horizon + 1, false));
  for (int t = 0; t <= horizon; ++t) {
    if (ns > 0 && io.input_times.contains(t)) pop[0][t] = true;
    if (t == 0) continue;
    for (const auto& tr : g.transitions) {
      const int i = g.state_index(tr.from), j = g.state_index(tr.to);
      if (i < 0 || j < 0) continue;
      if (tr.window.contains(t) && pop[i][t - 1]) pop[j][t] = true;
    }
  }
  return pop;
}

/// Returns human-readable problems; an empty list means the description is usable.
inline std::vector<std::string> validate(const GraphSpec& g, const SharingSpec& s,
                                         const IOSchedule& io) {
  std::vector<std::string> diag;
  auto tr_name = [](const TransitionSpec& t) {
    return "transition " + t.from + "->" + t.to + " (" + to_string(t.pipeline) + ")";
  };

  if (g.states.empty()) diag.push_back("graph has no states");
  std::set<std::string> names;
  for (const auto& st : g.states) {
    if (st.name.empty()) diag.push_back("state with empty name");
    if (!names.insert(st.name).second) diag.push_back("duplicate state name '" + st.name + "'");
    if (st.height < 1 || st.width < 1 || st.channels < 1)
      diag.push_back("state '" + st.name + "' has a dimension < 1");
  }
  if (g.state_index(g.readout_state) < 0)
    diag.push_back("readout state '" + g.readout_state + "' does not exist");
  if (g.pre_net.input_channels < 1 || g.pre_net.input_height < 1 || g.pre_net.input_width < 1)
    diag.push_back("pre-net input dimensions must be >= 1");
  if (!g.states.empty() && (g.pre_net.input_height != g.states[0].height ||
                            g.pre_net.input_width != g.states[0].width))
    diag.push_back("pre-net input size must equal the first state's spatial size");
  if (g.post_net.num_classes < 1) diag.push_back("post-net needs at least one class");

  // plan per transition, for shape checks below
  std::map<std::pair<std::string, std::string>, std::vector<LayerPlan>> plans;
  for (std::size_t a = 0; a < g.transitions.size(); ++a) {
    const auto& tr = g.transitions[a];
    const int i = g.state_index(tr.from), j = g.state_index(tr.to);
    if (i < 0 || j < 0) {
      diag.push_back(tr_name(tr) + " references a missing state");
      continue;
    }
    const auto& from = g.states[i];
    const auto& to = g.states[j];
    auto plan = plan_pipeline(tr.pipeline, from, to);
    if (!plan) {
      diag.push_back(tr_name(tr) + " cannot map " + std::to_string(from.height) + "x" +
                     std::to_string(from.width) + "x" + std::to_string(from.channels) + " to " +
                     std::to_string(to.height) + "x" + std::to_string(to.width) + "x" +
                     std::to_string(to.channels) + ": stride/spatial scaling mismatch");
    } else {
      plans[{tr.from, tr.to}] = *plan;
    }
    if (tr.identity_shortcut && (from.height != to.height || from.width != to.width ||
                                 from.channels != to.channels))
      diag.push_back(tr_name(tr) + " has an identity shortcut between differently shaped states");
    if (tr.window.empty()) diag.push_back(tr_name(tr) + " has an empty active window");
    if (!tr.window.all && !tr.window.times.empty() && *tr.window.times.begin() < 1)
      diag.push_back(tr_name(tr) + " is active before t=1");
    for (std::size_t b = a + 1; b < g.transitions.size(); ++b) {
      const auto& o = g.transitions[b];
      if (o.from != tr.from || o.to != tr.to) continue;
      bool overlap = tr.window.all || o.window.all;
      for (int t : tr.window.times) overlap = overlap || o.window.contains(t);
      if (overlap) diag.push_back(tr_name(tr) + " overlaps another transition with the same endpoints");
    }
  }

  // sharing
  if (s.mode != SharingMode::Explicit && !s.groups.empty())
    diag.push_back("explicit sharing groups given with sharing mode " + to_string(s.mode));
  if (s.mode == SharingMode::Explicit) {
    std::set<WeightKey> seen;
    for (std::size_t gi = 0; gi < s.groups.size(); ++gi) {
      const auto& grp = s.groups[gi];
      if (grp.empty()) diag.push_back("sharing group " + std::to_string(gi) + " is empty");
      const std::vector<LayerPlan>* ref = nullptr;
      for (const auto& k : grp) {
        const std::string kname = k.from + "->" + k.to + "@" +
                                  (k.t == WeightKey::kAnyTime ? "*" : std::to_string(k.t));
        for (const auto& prev : seen) {
          if (prev.from == k.from && prev.to == k.to &&
              (prev.t == k.t || prev.t == WeightKey::kAnyTime || k.t == WeightKey::kAnyTime))
            diag.push_back("weight instance " + kname + " appears in more than one sharing group");
        }
        seen.insert(k);
        auto it = plans.find({k.from, k.to});
        const TransitionSpec* tr = nullptr;
        for (const auto& cand : g.transitions)
          if (cand.from == k.from && cand.to == k.to &&
              (k.t == WeightKey::kAnyTime || cand.window.contains(k.t)))
            tr = &cand;
        if (it == plans.end() || tr == nullptr) {
          diag.push_back("sharing group " + std::to_string(gi) + " references unknown instance " +
                         kname);
          continue;
        }
        if (ref == nullptr) {
          ref = &it->second;
          continue;
        }
        bool same = ref->size() == it->second.size();
        for (std::size_t l = 0; same && l < ref->size(); ++l) {
          const auto &x = (*ref)[l], &y = it->second[l];
          same = x.kind == y.kind && x.in_channels == y.in_channels &&
                 x.out_channels == y.out_channels;
        }
        if (!same)
          diag.push_back("sharing group " + std::to_string(gi) +
                         " ties instances with different parameter shapes (" + kname + ")");
      }
    }
  }
  if (s.mode == SharingMode::AllShared) {
    std::optional<std::pair<int, int>> ref;
    for (const auto& [key, plan] : plans)
      for (const auto& l : plan) {
        if (l.kind == LayerPlan::Kind::MaxPool) continue;
        const std::pair<int, int> shape{l.in_channels, l.out_channels};
        if (!ref) ref = shape;
        if (*ref != shape || l.kind == LayerPlan::Kind::Deconv)
          diag.push_back("all_shared sharing needs identical conv layers; " + key.first + "->" +
                         key.second + " differs");
      }
  }

  // io
  if (io.input_times.empty()) diag.push_back("no input times");
  if (!io.input_times.all && !io.input_times.times.empty() && *io.input_times.times.begin() < 0)
    diag.push_back("negative input time");
  if (io.readout_times.empty()) diag.push_back("no readout times");
  if (!io.readout_times.empty() && *io.readout_times.begin() < 0)
    diag.push_back("negative readout time");

  if (diag.empty()) {
    const auto pop = simulate_population(g, io, io.max_readout());
    for (std::size_t i = 0; i < g.states.size(); ++i) {
      if (std::none_of(pop[i].begin(), pop[i].end(), [](bool b) { return b; }))
        diag.push_back("state '" + g.states[i].name + "' is not reachable from the input by t=" +
                       std::to_string(io.max_readout()));
    }
  }
  return diag;
}

}  // namespace rrnet
