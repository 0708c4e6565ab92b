#pragma once

// Named architectures: 1-state and 3-state ResNets viewed as RNNs, fully and
// adjacently connected multi-state networks, the all-conv-shared ResNet and
// the inhomogeneous (input at every step) variant.

#include <optional>
#include <string>
#include <vector>

#include "rrnet/graph.hpp"

namespace rrnet {

struct ModelSpec {
  GraphSpec graph;
  SharingSpec sharing;
  IOSchedule io;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct PresetOptions {
  std::optional<int> readout;      // readout time T
  std::vector<int> widths;         // feature count per state; empty = default widths
  bool time_shared = true;         // false: independent weights at every t
  std::optional<bool> deep_prenet; // default depends on preset
  bool self_transitions = true;    // ladder presets only
  int blocks_per_stage = 3;        // resnet_3state / allshared_3state
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "resnet_1state",   "resnet_3state",   "fullrec_2state",   "fullrec_3state",
      "adjacent_3state", "adjacent_4state", "allshared_3state", "inhomogeneous_3state"};
  return names;
}

/// Default per-state widths of a preset.
inline std::vector<int> preset_default_widths(const std::string& name) {
  if (name == "resnet_1state") return {64};
  if (name == "resnet_3state") return {16, 32, 64};
  if (name == "fullrec_2state") return {64, 64};
  if (name == "fullrec_3state" || name == "adjacent_3state" || name == "inhomogeneous_3state")
    return {64, 128, 256};
  if (name == "adjacent_4state") return {8, 16, 32, 64};
  if (name == "allshared_3state") return {64, 64, 64};
  throw ConfigError("unknown preset '" + name + "'");
}

/// Reduced widths used for CPU-scale experiments.
inline std::vector<int> preset_desk_widths(const std::string& name) {
  if (name == "resnet_1state") return {8};
  if (name == "resnet_3state") return {4, 8, 16};
  if (name == "fullrec_2state") return {8, 8};
  if (name == "fullrec_3state" || name == "adjacent_3state" || name == "inhomogeneous_3state")
    return {8, 16, 32};
  if (name == "adjacent_4state") return {4, 8, 16, 32};
  if (name == "allshared_3state") return {8, 8, 8};
  throw ConfigError("unknown preset '" + name + "'");
}

namespace detail {

inline std::string state_name(std::size_t i) { return "h" + std::to_string(i + 1); }

inline std::vector<StateSpec> ladder_states(const std::vector<int>& widths) {
  std::vector<StateSpec> states;
  int size = 32;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    states.push_back({state_name(i), size, size, widths[i]});
    size /= 2;
  }
  return states;
}

inline TransitionSpec self_block(const std::string& s, TimeSet window = TimeSet::every()) {
  return {s, s, Pipeline::BRCx2, true, std::move(window)};
}

// Residual stages joined by a single transition at t = n+1, 2(n+1), ...
inline GraphSpec staged_resnet(const std::vector<int>& widths, int blocks, Pipeline joiner) {
  GraphSpec g;
  g.states = ladder_states(widths);
  const int period = blocks + 1;
  for (std::size_t s = 0; s < g.states.size(); ++s) {
    const int first = static_cast<int>(s) * period + 1;
    g.transitions.push_back(
        self_block(g.states[s].name, TimeSet::range(first, first + blocks - 1)));
    if (s + 1 < g.states.size()) {
      g.transitions.push_back({g.states[s].name, g.states[s + 1].name, joiner, false,
                               TimeSet::of({(static_cast<int>(s) + 1) * period})});
    }
  }
  g.readout_state = g.states.back().name;
  return g;
}

// Ladder of states; `bypass` adds transitions between non-adjacent states.
inline GraphSpec ladder(const std::vector<int>& widths, bool bypass, bool self) {
  GraphSpec g;
  g.states = ladder_states(widths);
  const std::size_t n = g.states.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t gap = i > j ? i - j : j - i;
      if (i == j) {
        if (self) g.transitions.push_back(self_block(g.states[i].name));
        continue;
      }
      if (gap > 1 && !bypass) continue;
      const Pipeline p = j > i ? Pipeline::BRCx2 : Pipeline::BRDx2;
      g.transitions.push_back({g.states[i].name, g.states[j].name, p, false, TimeSet::every()});
    }
  }
  g.readout_state = g.states.back().name;
  return g;
}

}  // namespace detail

inline ModelSpec preset(const std::string& name, const PresetOptions& opt = {}) {
  std::vector<int> widths = opt.widths.empty() ? preset_default_widths(name) : opt.widths;
  const std::size_t expected = preset_default_widths(name).size();
  if (widths.size() != expected) {
    throw ConfigError("preset '" + name + "' needs " + std::to_string(expected) + " widths, got " +
                      std::to_string(widths.size()));
  }
  if (opt.blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");

  ModelSpec m;
  int readout = 10;
  bool deep = false;
  if (name == "resnet_1state") {
    m.graph.states = {{"h1", 32, 32, widths[0]}};
    m.graph.transitions = {detail::self_block("h1")};
    m.graph.readout_state = "h1";
  } else if (name == "resnet_3state") {
    m.graph = detail::staged_resnet(widths, opt.blocks_per_stage, Pipeline::Conv);
    readout = 3 * opt.blocks_per_stage + 2;
  } else if (name == "allshared_3state") {
    if (widths[0] != widths[1] || widths[1] != widths[2])
      throw ConfigError("allshared_3state needs equal widths for all states");
    m.graph = detail::staged_resnet(widths, opt.blocks_per_stage, Pipeline::MaxPool2x2);
    readout = 3 * opt.blocks_per_stage + 2;
    m.sharing.mode = SharingMode::AllShared;
  } else if (name == "fullrec_2state") {
    m.graph.states = {{"h1", 32, 32, widths[0]}, {"h2", 32, 32, widths[1]}};
    m.graph.transitions = {detail::self_block("h1"),
                           {"h1", "h2", Pipeline::BRCx2, false, TimeSet::every()},
                           {"h2", "h1", Pipeline::BRCx2, false, TimeSet::every()},
                           detail::self_block("h2")};
    m.graph.readout_state = "h2";
  } else if (name == "fullrec_3state" || name == "inhomogeneous_3state") {
    m.graph = detail::ladder(widths, true, opt.self_transitions);
    readout = 5;
    deep = true;
    if (name == "inhomogeneous_3state") m.io.input_times = TimeSet::every();
  } else if (name == "adjacent_3state" || name == "adjacent_4state") {
    m.graph = detail::ladder(widths, false, opt.self_transitions);
    readout = 5;
    deep = true;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }

  m.graph.pre_net.kind = opt.deep_prenet.value_or(deep) ? PreNetKind::Deep : PreNetKind::Simple;
  if (!opt.time_shared) {
    if (m.sharing.mode == SharingMode::AllShared)
      throw ConfigError("allshared_3state cannot be time-unshared");
    m.sharing.mode = SharingMode::TimeUnshared;
  }
  m.io.readout_times = {opt.readout.value_or(readout)};
  return m;
}

}  // namespace rrnet
