#pragma once

// JSON config documents:
//
//   {
//     "states":      [{"name": "h1", "h": 32, "w": 32, "c": 64}, ...],
//     "transitions": [{"from": "h1", "to": "h2", "pipeline": "BRCx2",
//                      "shortcut": false, "window": "all" | [4, 8]}, ...],
//     "pre_net":     {"kind": "simple" | "deep", "in_channels": 3, "h": 32, "w": 32},
//     "post_net":    {"classes": 10},
//     "readout_state": "h2",
//     "sharing":     {"mode": "time_shared" | "time_unshared" | "all_shared"}
//                  | {"mode": "explicit", "groups": [[{"from", "to", "t": 3 | "*"}]]},
//     "io":          {"input_times": [0] | "all", "readout_times": [10]},
//     "train":       {"epochs", "batch_size", "lr_schedule": [{"first", "last", "lr"}],
//                     "momentum", "weight_decay", "augment", "seed",
//                     "train_subset", "test_subset", "bn_decay", "recompute_bn_stats"}
//   }
//
// Unknown fields are rejected. "pre_net", "post_net", "sharing" and "train"
// may be omitted and then take their defaults.

#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rrnet/presets.hpp"
#include "rrnet/train_config.hpp"

namespace rrnet {

struct ParseError : ConfigError {
  using ConfigError::ConfigError;
};

struct ModelConfig {
  ModelSpec model;
  TrainConfig train;
  std::vector<std::string> diagnostics;  // from validate(); empty when usable

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.model == b.model && a.train == b.train;
  }
};

namespace detail {

using ojson = nlohmann::ordered_json;

inline void reject_unknown(const ojson& obj, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ParseError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ParseError(where + ": unknown field '" + key + "'");
  }
}

template <typename V>
V field(const ojson& obj, const std::string& where, const char* key) {
  if (!obj.contains(key)) throw ParseError(where + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(where + "." + key + ": wrong type");
  }
}

template <typename V>
V field_or(const ojson& obj, const std::string& where, const char* key, V fallback) {
  return obj.contains(key) ? field<V>(obj, where, key) : fallback;
}

inline ojson time_set_json(const TimeSet& s) {
  if (s.all) return "all";
  ojson arr = ojson::array();
  for (int t : s.times) arr.push_back(t);
  return arr;
}

inline TimeSet parse_time_set(const ojson& v, const std::string& where) {
  if (v.is_string()) {
    if (v.get<std::string>() != "all") throw ParseError(where + ": expected \"all\" or a list");
    return TimeSet::every();
  }
  if (!v.is_array()) throw ParseError(where + ": expected \"all\" or a list of time steps");
  TimeSet s;
  for (const auto& e : v) {
    if (!e.is_number_integer()) throw ParseError(where + ": time steps must be integers");
    s.times.insert(e.get<int>());
  }
  return s;
}

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline std::string serialize_config(const ModelSpec& m, const TrainConfig& train = {}) {
  using detail::ojson;
  ojson doc;
  ojson states = ojson::array();
  for (const auto& s : m.graph.states)
    states.push_back({{"name", s.name}, {"h", s.height}, {"w", s.width}, {"c", s.channels}});
  doc["states"] = states;
  ojson trs = ojson::array();
  for (const auto& t : m.graph.transitions)
    trs.push_back({{"from", t.from},
                   {"to", t.to},
                   {"pipeline", to_string(t.pipeline)},
                   {"shortcut", t.identity_shortcut},
                   {"window", detail::time_set_json(t.window)}});
  doc["transitions"] = trs;
  const auto& pre = m.graph.pre_net;
  doc["pre_net"] = {{"kind", pre.kind == PreNetKind::Deep ? "deep" : "simple"},
                    {"in_channels", pre.input_channels},
                    {"h", pre.input_height},
                    {"w", pre.input_width}};
  doc["post_net"] = {{"classes", m.graph.post_net.num_classes}};
  doc["readout_state"] = m.graph.readout_state;
  ojson sharing = {{"mode", to_string(m.sharing.mode)}};
  if (m.sharing.mode == SharingMode::Explicit) {
    ojson groups = ojson::array();
    for (const auto& g : m.sharing.groups) {
      ojson keys = ojson::array();
      for (const auto& k : g) {
        ojson t = k.t == WeightKey::kAnyTime ? ojson("*") : ojson(k.t);
        keys.push_back({{"from", k.from}, {"to", k.to}, {"t", t}});
      }
      groups.push_back(keys);
    }
    sharing["groups"] = groups;
  }
  doc["sharing"] = sharing;
  ojson readouts = ojson::array();
  for (int t : m.io.readout_times) readouts.push_back(t);
  doc["io"] = {{"input_times", detail::time_set_json(m.io.input_times)},
               {"readout_times", readouts}};
  ojson sched = ojson::array();
  for (const auto& p : train.lr_schedule)
    sched.push_back({{"first", p.first_epoch}, {"last", p.last_epoch}, {"lr", p.lr}});
  ojson tr = {{"epochs", train.epochs},        {"batch_size", train.batch_size},
              {"lr_schedule", sched},          {"momentum", train.momentum},
              {"weight_decay", train.weight_decay}, {"augment", train.augment},
              {"seed", train.seed}};
  tr["train_subset"] = train.train_subset ? ojson(*train.train_subset) : ojson(nullptr);
  tr["test_subset"] = train.test_subset ? ojson(*train.test_subset) : ojson(nullptr);
  tr["bn_decay"] = train.bn_decay;
  tr["recompute_bn_stats"] = train.recompute_bn_stats;
  doc["train"] = tr;
  return doc.dump(2) + "\n";
}

/// Parses a config document. Syntax and schema problems throw ParseError
/// with a location; semantic problems are returned in `diagnostics`.
inline ModelConfig parse_config(const std::string& text) {
  using detail::field;
  using detail::field_or;
  using detail::ojson;
  ojson doc;
  try {
    doc = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config syntax error at " + detail::line_col(text, e.byte) + ": " +
                     e.what());
  }
  detail::reject_unknown(doc, "config",
                         {"states", "transitions", "pre_net", "post_net", "readout_state",
                          "sharing", "io", "train"});
  ModelConfig cfg;
  GraphSpec& g = cfg.model.graph;

  if (!doc.contains("states") || !doc["states"].is_array())
    throw ParseError("config: 'states' must be a list");
  for (std::size_t i = 0; i < doc["states"].size(); ++i) {
    const std::string where = "states[" + std::to_string(i) + "]";
    const auto& s = doc["states"][i];
    detail::reject_unknown(s, where, {"name", "h", "w", "c"});
    g.states.push_back({field<std::string>(s, where, "name"), field<int>(s, where, "h"),
                        field<int>(s, where, "w"), field<int>(s, where, "c")});
  }

  if (!doc.contains("transitions") || !doc["transitions"].is_array())
    throw ParseError("config: 'transitions' must be a list");
  for (std::size_t i = 0; i < doc["transitions"].size(); ++i) {
    const std::string where = "transitions[" + std::to_string(i) + "]";
    const auto& t = doc["transitions"][i];
    detail::reject_unknown(t, where, {"from", "to", "pipeline", "shortcut", "window"});
    TransitionSpec tr;
    tr.from = field<std::string>(t, where, "from");
    tr.to = field<std::string>(t, where, "to");
    const auto name = field<std::string>(t, where, "pipeline");
    const auto p = parse_pipeline(name);
    if (!p) throw ParseError(where + ".pipeline: unknown pipeline '" + name + "'");
    tr.pipeline = *p;
    tr.identity_shortcut = field_or<bool>(t, where, "shortcut", false);
    tr.window = t.contains("window") ? detail::parse_time_set(t["window"], where + ".window")
                                     : TimeSet::every();
    g.transitions.push_back(tr);
  }

  if (doc.contains("pre_net")) {
    const auto& p = doc["pre_net"];
    detail::reject_unknown(p, "pre_net", {"kind", "in_channels", "h", "w"});
    const auto kind = field_or<std::string>(p, "pre_net", "kind", "simple");
    if (kind != "simple" && kind != "deep")
      throw ParseError("pre_net.kind: expected \"simple\" or \"deep\", got '" + kind + "'");
    g.pre_net.kind = kind == "deep" ? PreNetKind::Deep : PreNetKind::Simple;
    g.pre_net.input_channels = field_or<int>(p, "pre_net", "in_channels", 3);
    g.pre_net.input_height = field_or<int>(p, "pre_net", "h", 32);
    g.pre_net.input_width = field_or<int>(p, "pre_net", "w", 32);
  }
  if (doc.contains("post_net")) {
    detail::reject_unknown(doc["post_net"], "post_net", {"classes"});
    g.post_net.num_classes = field_or<int>(doc["post_net"], "post_net", "classes", 10);
  }
  g.readout_state = field<std::string>(doc, "config", "readout_state");

  if (doc.contains("sharing")) {
    const auto& s = doc["sharing"];
    detail::reject_unknown(s, "sharing", {"mode", "groups"});
    const auto mode = field<std::string>(s, "sharing", "mode");
    const auto m = parse_sharing_mode(mode);
    if (!m) throw ParseError("sharing.mode: unknown mode '" + mode + "'");
    cfg.model.sharing.mode = *m;
    if (s.contains("groups")) {
      if (!s["groups"].is_array()) throw ParseError("sharing.groups: expected a list");
      for (std::size_t gi = 0; gi < s["groups"].size(); ++gi) {
        const auto& grp = s["groups"][gi];
        if (!grp.is_array()) throw ParseError("sharing.groups[" + std::to_string(gi) + "]: expected a list");
        std::vector<WeightKey> keys;
        for (std::size_t ki = 0; ki < grp.size(); ++ki) {
          const std::string where =
              "sharing.groups[" + std::to_string(gi) + "][" + std::to_string(ki) + "]";
          const auto& k = grp[ki];
          detail::reject_unknown(k, where, {"from", "to", "t"});
          WeightKey key{field<std::string>(k, where, "from"), field<std::string>(k, where, "to"),
                        WeightKey::kAnyTime};
          if (k.contains("t")) {
            if (k["t"].is_string() && k["t"].get<std::string>() == "*") {
              key.t = WeightKey::kAnyTime;
            } else if (k["t"].is_number_integer()) {
              key.t = k["t"].get<int>();
            } else {
              throw ParseError(where + ".t: expected an integer or \"*\"");
            }
          }
          keys.push_back(key);
        }
        cfg.model.sharing.groups.push_back(keys);
      }
    }
  }

  if (!doc.contains("io")) throw ParseError("config: missing field 'io'");
  {
    const auto& io = doc["io"];
    detail::reject_unknown(io, "io", {"input_times", "readout_times"});
    cfg.model.io.input_times = io.contains("input_times")
                                   ? detail::parse_time_set(io["input_times"], "io.input_times")
                                   : TimeSet::of({0});
    const auto readouts = field<std::vector<int>>(io, "io", "readout_times");
    cfg.model.io.readout_times = std::set<int>(readouts.begin(), readouts.end());
  }

  if (doc.contains("train")) {
    const auto& t = doc["train"];
    detail::reject_unknown(t, "train",
                           {"epochs", "batch_size", "lr_schedule", "momentum", "weight_decay",
                            "augment", "seed", "train_subset", "test_subset", "bn_decay",
                            "recompute_bn_stats"});
    TrainConfig& c = cfg.train;
    c.epochs = field_or<int>(t, "train", "epochs", c.epochs);
    c.batch_size = field_or<int>(t, "train", "batch_size", c.batch_size);
    if (t.contains("lr_schedule")) {
      c.lr_schedule.clear();
      for (std::size_t i = 0; i < t["lr_schedule"].size(); ++i) {
        const std::string where = "train.lr_schedule[" + std::to_string(i) + "]";
        const auto& p = t["lr_schedule"][i];
        detail::reject_unknown(p, where, {"first", "last", "lr"});
        c.lr_schedule.push_back({field<int>(p, where, "first"), field<int>(p, where, "last"),
                                 field<double>(p, where, "lr")});
      }
    } else {
      c.lr_schedule = default_lr_schedule(std::max(1, c.epochs));
    }
    c.momentum = field_or<double>(t, "train", "momentum", c.momentum);
    c.weight_decay = field_or<double>(t, "train", "weight_decay", c.weight_decay);
    c.augment = field_or<bool>(t, "train", "augment", c.augment);
    c.seed = field_or<std::uint64_t>(t, "train", "seed", c.seed);
    auto opt_int = [&](const char* key) -> std::optional<int> {
      if (!t.contains(key) || t[key].is_null()) return std::nullopt;
      return field<int>(t, "train", key);
    };
    c.train_subset = opt_int("train_subset");
    c.test_subset = opt_int("test_subset");
    c.bn_decay = field_or<double>(t, "train", "bn_decay", c.bn_decay);
    c.recompute_bn_stats = field_or<bool>(t, "train", "recompute_bn_stats", c.recompute_bn_stats);
  }

  cfg.diagnostics = validate(cfg.model.graph, cfg.model.sharing, cfg.model.io);
  for (auto& d : validate(cfg.train)) cfg.diagnostics.push_back("train: " + d);
  return cfg;
}

/// 64-bit FNV-1a of the serialized config, as 16 hex digits.
inline std::string config_hash(const ModelSpec& m) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : serialize_config(m)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace rrnet
