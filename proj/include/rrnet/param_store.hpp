#pragma once

// Canonical parameter storage. One tensor exists per tied group, so members
// of a group start equal and stay equal; their gradients arrive already
// summed over instances. Batch-norm running statistics are keyed by
// (node, t) and never shared across time steps.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rrnet/ops.hpp"
#include "rrnet/unroll.hpp"

namespace rrnet {

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

struct BnKey {
  std::string node;
  int t = 0;

  friend auto operator<=>(const BnKey&, const BnKey&) = default;
  friend bool operator==(const BnKey&, const BnKey&) = default;
};

template <typename T>
struct RunningBn {
  std::vector<T> mean;
  std::vector<T> variance;
  std::uint64_t count = 0;  // number of batches folded in

  friend bool operator==(const RunningBn&, const RunningBn&) = default;
};

namespace detail {
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}
}  // namespace detail

template <typename T>
class ParamStore {
 public:
  ParamStore() = default;

  /// He-initialised weights for every group referenced by `u` (live or not),
  /// zero momentum and no BN statistics. Each group draws from a stream
  /// derived from (seed, group id), so the result does not depend on node order.
  static ParamStore init(const UnrolledGraph& u, std::uint64_t seed) {
    ParamStore s;
    s.seed_ = seed;
    s.ensure(u);
    return s;
  }

  /// Adds groups referenced by `u` that are not yet present.
  void ensure(const UnrolledGraph& u) {
    for (const auto& p : u.params(false)) {
      auto it = weights_.find(p.group);
      if (it != weights_.end()) {
        if (it->second.shape() != p.shape)
          throw ConfigError("tied group '" + p.group + "' has inconsistent shapes " +
                            it->second.shape().str() + " and " + p.shape.str());
        continue;
      }
      Tensor<T> w(p.shape);
      switch (p.init) {
        case ParamRef::Init::He:
          w = he_init<T>(p.shape, p.fan_in, seed_ ^ detail::fnv1a(p.group));
          break;
        case ParamRef::Init::Ones: w.fill(T{1}); break;
        case ParamRef::Init::Zeros: break;
      }
      weights_.emplace(p.group, std::move(w));
      momentum_.emplace(p.group, Tensor<T>(p.shape));
    }
  }

  [[nodiscard]] bool has(const std::string& group) const { return weights_.count(group) > 0; }

  [[nodiscard]] const Tensor<T>& weight(const std::string& group) const {
    auto it = weights_.find(group);
    if (it == weights_.end()) throw ConfigError("no parameter group '" + group + "'");
    return it->second;
  }
  Tensor<T>& weight(const std::string& group) {
    auto it = weights_.find(group);
    if (it == weights_.end()) throw ConfigError("no parameter group '" + group + "'");
    return it->second;
  }
  [[nodiscard]] const Tensor<T>& momentum(const std::string& group) const {
    return momentum_.at(group);
  }
  [[nodiscard]] const std::map<std::string, Tensor<T>>& weights() const { return weights_; }

  [[nodiscard]] std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [_, w] : weights_) n += w.size();
    return n;
  }

  /// v <- momentum * v + g (+ weight_decay * w); w <- w - lr * v.
  /// Every group in `required` must have a gradient.
  void sgd_momentum_step(const Gradients<T>& grads, double lr, double momentum = 0.9,
                         double weight_decay = 0.0, const std::set<std::string>& required = {}) {
    for (const auto& g : required)
      if (!grads.count(g)) throw RuntimeError("missing gradient for parameter group '" + g + "'");
    for (const auto& [group, g] : grads) {
      auto it = weights_.find(group);
      if (it == weights_.end()) throw RuntimeError("gradient for unknown group '" + group + "'");
      Tensor<T>& w = it->second;
      Tensor<T>& v = momentum_.at(group);
      require_same_shape(w, g, "sgd_momentum_step");
      const T mu = static_cast<T>(momentum), rate = static_cast<T>(lr),
              wd = static_cast<T>(weight_decay);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu * v[i] + g[i] + wd * w[i];
        w[i] -= rate * v[i];
      }
    }
  }

  /// Folds batch statistics into the running estimate for (node, t) as an
  /// exponential moving average; the first update copies the batch values.
  void update_bn_running_stats(const std::string& node, int t, const BnStats<T>& batch,
                               double decay = 0.9) {
    auto& r = bn_[BnKey{node, t}];
    if (r.count == 0) {
      r.mean = batch.mean;
      r.variance = batch.variance;
    } else {
      check_channels(r, batch, node, t);
      const T a = static_cast<T>(decay), b = static_cast<T>(1.0 - decay);
      for (std::size_t c = 0; c < r.mean.size(); ++c) {
        r.mean[c] = a * r.mean[c] + b * batch.mean[c];
        r.variance[c] = a * r.variance[c] + b * batch.variance[c];
      }
    }
    ++r.count;
  }

  /// Exact pooled statistics over equally sized batches: running mean of the
  /// batch means, and the pooled second moment minus the squared mean.
  void accumulate_bn_stats(const std::string& node, int t, const BnStats<T>& batch) {
    auto& r = bn_[BnKey{node, t}];
    if (r.count == 0) {
      r.mean = batch.mean;
      r.variance = batch.variance;
      r.count = 1;
      return;
    }
    check_channels(r, batch, node, t);
    const double k = static_cast<double>(r.count);
    for (std::size_t c = 0; c < r.mean.size(); ++c) {
      const double m_old = r.mean[c];
      const double m2_old = r.variance[c] + m_old * m_old;
      const double m = (k * m_old + batch.mean[c]) / (k + 1);
      const double m2 =
          (k * m2_old + batch.variance[c] + static_cast<double>(batch.mean[c]) * batch.mean[c]) /
          (k + 1);
      r.mean[c] = static_cast<T>(m);
      r.variance[c] = static_cast<T>(std::max(0.0, m2 - m * m));
    }
    ++r.count;
  }

  [[nodiscard]] bool has_bn_stats(const std::string& node, int t) const {
    return bn_.count(BnKey{node, t}) > 0;
  }

  [[nodiscard]] const RunningBn<T>& bn_stats(const std::string& node, int t) const {
    auto it = bn_.find(BnKey{node, t});
    if (it == bn_.end())
      throw RuntimeError("missing batch-norm statistics for node '" + node + "' at t=" +
                         std::to_string(t));
    return it->second;
  }

  void set_bn_stats(const std::string& node, int t, RunningBn<T> stats) {
    bn_[BnKey{node, t}] = std::move(stats);
  }

  void clear_bn_stats() { bn_.clear(); }

  [[nodiscard]] const std::map<BnKey, RunningBn<T>>& all_bn_stats() const { return bn_; }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.weights_ == b.weights_ && a.momentum_ == b.momentum_ && a.bn_ == b.bn_;
  }

  /// Structured-text checkpoint tagged with the originating config hash.
  void save(const std::string& path, const std::string& config_hash) const {
    nlohmann::json doc;
    doc["format"] = "rrnet-checkpoint";
    doc["version"] = 1;
    doc["config_hash"] = config_hash;
    doc["seed"] = seed_;
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& [name, w] : weights_) {
      const auto& s = w.shape();
      groups[name] = {{"shape", {s.n, s.c, s.h, s.w}},
                      {"data", w.vec()},
                      {"momentum", momentum_.at(name).vec()}};
    }
    doc["weights"] = groups;
    nlohmann::json bn = nlohmann::json::array();
    for (const auto& [key, r] : bn_)
      bn.push_back({{"node", key.node},
                    {"t", key.t},
                    {"count", r.count},
                    {"mean", r.mean},
                    {"variance", r.variance}});
    doc["bn"] = bn;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write checkpoint '" + path + "'");
    os << doc.dump() << '\n';
    if (!os) throw IoError("failed writing checkpoint '" + path + "'");
  }

  static ParamStore load(const std::string& path, const std::string& expected_hash) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open checkpoint '" + path + "'");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("checkpoint '" + path + "' is malformed: " + e.what());
    }
    try {
      if (doc.at("format") != "rrnet-checkpoint" || doc.at("version") != 1)
        throw IoError("checkpoint '" + path + "' has an unsupported format or version");
      const auto hash = doc.at("config_hash").template get<std::string>();
      if (hash != expected_hash)
        throw ConfigError("checkpoint '" + path + "' was written for config " + hash +
                          ", current config is " + expected_hash);
      ParamStore s;
      s.seed_ = doc.at("seed").template get<std::uint64_t>();
      for (const auto& [name, g] : doc.at("weights").items()) {
        const auto dims = g.at("shape").template get<std::vector<int>>();
        const Shape shape{dims.at(0), dims.at(1), dims.at(2), dims.at(3)};
        s.weights_.emplace(name, Tensor<T>(shape, g.at("data").template get<std::vector<T>>()));
        s.momentum_.emplace(name, Tensor<T>(shape, g.at("momentum").template get<std::vector<T>>()));
      }
      for (const auto& e : doc.at("bn")) {
        RunningBn<T> r{e.at("mean").template get<std::vector<T>>(), e.at("variance").template get<std::vector<T>>(),
                       e.at("count").template get<std::uint64_t>()};
        s.bn_[BnKey{e.at("node").template get<std::string>(), e.at("t").template get<int>()}] = std::move(r);
      }
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw IoError("checkpoint '" + path + "' is malformed: " + e.what());
    }
  }

 private:
  static void check_channels(const RunningBn<T>& r, const BnStats<T>& b, const std::string& node,
                             int t) {
    if (r.mean.size() != b.mean.size() || r.variance.size() != b.variance.size())
      throw ConfigError("batch-norm statistics for '" + node + "' at t=" + std::to_string(t) +
                        " change channel count");
  }

  std::uint64_t seed_ = 0;
  std::map<std::string, Tensor<T>> weights_;
  std::map<std::string, Tensor<T>> momentum_;
  std::map<BnKey, RunningBn<T>> bn_;
};

}  // namespace rrnet
