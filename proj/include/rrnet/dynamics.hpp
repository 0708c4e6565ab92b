#pragma once

// Discrete dynamical systems h_{t+1} = f(h_t; w_t) + x_t: classification,
// homogeneous iteration h_n = (K + I)^n x_0, inhomogeneous iteration
// h <- x + K' h, and the truncated power series (I + K' + K'^2 + ...) x.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/tensor.hpp"

namespace rrnet::dynamics {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class LinearOperator {
 public:
  explicit LinearOperator(Matrix m) : m_(std::move(m)) {
    if (m_.rows() != m_.cols())
      throw ConfigError("linear operator must be square, got " + std::to_string(m_.rows()) + "x" +
                        std::to_string(m_.cols()));
    if (!m_.allFinite()) throw ConfigError("linear operator has non-finite entries");
  }

  [[nodiscard]] const Matrix& matrix() const { return m_; }
  [[nodiscard]] Eigen::Index dim() const { return m_.rows(); }

  [[nodiscard]] Vector apply(const Vector& x) const {
    check(x);
    return m_ * x;
  }

  void check(const Vector& x) const {
    if (x.size() != m_.cols())
      throw ConfigError("dimension mismatch: operator is " + std::to_string(m_.rows()) +
                        "-dimensional, vector has " + std::to_string(x.size()) + " entries");
  }

 private:
  Matrix m_;
};

/// Finite description of x_t or w_t for all t >= 0.
struct Schedule {
  enum class Kind { Delta, Constant, Explicit } kind = Kind::Constant;
  /// Delta / Constant: values[0]. Explicit: values[t], zero past the end.
  std::vector<Vector> values;

  static Schedule delta(Vector v) { return {Kind::Delta, {std::move(v)}}; }
  static Schedule constant(Vector v) { return {Kind::Constant, {std::move(v)}}; }
  static Schedule explicit_list(std::vector<Vector> v) { return {Kind::Explicit, std::move(v)}; }

  [[nodiscard]] Vector at(int t) const {
    if (values.empty()) throw ConfigError("schedule has no values");
    const Vector zero = Vector::Zero(values.front().size());
    switch (kind) {
      case Kind::Delta: return t == 0 ? values.front() : zero;
      case Kind::Constant: return values.front();
      case Kind::Explicit: return t < static_cast<int>(values.size()) ? values[t] : zero;
    }
    return zero;
  }
};

struct SystemDescriptor {
  Schedule input;    // x_t
  Schedule weights;  // w_t
};

struct SystemClass {
  bool homogeneous = false;     // x_t = 0 for all t > 0
  bool time_invariant = false;  // w_t = w for all t

  friend bool operator==(const SystemClass&, const SystemClass&) = default;
};

inline SystemClass classify(const SystemDescriptor& d) {
  SystemClass c;
  switch (d.input.kind) {
    case Schedule::Kind::Delta: c.homogeneous = true; break;
    case Schedule::Kind::Constant:
      c.homogeneous = d.input.values.empty() || d.input.values.front().isZero(0.0);
      break;
    case Schedule::Kind::Explicit:
      c.homogeneous = true;
      for (std::size_t t = 1; t < d.input.values.size(); ++t)
        c.homogeneous = c.homogeneous && d.input.values[t].isZero(0.0);
      break;
  }
  switch (d.weights.kind) {
    case Schedule::Kind::Constant: c.time_invariant = true; break;
    case Schedule::Kind::Delta:
      // w_0 then zero weights: invariant only if w_0 is itself zero
      c.time_invariant = d.weights.values.empty() || d.weights.values.front().isZero(0.0);
      break;
    case Schedule::Kind::Explicit:
      c.time_invariant = true;
      for (std::size_t t = 1; t < d.weights.values.size(); ++t)
        c.time_invariant = c.time_invariant && d.weights.values[t] == d.weights.values.front();
      break;
  }
  return c;
}

inline std::string describe(const SystemClass& c) {
  return std::string(c.homogeneous ? "homogeneous" : "inhomogeneous") + ", " +
         (c.time_invariant ? "time-invariant" : "time-variant");
}

/// (K + I)^n x0 by n residual steps h <- K h + h.
inline Vector iterate_homogeneous(const LinearOperator& k, const Vector& x0, int n) {
  if (n < 0) throw ConfigError("iterate_homogeneous: n must be >= 0");
  k.check(x0);
  Vector h = x0;
  for (int i = 0; i < n; ++i) h = k.matrix() * h + h;
  return h;
}

/// Same iteration with an arbitrary residual map on tensors: h <- K(h) + h.
template <typename T, typename Residual>
Tensor<T> iterate_homogeneous(Residual&& residual, const Tensor<T>& x0, int n) {
  if (n < 0) throw ConfigError("iterate_homogeneous: n must be >= 0");
  Tensor<T> h = x0;
  for (int i = 0; i < n; ++i) h = add(residual(h), h);
  return h;
}

/// Starting from h = x, n steps of h <- x + K' h, i.e. sum_{k=0..n} K'^k x.
/// `k_prime` is the full residual map K + I.
inline Vector iterate_inhomogeneous(const LinearOperator& k_prime, const Vector& x, int n) {
  if (n < 0) throw ConfigError("iterate_inhomogeneous: n must be >= 0");
  k_prime.check(x);
  Vector h = x;
  for (int i = 0; i < n; ++i) h = x + k_prime.matrix() * h;
  return h;
}

struct SeriesTrace {
  int term = 0;              // index m of the last included term K'^m x
  double residual_norm = 0;  // |(I - K') S_m - x| = |K'^{m+1} x|
};

struct SeriesResult {
  Vector state;
  int terms_used = 0;
  bool converged = false;
  std::vector<SeriesTrace> trace;
};

/// Sums x + K'x + K'^2 x + ... until the next term's norm drops below `tol`.
/// Reports non-convergence when `max_terms` is reached or the terms grow
/// past `growth_limit` times |x|.
inline SeriesResult power_series_solve(const LinearOperator& k_prime, const Vector& x, double tol,
                                       int max_terms = 10000, double growth_limit = 1e12) {
  k_prime.check(x);
  SeriesResult r;
  Vector term = x;
  r.state = x;
  r.terms_used = 1;
  const double scale = std::max(x.norm(), std::numeric_limits<double>::min());
  while (true) {
    Vector next = k_prime.matrix() * term;
    const double rn = next.norm();
    r.trace.push_back({r.terms_used - 1, rn});
    if (rn < tol) {
      r.converged = true;
      break;
    }
    if (!std::isfinite(rn) || rn > growth_limit * scale || r.terms_used >= max_terms) break;
    r.state += next;
    term = std::move(next);
    ++r.terms_used;
  }
  return r;
}

/// Spectral radius estimate from the average growth rate of K^k v over the
/// second half of `steps` power iterations (Gelfand's formula).
inline double estimate_spectral_radius(const Matrix& k, int steps = 100, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  Vector v(k.cols());
  for (auto& e : v) e = dist(rng);
  v.normalize();
  double log_growth = 0;
  int counted = 0;
  for (int i = 0; i < steps; ++i) {
    Vector w = k * v;
    const double nrm = w.norm();
    if (nrm == 0) return 0;
    if (i >= steps / 2) {
      log_growth += std::log(nrm);
      ++counted;
    }
    v = w / nrm;
  }
  return counted > 0 ? std::exp(log_growth / counted) : 0;
}

/// Largest singular value by power iteration on K^T K.
inline double estimate_spectral_norm(const Matrix& k, int steps = 100, std::uint64_t seed = 7) {
  return std::sqrt(estimate_spectral_radius(k.transpose() * k, steps, seed));
}

}  // namespace rrnet::dynamics
