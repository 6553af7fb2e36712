#pragma once

// Random instances and straight-line reference computations shared by the
// unit tests and the acceptance checks. The references use explicit loops
// and never call into the library's forward passes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dmil/dmil.hpp"
#include "dmil/random.hpp"

namespace dmil::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, SplitMix64& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * rng.normal();
  return m;
}

inline ParamVector random_params(std::size_t n, SplitMix64& rng, double scale = 1.0) {
  ParamVector p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = scale * rng.normal();
  return p;
}

inline PairSet random_pairs(std::size_t n, std::uint64_t seed, std::size_t state_dim = 4, std::size_t action_dim = 2) {
  SplitMix64 rng(seed);
  PairSet p;
  p.states = random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(state_dim), rng);
  p.actions = random_matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(action_dim), rng);
  return p;
}

/// `trajectories` random trajectories of length T stacked into one batch.
inline Batch random_batch(std::size_t trajectories, std::size_t T, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<Trajectory> ts;
  for (std::size_t i = 0; i < trajectories; ++i) {
    Trajectory t;
    t.states = random_matrix(static_cast<Eigen::Index>(T), 4, rng);
    t.actions = random_matrix(static_cast<Eigen::Index>(T), 2, rng);
    ts.push_back(std::move(t));
  }
  return Batch::stack(ts);
}

inline TaskBatches random_task(std::size_t trajectories, std::size_t T, std::uint64_t seed) {
  TaskBatches b;
  for (std::size_t i = 0; i < 4; ++i) b.tau[i] = random_batch(trajectories, T, derive_seed(seed, i));
  return b;
}

inline HierarchicalParams random_hierarchy(std::size_t K, std::size_t hidden, std::uint64_t seed) {
  return HierarchicalParams::init({{4, hidden, K}}, {{4, hidden, 2}}, seed);
}

/// Plain-loop MLP forward pass of one input.
inline std::vector<double> reference_forward(const MlpShape& shape, const ParamVector& params,
                                             const std::vector<double>& input) {
  std::vector<double> h = input;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < shape.layer_sizes.size(); ++l) {
    const std::size_t in = shape.layer_sizes[l], out = shape.layer_sizes[l + 1];
    std::vector<double> next(out, 0.0);
    for (std::size_t j = 0; j < out; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += h[i] * params[offset + j * in + i];
      acc += params[offset + in * out + j];
      next[j] = (l + 2 < shape.layer_sizes.size()) ? std::max(acc, 0.0) : acc;
    }
    offset += in * out + out;
    h = std::move(next);
  }
  return h;
}

inline std::vector<double> row(const Matrix& m, Eigen::Index r) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

inline std::vector<double> reference_softmax(std::vector<double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& x : logits) z += (x = std::exp(x - top));
  for (double& x : logits) x /= z;
  return logits;
}

/// Exhaustive argmin over all K squared errors at each row, lowest k on ties.
inline std::vector<int> brute_force_labels(const PairSet& pairs, const MlpShape& skill_shape,
                                           const std::vector<ParamVector>& skills) {
  std::vector<int> out;
  for (Eigen::Index t = 0; t < pairs.states.rows(); ++t) {
    int best = 0;
    double best_err = 0.0;
    for (std::size_t k = 0; k < skills.size(); ++k) {
      const auto a = reference_forward(skill_shape, skills[k], row(pairs.states, t));
      double err = 0.0;
      for (std::size_t d = 0; d < a.size(); ++d) {
        const double r = pairs.actions(t, static_cast<Eigen::Index>(d)) - a[d];
        err += r * r;
      }
      if (k == 0 || err < best_err) {
        best = static_cast<int>(k);
        best_err = err;
      }
    }
    out.push_back(best);
  }
  return out;
}

/// Exhaustive argmax of the high-level logits at each row, lowest k on ties.
inline std::vector<int> brute_force_argmax(const MlpShape& high_shape, const ParamVector& high, const Matrix& states) {
  std::vector<int> out;
  for (Eigen::Index t = 0; t < states.rows(); ++t) {
    const auto logits = reference_forward(high_shape, high, row(states, t));
    int best = 0;
    for (std::size_t k = 1; k < logits.size(); ++k)
      if (logits[k] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
    out.push_back(best);
  }
  return out;
}

/// Central differences of f at theta, one coordinate at a time.
template <class F>
ParamVector central_differences(const F& f, const ParamVector& theta, double h) {
  ParamVector g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    ParamVector plus = theta, minus = theta;
    plus[i] += h;
    minus[i] -= h;
    g[i] = (f(plus) - f(minus)) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_rel_error(const ParamVector& a, const ParamVector& b, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return worst;
}

inline double max_abs_diff(const ParamVector& a, const ParamVector& b) {
  return (a.values() - b.values()).cwiseAbs().maxCoeff();
}

}  // namespace dmil::testing
