#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dmil/autodiff.hpp"

namespace dmil {

/// One demonstration: row t of `states`/`actions` is (s_t, a_t).
/// `true_skills` holds generator labels for evaluation only; no training code
/// path reads it.
struct Trajectory {
  Matrix states;
  Matrix actions;
  std::optional<std::vector<int>> true_skills;

  std::size_t length() const { return static_cast<std::size_t>(states.rows()); }
  void validate() const;

  friend bool operator==(const Trajectory& a, const Trajectory& b);
};

/// Unordered (state, action) pairs.
struct PairSet {
  Matrix states;
  Matrix actions;

  std::size_t size() const { return static_cast<std::size_t>(states.rows()); }
  bool empty() const { return size() == 0; }
  /// Rows of this set selected by `rows`, in that order.
  PairSet select(std::span<const std::size_t> rows) const;
};

/// Pairs stacked from whole trajectories. `starts` holds the first row of
/// each trajectory; consecutive rows are temporal neighbours only inside one
/// trajectory.
struct Batch {
  PairSet pairs;
  std::vector<std::size_t> starts;

  std::size_t size() const { return pairs.size(); }
  std::size_t trajectory_count() const { return starts.size(); }
  /// (t, t+1) row pairs that lie inside a single trajectory.
  std::vector<std::pair<std::size_t, std::size_t>> neighbour_pairs() const;

  static Batch stack(std::span<const Trajectory> trajectories);
  static Batch stack(std::span<const Trajectory* const> trajectories);
  /// Concatenation of several batches, trajectory boundaries preserved.
  static Batch concat(std::span<const Batch> batches);
};

}  // namespace dmil
