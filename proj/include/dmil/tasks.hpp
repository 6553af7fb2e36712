#pragma once

// Point-mass goal reaching with a switching expert. The state is
// [p_x, p_y, g_x, g_y] (position and current waypoint). The expert picks one
// of three controllers from the distance d = |g - p|:
//
//   skill 0 "approach"  d > r1        gain * R(rot) * (g - p) / d
//   skill 1 "orbit"     r2 < d <= r1  gain * R(pi/3 + rot/3) * (g - p) / d
//   skill 2 "dock"      d <= r2       0.3 * gain * R(rot) * (g - p)
//
// The orbit controller swirls around the goal while closing in; its heading
// stays within (0, pi/2) of the goal direction for every rotation in
// [-pi/4, pi/4], so the expert always makes radial progress. Dynamics:
// p' = p + 0.1 * clip(a, 1.0) with clip rescaling to norm <= 1; the goal
// moves to the next waypoint once d < 0.05.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "dmil/data.hpp"
#include "dmil/dmil.hpp"
#include "dmil/random.hpp"

namespace dmil {

inline constexpr double kTimeStep = 0.1;
inline constexpr double kMaxAction = 1.0;
inline constexpr double kWaypointTolerance = 0.05;
inline constexpr double kDockGain = 0.3;
inline constexpr double kDefaultNoiseStd = 0.01;
inline constexpr std::size_t kStateDim = 4;
inline constexpr std::size_t kActionDim = 2;
inline constexpr int kTrueSkills = 3;

/// Fixed sampling ranges of sample_task and of trajectory start positions.
struct TaskRanges {
  static constexpr double gain_lo = 0.5, gain_hi = 2.0;
  static constexpr double outer_radius_lo = 0.6, outer_radius_hi = 1.0;
  static constexpr double inner_radius_lo = 0.15, inner_radius_hi = 0.35;
  static constexpr double first_waypoint_box = 1.5;
  /// Distance between consecutive waypoints, beyond r1.
  static constexpr double waypoint_gap_lo = 0.3, waypoint_gap_hi = 1.0;
  /// Start distance from the first waypoint, beyond r1.
  static constexpr double start_gap_lo = 0.3, start_gap_hi = 1.2;
  static constexpr int waypoints = 2;
};

struct TaskSpec {
  std::uint64_t seed = 0;
  double rotation_angle = 0.0;
  double gain_scale = 1.0;
  double outer_radius = 0.8;  ///< r1
  double inner_radius = 0.25; ///< r2
  std::vector<Eigen::Vector2d> waypoints;
  double noise_std = 0.0;

  void validate() const;
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct TaskDataset {
  std::vector<Trajectory> support;
  std::vector<Trajectory> query;
  TaskSpec spec;

  void validate() const;
  friend bool operator==(const TaskDataset&, const TaskDataset&) = default;
};

TaskSpec sample_task(std::uint64_t seed, double noise_std = kDefaultNoiseStd);

/// Ground-truth skill for a state: a pure function of d and the spec.
int expert_skill(const TaskSpec& spec, const Vector& state);
/// Expert action and skill. Noise of std spec.noise_std is added when
/// `noise` is given.
std::pair<Vector, int> expert_action(const TaskSpec& spec, const Vector& state, SplitMix64* noise = nullptr);

/// Norm clipping to kMaxAction.
Eigen::Vector2d clip_action(const Eigen::Vector2d& a);

/// Start position drawn from the task's start distribution.
Eigen::Vector2d sample_start(const TaskSpec& spec, SplitMix64& rng);

Trajectory rollout_expert(const TaskSpec& spec, std::size_t horizon, std::uint64_t seed);

/// Closed-loop control with an arbitrary policy. The policy returns
/// (action, skill index); skills are recorded in `skills`.
struct Rollout {
  Trajectory trajectory;
  std::vector<int> skills;
  bool success = false;
};
using Policy = std::function<std::pair<Vector, int>(const Vector&)>;
/// Runs until every waypoint is reached (success) or `horizon` steps elapse.
Rollout rollout_policy(const TaskSpec& spec, const Policy& policy, const Eigen::Vector2d& start, std::size_t horizon);

TaskDataset make_dataset(const TaskSpec& spec, std::size_t n_support, std::size_t n_query, std::size_t horizon,
                         std::uint64_t seed);

/// JSON Lines, one trajectory per line:
/// {"task_seed", "noise_std", "split", "states", "actions", "true_skills"}.
/// Task specs are rebuilt on load with sample_task(task_seed, noise_std).
void save_datasets(const std::filesystem::path& path, std::span<const TaskDataset> datasets);
std::vector<TaskDataset> load_datasets(const std::filesystem::path& path);

/// Draws the four HI/LI/HO/LO batches from a task's support set: trajectories
/// are taken from a shuffled order without replacement, reshuffling when the
/// order is exhausted.
class BatchSampler {
 public:
  explicit BatchSampler(std::uint64_t seed) : rng_(seed) {}
  TaskBatches draw(const TaskDataset& task, std::size_t trajectories_per_batch);

 private:
  SplitMix64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// m distinct indices out of [0, n), in draw order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m, SplitMix64& rng);

}  // namespace dmil
