#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dmil/dmil.hpp"
#include "dmil/tasks.hpp"

namespace dmil {

using Objective = std::function<double(const ParamVector&)>;

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  ParamVector finite_difference;
};

/// Per-coordinate error |fd - exact| / max(|fd|, |exact|, floor).
double coordinate_error(double fd, double exact, double floor);

/// Central differences of `objective` at theta, one coordinate at a time,
/// compared with `exact`. `floor` bounds the denominator from below so that
/// coordinates whose derivative is numerically zero are compared in absolute
/// terms.
FdReport fd_check(const Objective& objective, const ParamVector& theta, const ParamVector& exact, double h = 1e-5,
                  double floor = 1e-8);

/// Composed adapt-then-evaluate objective theta -> outer(adapt(theta)), with
/// `steps` plain gradient steps on `inner` at rate alpha.
Objective adapted_objective(LossFunction inner, LossFunction outer, double alpha, int steps);

/// Smallest |pre-activation| met by any relu while evaluating f at theta
/// (infinity for networks without hidden layers).
double relu_margin(const LossFunction& f, const ParamVector& theta);
/// The same minimised over every point an adapt-then-evaluate objective
/// visits: the inner iterates of `trace` and the adapted parameters. A
/// central difference with step h is only meaningful when this margin is well
/// above h times the input scale, otherwise a relu kink lies inside the
/// stencil.
double adapted_relu_margin(const LossFunction& inner, const LossFunction& outer, const AdaptTrace& trace);

/// Agreement rate of predicted and true labels, maximised over one-to-one
/// matchings between the two label sets. Exhaustive for max(K, K*) <= 6;
/// beyond that `approximate` must be set and a greedy matching is used.
double skill_accuracy(std::span<const int> predicted, std::span<const int> truth, std::size_t K, std::size_t K_true,
                      bool approximate = false);

/// Number of label changes divided by the sequence length (T >= 2).
double switch_rate(std::span<const int> labels);

/// Mean squared error per action dimension.
double action_mse(const Matrix& predicted, const Matrix& expert);

struct AdaptationMse {
  double pre = 0.0;
  double post = 0.0;
  HierarchicalParams adapted;
};

/// Adapts on the first `shots` support trajectories and scores
/// predict_action on every query trajectory, before and after.
AdaptationMse adaptation_mse(const HierarchicalParams& params, const TaskDataset& task, std::size_t shots, double alpha,
                             int steps, double lambda_aux, AdaptScope scope = AdaptScope::all);

/// Policy driven by predict_action on adapted parameters.
Policy hierarchical_policy(const HierarchicalParams& adapted);
/// Noise-free expert of `spec`.
Policy expert_policy(const TaskSpec& spec);

struct RolloutStats {
  double success_rate = 0.0;
  double switch_rate = 0.0;
};

/// Closed-loop episodes from starts drawn with `seed`; success means every
/// waypoint is reached within tolerance before `horizon` steps.
RolloutStats rollout_stats(const Policy& policy, const TaskSpec& spec, std::size_t episodes, std::size_t horizon,
                           std::uint64_t seed);
double rollout_success(const Policy& policy, const TaskSpec& spec, std::size_t episodes, std::size_t horizon,
                       std::uint64_t seed);

}  // namespace dmil
