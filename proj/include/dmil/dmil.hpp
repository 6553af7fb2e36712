#pragma once

// Dual meta imitation learning: hard-EM skill labelling, the four phases
// (high inner, low inner, high outer, low outer), the simultaneous outer
// update and test-time few-shot adaptation.

#include <array>
#include <optional>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "dmil/autodiff.hpp"
#include "dmil/data.hpp"
#include "dmil/policies.hpp"

namespace dmil {

/// One skill index per timestep (the position of the 1 in a one-hot row).
struct SkillLabels {
  std::size_t K = 1;
  std::vector<int> index;

  std::size_t size() const { return index.size(); }
  Matrix one_hot() const;
};

/// Pairs routed to each of K skills. `rows[k]` lists source rows, `parts[k]`
/// holds the pairs themselves in the same order.
struct Partition {
  std::vector<std::vector<std::size_t>> rows;
  std::vector<PairSet> parts;

  std::size_t K() const { return parts.size(); }
};

/// Summed per-component gradients of the tasks seen so far.
struct MetaGradient {
  ParamVector high;
  std::vector<ParamVector> skills;
  std::size_t task_count = 0;

  static MetaGradient zeros(const HierarchicalParams& params);
  /// Adds another task's (or partial sum's) gradients.
  void add(const MetaGradient& other);
};

enum class HoLabels { adapted, initial };
enum class OuterReduce { sum, mean };

struct DmilConfig {
  double alpha = 5e-4;
  double beta = 1e-4;
  int inner_steps = 3;
  double lambda_aux = 0.1;
  MetaGradMode mode = MetaGradMode::exact;
  HoLabels ho_labels = HoLabels::adapted;
  OuterReduce reduce = OuterReduce::mean;
  /// Ablation switches: when false the component skips its inner update and
  /// receives a plain gradient at the shared initial parameters.
  bool meta_high = true;
  bool meta_low = true;
};

/// The four trajectory batches of one task: HI, LI, HO and LO in that order.
struct TaskBatches {
  std::array<Batch, 4> tau;
};

/// label_t = argmin_k |a_t - skill_k(s_t)|^2, lowest k on ties.
SkillLabels hard_labels(const PairSet& batch, const MlpShape& skill_shape, std::span<const ParamVector> skills);

/// Mean expected switch probability 1 - sum_k p_t(k) p_{t+1}(k) over
/// consecutive rows of one probability sequence (T >= 2).
double aux_loss(const Matrix& probs);
/// Same, averaged over the within-trajectory neighbour pairs of `batch`.
double aux_loss(const Matrix& probs, const Batch& batch);

/// Mean cross-entropy of the high-level softmax against `labels`, plus
/// lambda_aux times the switching surrogate. Labels are constants.
LossFunction high_loss(const MlpShape& high_shape, const Batch& batch, const SkillLabels& labels, double lambda_aux);
/// Mean over pairs of |a - skill(s)|^2.
LossFunction skill_loss(const MlpShape& skill_shape, const PairSet& pairs);

struct HighInner {
  AdaptTrace trace;
  SkillLabels labels;
  LossFunction loss;
};

/// Labels tau1 with the frozen skills, then adapts the high-level network.
HighInner hi_step(const HierarchicalParams& params, const Batch& tau1, double alpha, int steps, double lambda_aux);

/// Routes every pair to argmax_k of the high-level softmax (lowest k on ties).
Partition partition_by_skill(const MlpShape& high_shape, const ParamVector& high, const PairSet& pairs);

struct SkillInner {
  AdaptTrace trace;
  /// Absent when the skill received no pairs (identity trace).
  std::optional<LossFunction> loss;
};

/// Adapts each skill on its own part of the partition.
std::vector<SkillInner> li_step(const HierarchicalParams& params, const Partition& partition, double alpha, int steps);

struct HighOuter {
  ParamVector gradient;
  double loss = 0.0;
};

/// High-level meta-gradient: labels tau3 with `label_skills`, evaluates the
/// high loss at the adapted high-level parameters and pulls its gradient back
/// through the HI trace.
HighOuter ho_grad(const HighInner& inner, const HierarchicalParams& params, const Batch& tau3,
                  std::span<const ParamVector> label_skills, double lambda_aux, MetaGradMode mode);

struct LowOuter {
  std::vector<ParamVector> gradients;
  /// Pair-weighted mean of the per-skill losses, i.e. the pooled MSE of tau4.
  double loss = 0.0;
};

/// Skill meta-gradients: partitions tau4 with the adapted high-level network
/// and pulls each skill's loss gradient back through its LI trace. Skills
/// that receive no tau4 pairs get zero vectors.
LowOuter lo_grad(const std::vector<SkillInner>& inner, const HierarchicalParams& params, const ParamVector& adapted_high,
                 const PairSet& tau4, MetaGradMode mode);

enum class Phase { hi, li, ho, lo };

/// Called with the parameters each phase reads. Must be thread safe when
/// tasks run in parallel.
using PhaseObserver = std::function<void(Phase, std::size_t task, const HierarchicalParams&)>;

struct TaskOutcome {
  MetaGradient gradient;
  double high_loss = 0.0;
  double low_loss = 0.0;
  bool diverged = false;
};

/// Runs HI, LI, HO and LO for one task against `params` (never modified).
TaskOutcome task_meta_gradient(const HierarchicalParams& params, const TaskBatches& batches, const DmilConfig& config,
                               std::size_t task_index = 0, const PhaseObserver& observer = {});

struct StepOutcome {
  MetaGradient gradient;
  /// Means over tasks.
  double high_loss = 0.0;
  double low_loss = 0.0;
  bool diverged = false;
};

/// Task gradients summed in ascending task order. With threads > 1 tasks run
/// concurrently; the reduction order stays fixed.
StepOutcome accumulate_meta_gradient(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                     const DmilConfig& config, unsigned threads = 1,
                                     const PhaseObserver& observer = {});

/// theta' = theta - beta * g for every component at once, g being the sum or
/// the mean of the task gradients.
HierarchicalParams apply_meta_gradient(const HierarchicalParams& params, const MetaGradient& gradient, double beta,
                                       OuterReduce reduce);

HierarchicalParams meta_train_step(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                   const DmilConfig& config, const PhaseObserver& observer = {});

enum class AdaptScope { all, high_only, skills_only, none };

/// HI then LI on the same demonstrations. Returns (lambda_h, lambda_l).
HierarchicalParams few_shot_adapt(const HierarchicalParams& params, std::span<const Trajectory> demos, double alpha,
                                  int steps, double lambda_aux, AdaptScope scope = AdaptScope::all);

/// z = argmax of the high-level softmax, action = skill z's output.
std::pair<Vector, int> predict_action(const HierarchicalParams& adapted, const Vector& state);
/// Batched predict_action over the rows of `states`.
std::pair<Matrix, std::vector<int>> predict_actions(const HierarchicalParams& adapted, const Matrix& states);

}  // namespace dmil
