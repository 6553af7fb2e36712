#pragma once

// Comparison methods built from the dmil phases: a monolithic MAML policy,
// the DMIL-High / DMIL-Low ablations and a non-meta hard-EM learner.

#include <span>
#include <vector>

#include "dmil/dmil.hpp"
#include "dmil/optim.hpp"

namespace dmil {

struct MamlOutcome {
  /// Sum over tasks in ascending task order.
  ParamVector gradient;
  std::size_t task_count = 0;
  double loss = 0.0;
  bool diverged = false;
};

/// Single-policy MAML on the same task batches DMIL consumes: the inner loop
/// adapts on the LI batch (tau[1]) and the outer loss uses the LO batch
/// (tau[3]), so that with K = 1 DMIL's skill update coincides with it.
MamlOutcome maml_meta_gradient(const MlpShape& shape, const ParamVector& theta, std::span<const TaskBatches> tasks,
                               const DmilConfig& config);
ParamVector maml_train_step(const MlpShape& shape, const ParamVector& theta, std::span<const TaskBatches> tasks,
                            const DmilConfig& config);

/// Meta-learns only the high-level network; skills get plain gradients of
/// the LO loss at their shared parameters.
DmilConfig dmil_high_config(DmilConfig config);
/// Meta-learns only the skills; the high-level network gets plain gradients
/// of the HO loss.
DmilConfig dmil_low_config(DmilConfig config);

HierarchicalParams dmil_high_step(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                  const DmilConfig& config);
HierarchicalParams dmil_low_step(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                 const DmilConfig& config);

struct EmOutcome {
  double high_loss = 0.0;
  double low_loss = 0.0;
  double grad_norm_high = 0.0;
  /// Norm of all skill gradients stacked together.
  double grad_norm_skills = 0.0;
};

/// One hard-EM alternation on pooled data: label with the skills, step the
/// high-level network on the cross-entropy, re-partition with the updated
/// high-level network, step each skill on its part.
EmOutcome em_only_step(HierarchicalParams& params, const Batch& pooled, double lambda_aux, MetaOptimizer& optimizer);

struct EmTrainResult {
  HierarchicalParams params;
  /// high + low loss of every alternation, in order.
  std::vector<double> losses;
};

/// `epochs` passes over `pooled`, plain gradient steps at rate `lr`.
EmTrainResult em_only_train(const HierarchicalParams& params, std::span<const Batch> pooled, int epochs, double lr,
                            double lambda_aux);

}  // namespace dmil
