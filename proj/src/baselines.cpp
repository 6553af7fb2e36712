#include "dmil/baselines.hpp"

#include <cmath>

namespace dmil {

MamlOutcome maml_meta_gradient(const MlpShape& shape, const ParamVector& theta, std::span<const TaskBatches> tasks,
                               const DmilConfig& config) {
  require(!tasks.empty(), "meta step needs at least one task");
  require(theta.size() == shape.param_count(), "parameter count does not match network shape");
  MamlOutcome out;
  out.gradient = ParamVector(theta.size());
  for (const auto& task : tasks) {
    const LossFunction inner = skill_loss(shape, task.tau[1].pairs);
    const AdaptTrace trace = inner_adapt(inner, theta, config.alpha, config.inner_steps);
    const ValueAndGrad outer = value_and_grad(skill_loss(shape, task.tau[3].pairs), trace.adapted);
    out.gradient += meta_grad(trace, outer.gradient, inner, config.mode);
    out.loss += outer.value;
    out.diverged = out.diverged || trace.diverged;
    ++out.task_count;
  }
  out.loss /= static_cast<double>(tasks.size());
  return out;
}

ParamVector maml_train_step(const MlpShape& shape, const ParamVector& theta, std::span<const TaskBatches> tasks,
                            const DmilConfig& config) {
  const MamlOutcome m = maml_meta_gradient(shape, theta, tasks, config);
  const double rate =
      config.reduce == OuterReduce::mean ? config.beta / static_cast<double>(m.task_count) : config.beta;
  ParamVector next = theta.descend(rate, m.gradient);
  if (!next.all_finite()) throw NumericError("maml", "outer update produced non-finite parameters");
  return next;
}

DmilConfig dmil_high_config(DmilConfig config) {
  config.meta_low = false;
  return config;
}

DmilConfig dmil_low_config(DmilConfig config) {
  config.meta_high = false;
  return config;
}

HierarchicalParams dmil_high_step(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                  const DmilConfig& config) {
  return meta_train_step(params, tasks, dmil_high_config(config));
}

HierarchicalParams dmil_low_step(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                 const DmilConfig& config) {
  return meta_train_step(params, tasks, dmil_low_config(config));
}

EmOutcome em_only_step(HierarchicalParams& params, const Batch& pooled, double lambda_aux, MetaOptimizer& optimizer) {
  require(pooled.size() > 0, "em_only_step needs pooled data");
  EmOutcome out;
  const SkillLabels labels = hard_labels(pooled.pairs, params.skill_shape, params.skills);
  ValueAndGrad high = value_and_grad(high_loss(params.high_shape, pooled, labels, lambda_aux), params.high);
  out.high_loss = high.value;
  out.grad_norm_high = high.gradient.norm();
  optimizer.step_high(params.high, high.gradient);
  const Partition partition = partition_by_skill(params.high_shape, params.high, pooled.pairs);
  double weighted = 0.0;
  for (std::size_t k = 0; k < params.K(); ++k) {
    if (partition.parts[k].empty()) continue;
    ValueAndGrad low = value_and_grad(skill_loss(params.skill_shape, partition.parts[k]), params.skills[k]);
    weighted += low.value * static_cast<double>(partition.parts[k].size());
    out.grad_norm_skills += low.gradient.values().squaredNorm();
    optimizer.step_skill(k, params.skills[k], low.gradient);
  }
  out.low_loss = weighted / static_cast<double>(pooled.size());
  out.grad_norm_skills = std::sqrt(out.grad_norm_skills);
  return out;
}

EmTrainResult em_only_train(const HierarchicalParams& params, std::span<const Batch> pooled, int epochs, double lr,
                            double lambda_aux) {
  require(epochs >= 0, "epochs must be >= 0");
  EmTrainResult out{params, {}};
  MetaOptimizer sgd(OptimizerKind::sgd, lr, params.K());
  for (int e = 0; e < epochs; ++e) {
    for (const auto& batch : pooled) {
      const EmOutcome step = em_only_step(out.params, batch, lambda_aux, sgd);
      out.losses.push_back(step.high_loss + step.low_loss);
    }
  }
  return out;
}

}  // namespace dmil
