#include "dmil/dmil.hpp"

#include <exception>
#include <thread>

namespace dmil {

Matrix SkillLabels::one_hot() const {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(index.size()), static_cast<Eigen::Index>(K));
  for (std::size_t t = 0; t < index.size(); ++t) m(static_cast<Eigen::Index>(t), index[t]) = 1.0;
  return m;
}

MetaGradient MetaGradient::zeros(const HierarchicalParams& params) {
  MetaGradient g;
  g.high = ParamVector(params.high.size());
  for (const auto& s : params.skills) g.skills.emplace_back(s.size());
  return g;
}

void MetaGradient::add(const MetaGradient& other) {
  require(skills.size() == other.skills.size(), "MetaGradient skill counts differ");
  high += other.high;
  for (std::size_t k = 0; k < skills.size(); ++k) skills[k] += other.skills[k];
  task_count += other.task_count;
}

SkillLabels hard_labels(const PairSet& batch, const MlpShape& skill_shape, std::span<const ParamVector> skills) {
  require(!skills.empty(), "hard_labels needs K >= 1");
  SkillLabels labels;
  labels.K = skills.size();
  labels.index.assign(batch.size(), 0);
  if (batch.empty()) return labels;
  Vector best = Vector::Constant(static_cast<Eigen::Index>(batch.size()), std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < skills.size(); ++k) {
    const Matrix predicted = mlp_forward(skill_shape, skills[k], batch.states);
    const Vector err = (batch.actions - predicted).rowwise().squaredNorm();
    for (Eigen::Index t = 0; t < err.size(); ++t) {
      // Strict comparison keeps the lowest index on ties.
      if (err[t] < best[t]) {
        best[t] = err[t];
        labels.index[static_cast<std::size_t>(t)] = static_cast<int>(k);
      }
    }
  }
  return labels;
}

double aux_loss(const Matrix& probs) {
  require(probs.rows() >= 2, "aux_loss needs T >= 2");
  const Eigen::Index T = probs.rows();
  const double overlap = probs.topRows(T - 1).cwiseProduct(probs.bottomRows(T - 1)).sum();
  return 1.0 - overlap / static_cast<double>(T - 1);
}

double aux_loss(const Matrix& probs, const Batch& batch) {
  const auto pairs = batch.neighbour_pairs();
  require(!pairs.empty(), "aux_loss needs at least one trajectory with T >= 2");
  double overlap = 0.0;
  for (auto [a, b] : pairs)
    overlap += probs.row(static_cast<Eigen::Index>(a)).dot(probs.row(static_cast<Eigen::Index>(b)));
  return 1.0 - overlap / static_cast<double>(pairs.size());
}

LossFunction high_loss(const MlpShape& high_shape, const Batch& batch, const SkillLabels& labels, double lambda_aux) {
  require(batch.size() > 0, "high_loss needs a nonempty batch");
  require(labels.size() == batch.size(), "labels do not align with the batch");
  require(labels.K == high_shape.output_dim(), "label K differs from the high-level output dimension");
  const auto n = static_cast<double>(batch.size());
  std::vector<Eigen::Index> first, second;
  if (lambda_aux != 0.0) {
    for (auto [a, b] : batch.neighbour_pairs()) {
      first.push_back(static_cast<Eigen::Index>(a));
      second.push_back(static_cast<Eigen::Index>(b));
    }
  }
  return {"high",
          [high_shape, states = batch.pairs.states, targets = labels.one_hot(), n, lambda_aux, first,
           second](ad::Var params) {
            ad::Tape& tape = params.tape();
            const ad::Var logp = ad::log_softmax_rows(mlp_forward(high_shape, params, tape.constant(states)));
            ad::Var loss = ad::scale(ad::sum(ad::mul(logp, tape.constant(targets))), -1.0 / n);
            if (lambda_aux != 0.0 && !first.empty()) {
              const ad::Var p = ad::exp(logp);
              const ad::Var overlap = ad::sum(ad::mul(ad::gather_rows(p, first), ad::gather_rows(p, second)));
              const ad::Var aux = ad::add_scalar(ad::scale(overlap, -1.0 / static_cast<double>(first.size())), 1.0);
              loss = ad::add(loss, ad::scale(aux, lambda_aux));
            }
            return loss;
          }};
}

LossFunction skill_loss(const MlpShape& skill_shape, const PairSet& pairs) {
  require(!pairs.empty(), "skill_loss needs at least one pair");
  const auto n = static_cast<double>(pairs.size());
  return {"skill", [skill_shape, states = pairs.states, actions = pairs.actions, n](ad::Var params) {
            ad::Tape& tape = params.tape();
            const ad::Var residual = ad::sub(mlp_forward(skill_shape, params, tape.constant(states)), tape.constant(actions));
            return ad::scale(ad::sum(ad::mul(residual, residual)), 1.0 / n);
          }};
}

HighInner hi_step(const HierarchicalParams& params, const Batch& tau1, double alpha, int steps, double lambda_aux) {
  require(tau1.size() > 0, "hi_step needs a nonempty batch");
  HighInner out;
  out.labels = hard_labels(tau1.pairs, params.skill_shape, params.skills);
  out.loss = high_loss(params.high_shape, tau1, out.labels, lambda_aux);
  out.trace = inner_adapt(out.loss, params.high, alpha, steps);
  return out;
}

Partition partition_by_skill(const MlpShape& high_shape, const ParamVector& high, const PairSet& pairs) {
  Partition p;
  const std::size_t K = high_shape.output_dim();
  p.rows.resize(K);
  if (!pairs.empty()) {
    const std::vector<int> z = row_argmax(mlp_forward(high_shape, high, pairs.states));
    for (std::size_t t = 0; t < z.size(); ++t) p.rows[static_cast<std::size_t>(z[t])].push_back(t);
  }
  for (std::size_t k = 0; k < K; ++k) p.parts.push_back(pairs.select(p.rows[k]));
  return p;
}

std::vector<SkillInner> li_step(const HierarchicalParams& params, const Partition& partition, double alpha, int steps) {
  require(partition.K() == params.K(), "partition K differs from the number of skills");
  std::vector<SkillInner> out;
  out.reserve(params.K());
  for (std::size_t k = 0; k < params.K(); ++k) {
    SkillInner s;
    if (partition.parts[k].empty()) {
      s.trace = AdaptTrace::identity(params.skills[k]);
    } else {
      s.loss = skill_loss(params.skill_shape, partition.parts[k]);
      s.trace = inner_adapt(*s.loss, params.skills[k], alpha, steps);
    }
    out.push_back(std::move(s));
  }
  return out;
}

HighOuter ho_grad(const HighInner& inner, const HierarchicalParams& params, const Batch& tau3,
                  std::span<const ParamVector> label_skills, double lambda_aux, MetaGradMode mode) {
  const SkillLabels labels = hard_labels(tau3.pairs, params.skill_shape, label_skills);
  const LossFunction outer = high_loss(params.high_shape, tau3, labels, lambda_aux);
  ValueAndGrad vg = value_and_grad(outer, inner.trace.adapted);
  HighOuter out;
  out.loss = vg.value;
  out.gradient = meta_grad(inner.trace, vg.gradient, inner.loss, mode);
  return out;
}

LowOuter lo_grad(const std::vector<SkillInner>& inner, const HierarchicalParams& params, const ParamVector& adapted_high,
                 const PairSet& tau4, MetaGradMode mode) {
  require(inner.size() == params.K(), "one LI trace per skill expected");
  const Partition partition = partition_by_skill(params.high_shape, adapted_high, tau4);
  LowOuter out;
  double weighted = 0.0;
  for (std::size_t k = 0; k < params.K(); ++k) {
    const PairSet& part = partition.parts[k];
    if (part.empty()) {
      out.gradients.emplace_back(params.skills[k].size());
      continue;
    }
    ValueAndGrad vg = value_and_grad(skill_loss(params.skill_shape, part), inner[k].trace.adapted);
    weighted += vg.value * static_cast<double>(part.size());
    if (inner[k].loss) {
      out.gradients.push_back(meta_grad(inner[k].trace, vg.gradient, *inner[k].loss, mode));
    } else {
      out.gradients.push_back(std::move(vg.gradient));
    }
  }
  out.loss = tau4.empty() ? 0.0 : weighted / static_cast<double>(tau4.size());
  return out;
}

TaskOutcome task_meta_gradient(const HierarchicalParams& params, const TaskBatches& batches, const DmilConfig& config,
                               std::size_t task_index, const PhaseObserver& observer) {
  auto observe = [&](Phase phase) {
    if (observer) observer(phase, task_index, params);
  };
  TaskOutcome out;

  observe(Phase::hi);
  HighInner hi;
  if (config.meta_high) {
    hi = hi_step(params, batches.tau[0], config.alpha, config.inner_steps, config.lambda_aux);
  } else {
    hi.trace = AdaptTrace::identity(params.high);
  }

  observe(Phase::li);
  std::vector<SkillInner> li;
  if (config.meta_low) {
    li = li_step(params, partition_by_skill(params.high_shape, hi.trace.adapted, batches.tau[1].pairs), config.alpha,
                 config.inner_steps);
  } else {
    for (const auto& s : params.skills) li.push_back({AdaptTrace::identity(s), std::nullopt});
  }

  observe(Phase::ho);
  std::vector<ParamVector> adapted_skills;
  for (const auto& s : li) adapted_skills.push_back(s.trace.adapted);
  const std::span<const ParamVector> label_skills =
      config.ho_labels == HoLabels::adapted ? std::span<const ParamVector>(adapted_skills)
                                            : std::span<const ParamVector>(params.skills);
  HighOuter ho = ho_grad(hi, params, batches.tau[2], label_skills, config.lambda_aux, config.mode);

  observe(Phase::lo);
  LowOuter lo = lo_grad(li, params, hi.trace.adapted, batches.tau[3].pairs, config.mode);

  out.gradient.high = std::move(ho.gradient);
  out.gradient.skills = std::move(lo.gradients);
  out.gradient.task_count = 1;
  out.high_loss = ho.loss;
  out.low_loss = lo.loss;
  out.diverged = hi.trace.diverged;
  for (const auto& s : li) out.diverged = out.diverged || s.trace.diverged;
  return out;
}

StepOutcome accumulate_meta_gradient(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                     const DmilConfig& config, unsigned threads, const PhaseObserver& observer) {
  require(!tasks.empty(), "meta step needs at least one task");
  params.validate();
  std::vector<std::optional<TaskOutcome>> outcomes(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  auto run = [&](std::size_t i) {
    try {
      outcomes[i] = task_meta_gradient(params, tasks[i], config, i, observer);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1U), tasks.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < tasks.size(); i += workers) run(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  StepOutcome out;
  out.gradient = MetaGradient::zeros(params);
  for (const auto& o : outcomes) {
    out.gradient.add(o->gradient);
    out.high_loss += o->high_loss;
    out.low_loss += o->low_loss;
    out.diverged = out.diverged || o->diverged;
  }
  out.high_loss /= static_cast<double>(tasks.size());
  out.low_loss /= static_cast<double>(tasks.size());
  return out;
}

HierarchicalParams apply_meta_gradient(const HierarchicalParams& params, const MetaGradient& gradient, double beta,
                                       OuterReduce reduce) {
  require(gradient.skills.size() == params.K(), "meta-gradient skill count differs from params");
  require(gradient.task_count > 0, "meta-gradient holds no tasks");
  const double rate = reduce == OuterReduce::mean ? beta / static_cast<double>(gradient.task_count) : beta;
  HierarchicalParams next = params;
  next.high = params.high.descend(rate, gradient.high);
  for (std::size_t k = 0; k < params.K(); ++k) next.skills[k] = params.skills[k].descend(rate, gradient.skills[k]);
  if (!next.high.all_finite()) throw NumericError("high", "outer update produced non-finite parameters");
  for (const auto& s : next.skills)
    if (!s.all_finite()) throw NumericError("skill", "outer update produced non-finite parameters");
  return next;
}

HierarchicalParams meta_train_step(const HierarchicalParams& params, std::span<const TaskBatches> tasks,
                                   const DmilConfig& config, const PhaseObserver& observer) {
  const StepOutcome step = accumulate_meta_gradient(params, tasks, config, 1, observer);
  return apply_meta_gradient(params, step.gradient, config.beta, config.reduce);
}

HierarchicalParams few_shot_adapt(const HierarchicalParams& params, std::span<const Trajectory> demos, double alpha,
                                  int steps, double lambda_aux, AdaptScope scope) {
  require(!demos.empty(), "few_shot_adapt needs at least one demonstration");
  HierarchicalParams adapted = params;
  if (scope == AdaptScope::none) return adapted;
  const Batch batch = Batch::stack(demos);
  if (scope == AdaptScope::all || scope == AdaptScope::high_only)
    adapted.high = hi_step(params, batch, alpha, steps, lambda_aux).trace.adapted;
  if (scope == AdaptScope::all || scope == AdaptScope::skills_only) {
    const auto li = li_step(params, partition_by_skill(params.high_shape, adapted.high, batch.pairs), alpha, steps);
    for (std::size_t k = 0; k < li.size(); ++k) adapted.skills[k] = li[k].trace.adapted;
  }
  return adapted;
}

std::pair<Matrix, std::vector<int>> predict_actions(const HierarchicalParams& adapted, const Matrix& states) {
  std::vector<int> z = row_argmax(mlp_forward(adapted.high_shape, adapted.high, states));
  Matrix actions(states.rows(), static_cast<Eigen::Index>(adapted.skill_shape.output_dim()));
  for (std::size_t k = 0; k < adapted.K(); ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < z.size(); ++t)
      if (z[t] == static_cast<int>(k)) rows.push_back(t);
    if (rows.empty()) continue;
    Matrix sub(static_cast<Eigen::Index>(rows.size()), states.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = states.row(static_cast<Eigen::Index>(rows[i]));
    const Matrix out = mlp_forward(adapted.skill_shape, adapted.skills[k], sub);
    for (std::size_t i = 0; i < rows.size(); ++i) actions.row(static_cast<Eigen::Index>(rows[i])) = out.row(static_cast<Eigen::Index>(i));
  }
  return {std::move(actions), std::move(z)};
}

std::pair<Vector, int> predict_action(const HierarchicalParams& adapted, const Vector& state) {
  auto [actions, z] = predict_actions(adapted, state.transpose());
  return {actions.row(0).transpose(), z[0]};
}

}  // namespace dmil
