#include "dmil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dmil {

double coordinate_error(double fd, double exact, double floor) {
  const double denom = std::max({std::abs(fd), std::abs(exact), floor});
  return std::abs(fd - exact) / denom;
}

FdReport fd_check(const Objective& objective, const ParamVector& theta, const ParamVector& exact, double h,
                  double floor) {
  require(theta.size() <= 500, "fd_check is limited to 500 parameters");
  require(exact.size() == theta.size(), "exact gradient length differs from parameters");
  require(h > 0.0, "fd step must be positive");
  FdReport report;
  report.finite_difference = ParamVector(theta.size());
  ParamVector probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + h;
    const double plus = objective(probe);
    probe[i] = theta[i] - h;
    const double minus = objective(probe);
    probe[i] = theta[i];
    const double fd = (plus - minus) / (2.0 * h);
    report.finite_difference[i] = fd;
    const double err = coordinate_error(fd, exact[i], floor);
    if (i == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

Objective adapted_objective(LossFunction inner, LossFunction outer, double alpha, int steps) {
  return [inner = std::move(inner), outer = std::move(outer), alpha, steps](const ParamVector& theta) {
    return evaluate(outer, inner_adapt(inner, theta, alpha, steps).adapted);
  };
}

double relu_margin(const LossFunction& f, const ParamVector& theta) {
  ad::Tape tape(false);
  f.build(tape.parameter(theta));
  return tape.min_relu_margin();
}

double adapted_relu_margin(const LossFunction& inner, const LossFunction& outer, const AdaptTrace& trace) {
  double m = relu_margin(outer, trace.adapted);
  for (std::size_t j = 0; j < trace.steps.size(); ++j) m = std::min(m, relu_margin(inner, trace.iterate(j)));
  return m;
}

double skill_accuracy(std::span<const int> predicted, std::span<const int> truth, std::size_t K, std::size_t K_true,
                      bool approximate) {
  require(predicted.size() == truth.size(), "skill_accuracy needs equal lengths");
  require(K >= 1 && K_true >= 1, "label counts must be >= 1");
  if (predicted.empty()) return 1.0;
  const std::size_t n = std::max(K, K_true);
  require(n <= 6 || approximate, "skill_accuracy with more than 6 labels needs the approximate flag");
  // confusion[t][p]: steps with true label t predicted as p.
  std::vector<std::vector<double>> confusion(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && static_cast<std::size_t>(truth[i]) < K_true, "true label out of range");
    require(predicted[i] >= 0 && static_cast<std::size_t>(predicted[i]) < K, "predicted label out of range");
    confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])] += 1.0;
  }
  double best = 0.0;
  if (n <= 6) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double agree = 0.0;
      for (std::size_t t = 0; t < n; ++t) agree += confusion[t][perm[t]];
      best = std::max(best, agree);
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    std::vector<bool> used_t(n, false), used_p(n, false);
    for (std::size_t round = 0; round < n; ++round) {
      double top = -1.0;
      std::size_t bt = 0, bp = 0;
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t p = 0; p < n; ++p)
          if (!used_t[t] && !used_p[p] && confusion[t][p] > top) {
            top = confusion[t][p];
            bt = t;
            bp = p;
          }
      used_t[bt] = used_p[bp] = true;
      best += top;
    }
  }
  return best / static_cast<double>(truth.size());
}

double switch_rate(std::span<const int> labels) {
  require(labels.size() >= 2, "switch_rate needs T >= 2");
  std::size_t switches = 0;
  for (std::size_t t = 0; t + 1 < labels.size(); ++t)
    if (labels[t + 1] != labels[t]) ++switches;
  return static_cast<double>(switches) / static_cast<double>(labels.size());
}

double action_mse(const Matrix& predicted, const Matrix& expert) {
  require(predicted.rows() == expert.rows() && predicted.cols() == expert.cols(), "action_mse shape mismatch");
  require(predicted.size() > 0, "action_mse needs data");
  return (predicted - expert).squaredNorm() / static_cast<double>(predicted.size());
}

namespace {

double query_mse(const HierarchicalParams& params, const TaskDataset& task) {
  const Batch query = Batch::stack(task.query);
  return action_mse(predict_actions(params, query.pairs.states).first, query.pairs.actions);
}

}  // namespace

AdaptationMse adaptation_mse(const HierarchicalParams& params, const TaskDataset& task, std::size_t shots, double alpha,
                             int steps, double lambda_aux, AdaptScope scope) {
  require(shots >= 1 && shots <= task.support.size(), "shots must lie in [1, |support|]");
  AdaptationMse out;
  out.pre = query_mse(params, task);
  out.adapted = few_shot_adapt(params, std::span<const Trajectory>(task.support.data(), shots), alpha, steps,
                               lambda_aux, scope);
  out.post = query_mse(out.adapted, task);
  return out;
}

Policy hierarchical_policy(const HierarchicalParams& adapted) {
  return [adapted](const Vector& s) { return predict_action(adapted, s); };
}

Policy expert_policy(const TaskSpec& spec) {
  return [spec](const Vector& s) { return expert_action(spec, s, nullptr); };
}

RolloutStats rollout_stats(const Policy& policy, const TaskSpec& spec, std::size_t episodes, std::size_t horizon,
                           std::uint64_t seed) {
  require(episodes >= 1, "rollout needs at least one episode");
  RolloutStats stats;
  std::size_t counted = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    SplitMix64 rng(derive_seed(seed, e));
    const Rollout r = rollout_policy(spec, policy, sample_start(spec, rng), horizon);
    if (r.success) stats.success_rate += 1.0;
    if (r.skills.size() >= 2) {
      stats.switch_rate += switch_rate(r.skills);
      ++counted;
    }
  }
  stats.success_rate /= static_cast<double>(episodes);
  if (counted > 0) stats.switch_rate /= static_cast<double>(counted);
  return stats;
}

double rollout_success(const Policy& policy, const TaskSpec& spec, std::size_t episodes, std::size_t horizon,
                       std::uint64_t seed) {
  return rollout_stats(policy, spec, episodes, horizon, seed).success_rate;
}

}  // namespace dmil
