#include "dmil/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>

#include "dmil/baselines.hpp"
#include "dmil/eval.hpp"
#include "dmil/optim.hpp"

namespace dmil {

using nlohmann::json;

namespace {

const std::vector<std::pair<Method, std::string>>& method_names() {
  static const std::vector<std::pair<Method, std::string>> names{
      {Method::dmil, "dmil"},         {Method::dmil_noaux, "dmil_noaux"}, {Method::dmil_high, "dmil_high"},
      {Method::dmil_low, "dmil_low"}, {Method::maml, "maml"},             {Method::em_only, "em_only"}};
  return names;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MlpShape shape_of(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  MlpShape s;
  s.layer_sizes.push_back(in);
  s.layer_sizes.insert(s.layer_sizes.end(), hidden.begin(), hidden.end());
  s.layer_sizes.push_back(out);
  return s;
}

double stacked_norm(const std::vector<ParamVector>& parts, double scale) {
  double sq = 0.0;
  for (const auto& p : parts) sq += p.values().squaredNorm();
  return scale * std::sqrt(sq);
}

}  // namespace

Method parse_method(const std::string& name) {
  for (const auto& [m, n] : method_names())
    if (n == name) return m;
  std::string valid;
  for (const auto& [m, n] : method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown method '" + name + "'; valid methods: " + valid);
}

std::string method_name(Method method) {
  for (const auto& [m, n] : method_names())
    if (m == method) return n;
  return "?";
}

Benchmark make_benchmark(const DataConfig& c) {
  Benchmark b;
  for (std::size_t i = 0; i < c.n_train_tasks; ++i) {
    const TaskSpec spec = sample_task(c.train_seed_base + i, c.noise_std);
    b.train.push_back(make_dataset(spec, c.n_support, c.n_query, c.horizon, spec.seed));
  }
  for (std::size_t i = 0; i < c.n_test_tasks; ++i) {
    const TaskSpec spec = sample_task(c.test_seed_base + i, c.noise_std);
    b.test.push_back(make_dataset(spec, c.n_support, c.n_query, c.horizon, spec.seed));
  }
  return b;
}

DmilConfig method_config(const ExperimentConfig& config, Method method) {
  DmilConfig c = config.dmil.core;
  switch (method) {
    case Method::dmil_noaux: c.lambda_aux = 0.0; break;
    case Method::dmil_high: c = dmil_high_config(c); break;
    case Method::dmil_low: c = dmil_low_config(c); break;
    case Method::maml: c.lambda_aux = 0.0; break;
    default: break;
  }
  return c;
}

HierarchicalParams initial_params(const ExperimentConfig& config, Method method, std::uint64_t seed) {
  const MlpShape skill = shape_of(kStateDim, config.model.skill_hidden, kActionDim);
  const double gain = config.model.skill_output_gain;
  if (method == Method::maml)
    return HierarchicalParams::init(shape_of(kStateDim, {}, 1), skill, derive_seed(seed, 2), gain);
  return HierarchicalParams::init(shape_of(kStateDim, config.model.high_hidden, config.model.K), skill,
                                  derive_seed(seed, 2), gain);
}

Schedule::Schedule(const ExperimentConfig& config, std::size_t train_tasks, std::uint64_t seed)
    : tasks_per_step_(config.dmil.tasks_per_step),
      batch_trajectories_(config.dmil.batch_trajectories),
      rng_(derive_seed(seed, 1)) {
  require(tasks_per_step_ >= 1 && tasks_per_step_ <= train_tasks, "tasks_per_step must lie in [1, train tasks]");
  for (std::size_t i = 0; i < train_tasks; ++i) samplers_.emplace_back(derive_seed(seed, 100 + i));
}

std::vector<TaskBatches> Schedule::next(const Benchmark& benchmark) {
  std::vector<TaskBatches> out;
  for (std::size_t i : sample_without_replacement(benchmark.train.size(), tasks_per_step_, rng_))
    out.push_back(samplers_[i].draw(benchmark.train[i], batch_trajectories_));
  return out;
}

std::string metrics_header() {
  return "iteration,meta_train_loss,high_loss,low_loss,grad_norm_high,grad_norm_skills,diverged";
}

std::string metrics_line(const MetricsRow& r) {
  return std::to_string(r.iteration) + "," + fmt(r.meta_train_loss) + "," + fmt(r.high_loss) + "," +
         fmt(r.low_loss) + "," + fmt(r.grad_norm_high) + "," + fmt(r.grad_norm_skills) + "," +
         (r.diverged ? "1" : "0");
}

TrainResult train_method(const ExperimentConfig& config, Method method, std::uint64_t seed,
                         const Benchmark& benchmark, const TrainSink& sink) {
  require(!benchmark.train.empty(), "benchmark has no training tasks");
  const DmilConfig dc = method_config(config, method);
  HierarchicalParams params = initial_params(config, method, seed);
  MetaOptimizer optimizer(config.dmil.meta_optimizer, dc.beta, params.K());
  Schedule schedule(config, benchmark.train.size(), seed);
  const std::size_t every = config.run.checkpoint_every;
  const std::size_t iterations = config.run.iterations;

  TrainResult result;
  auto checkpoint = [&](std::size_t iteration) {
    result.final = Checkpoint{method_name(method), params, schedule.rng_state(), iteration};
    if (sink.on_checkpoint) sink.on_checkpoint(result.final);
  };
  checkpoint(0);

  for (std::size_t it = 1; it <= iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<TaskBatches> tasks = schedule.next(benchmark);
    const double scale = dc.reduce == OuterReduce::mean ? 1.0 / static_cast<double>(tasks.size()) : 1.0;
    MetricsRow row;
    row.iteration = it;
    if (method == Method::maml) {
      const MamlOutcome m = maml_meta_gradient(params.skill_shape, params.skills[0], tasks, dc);
      MetaGradient g = MetaGradient::zeros(params);
      g.skills[0] = m.gradient;
      g.task_count = m.task_count;
      optimizer.step(params, g, dc.reduce);
      row.low_loss = m.loss;
      row.grad_norm_skills = scale * m.gradient.norm();
      row.diverged = m.diverged;
    } else if (method == Method::em_only) {
      std::vector<Batch> all;
      for (const auto& t : tasks) all.insert(all.end(), t.tau.begin(), t.tau.end());
      const EmOutcome e = em_only_step(params, Batch::concat(all), dc.lambda_aux, optimizer);
      row.high_loss = e.high_loss;
      row.low_loss = e.low_loss;
      row.grad_norm_high = e.grad_norm_high;
      row.grad_norm_skills = e.grad_norm_skills;
    } else {
      const StepOutcome s = accumulate_meta_gradient(params, tasks, dc, config.run.threads);
      optimizer.step(params, s.gradient, dc.reduce);
      row.high_loss = s.high_loss;
      row.low_loss = s.low_loss;
      row.grad_norm_high = scale * s.gradient.high.norm();
      row.grad_norm_skills = stacked_norm(s.gradient.skills, scale);
      row.diverged = s.diverged;
    }
    row.meta_train_loss = row.high_loss + row.low_loss;
    if (!std::isfinite(row.meta_train_loss)) throw NumericError(method_name(method), "training loss is not finite");
    if (!params.high.all_finite()) throw NumericError("high", "parameters became non-finite");
    for (const auto& s : params.skills)
      if (!s.all_finite()) throw NumericError("skill", "parameters became non-finite");
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.any_diverged = result.any_diverged || row.diverged;
    result.rows.push_back(row);
    if (sink.on_row) sink.on_row(row);
    if ((every > 0 && it % every == 0) || it == iterations) checkpoint(it);
  }
  return result;
}

AdaptScope method_scope(Method method) {
  switch (method) {
    case Method::dmil_high: return AdaptScope::high_only;
    case Method::dmil_low: return AdaptScope::skills_only;
    default: return AdaptScope::all;
  }
}

std::vector<EvalRow> evaluate_method(const ExperimentConfig& config, Method method, const HierarchicalParams& params,
                                     const Benchmark& benchmark, std::uint64_t seed) {
  const DmilConfig dc = method_config(config, method);
  std::vector<EvalRow> rows;
  for (std::size_t t = 0; t < benchmark.test.size(); ++t) {
    const TaskDataset& task = benchmark.test[t];
    Matrix query_states;
    std::vector<int> truth;
    {
      const Batch q = Batch::stack(std::span<const Trajectory>(task.query));
      query_states = q.pairs.states;
      for (const auto& traj : task.query) truth.insert(truth.end(), traj.true_skills->begin(), traj.true_skills->end());
    }
    for (std::size_t shots : config.eval.shots) {
      const AdaptationMse mse =
          adaptation_mse(params, task, shots, dc.alpha, config.dmil.test_inner_steps, dc.lambda_aux,
                         method_scope(method));
      const std::vector<int> predicted = predict_actions(mse.adapted, query_states).second;
      const RolloutStats rs = rollout_stats(hierarchical_policy(mse.adapted), task.spec, config.eval.rollout_episodes,
                                            config.eval.rollout_horizon, derive_seed(task.spec.seed, 0x0e7a1));
      EvalRow r;
      r.seed = seed;
      r.method = method_name(method);
      r.task = t;
      r.shots = shots;
      r.pre_mse = mse.pre;
      r.post_mse = mse.post;
      r.skill_acc = skill_accuracy(predicted, truth, params.K(), kTrueSkills);
      r.switch_rate = rs.switch_rate;
      r.success = rs.success_rate;
      rows.push_back(r);
    }
  }
  return rows;
}

void write_report_csv(std::ostream& out, const std::vector<EvalRow>& rows) {
  out << "seed,method,task,shots,pre_mse,post_mse,skill_acc,switch_rate,success\n";
  for (const auto& r : rows)
    out << r.seed << ',' << r.method << ',' << r.task << ',' << r.shots << ',' << fmt(r.pre_mse) << ','
        << fmt(r.post_mse) << ',' << fmt(r.skill_acc) << ',' << fmt(r.switch_rate) << ',' << fmt(r.success) << '\n';
}

json summarize(const std::vector<EvalRow>& rows) {
  static const char* fields[] = {"pre_mse", "post_mse", "skill_acc", "switch_rate", "success"};
  auto field = [](const EvalRow& r, int f) {
    const double v[] = {r.pre_mse, r.post_mse, r.skill_acc, r.switch_rate, r.success};
    return v[f];
  };
  // (method, shots) -> seed -> per-field sums and count
  std::map<std::pair<std::string, std::size_t>, std::map<std::uint64_t, std::pair<std::array<double, 5>, int>>> acc;
  for (const auto& r : rows) {
    auto& cell = acc[{r.method, r.shots}][r.seed];
    for (int f = 0; f < 5; ++f) cell.first[f] += field(r, f);
    ++cell.second;
  }
  json out = json::array();
  for (const auto& [key, seeds] : acc) {
    json entry = {{"method", key.first}, {"shots", key.second}, {"seeds", seeds.size()}};
    for (int f = 0; f < 5; ++f) {
      std::vector<double> means;
      for (const auto& [seed, cell] : seeds) means.push_back(cell.first[f] / cell.second);
      double mean = 0.0;
      for (double m : means) mean += m;
      mean /= static_cast<double>(means.size());
      double var = 0.0;
      for (double m : means) var += (m - mean) * (m - mean);
      const double sd = means.size() > 1 ? std::sqrt(var / static_cast<double>(means.size() - 1)) : 0.0;
      entry[fields[f]] = {{"mean", mean}, {"std", sd}};
    }
    out.push_back(entry);
  }
  return out;
}

bool GradcheckReport::passed() const {
  return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.passed; });
}

double GradcheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.max_rel_error);
  return m;
}

namespace {

/// One adapt-then-evaluate objective with its exact gradient.
struct CheckTarget {
  std::string component;
  LossFunction inner;
  LossFunction outer;
  const AdaptTrace* trace;
  ParamVector theta;
  ParamVector exact;
};

}  // namespace

GradcheckReport run_gradcheck(const ExperimentConfig& config, std::uint64_t seed, MetaGradMode mode) {
  const EvalConfig& e = config.eval;
  require(e.gradcheck_instances >= 1, "gradcheck needs at least one instance");
  const MlpShape high = shape_of(kStateDim, e.gradcheck_hidden, e.gradcheck_K);
  const MlpShape skill = shape_of(kStateDim, e.gradcheck_hidden, kActionDim);
  const double lambda = config.dmil.core.lambda_aux;
  const double alpha = e.gradcheck_alpha;
  GradcheckReport report;
  std::size_t accepted = 0;
  for (std::size_t candidate = 0; accepted < e.gradcheck_instances; ++candidate) {
    require(candidate < 100 * e.gradcheck_instances, "gradcheck could not find instances away from relu kinks");
    const std::uint64_t s = derive_seed(seed, 0x6c00 + candidate);
    const HierarchicalParams params = HierarchicalParams::init(high, skill, derive_seed(s, 0));
    const TaskSpec spec = sample_task(derive_seed(s, 1));
    // Short demonstrations keep the finite-difference sweep cheap.
    std::array<Batch, 4> tau;
    for (std::size_t b = 0; b < 4; ++b) {
      std::vector<Trajectory> trajs;
      for (std::size_t j = 0; j < 2; ++j) trajs.push_back(rollout_expert(spec, 12, derive_seed(s, 10 + 2 * b + j)));
      tau[b] = Batch::stack(std::span<const Trajectory>(trajs));
    }

    // Build every objective of this candidate first so that it can be
    // rejected as a whole.
    std::vector<HighInner> his;
    std::vector<std::vector<SkillInner>> lis;
    std::vector<std::pair<int, CheckTarget>> targets;
    his.reserve(e.gradcheck_steps.size());
    lis.reserve(e.gradcheck_steps.size());
    for (int steps : e.gradcheck_steps) {
      his.push_back(hi_step(params, tau[0], alpha, steps, lambda));
      const HighInner& hi = his.back();
      lis.push_back(li_step(params, partition_by_skill(high, params.high, tau[1].pairs), alpha, steps));
      const std::vector<SkillInner>& li = lis.back();
      std::vector<ParamVector> adapted_skills;
      for (const auto& l : li) adapted_skills.push_back(l.trace.adapted);

      const HighOuter ho = ho_grad(hi, params, tau[2], adapted_skills, lambda, mode);
      const SkillLabels labels = hard_labels(tau[2].pairs, skill, adapted_skills);
      targets.push_back({steps, {"high", hi.loss, high_loss(high, tau[2], labels, lambda), &hi.trace, params.high,
                                 ho.gradient}});

      const LowOuter lo = lo_grad(li, params, hi.trace.adapted, tau[3].pairs, mode);
      const Partition part = partition_by_skill(high, hi.trace.adapted, tau[3].pairs);
      for (std::size_t k = 0; k < params.K(); ++k) {
        // Skills without adaptation data or without outer data have no
        // adapt-then-evaluate objective to differentiate.
        if (part.parts[k].empty() || !li[k].loss) continue;
        targets.push_back({steps, {"skill" + std::to_string(k), *li[k].loss, skill_loss(skill, part.parts[k]),
                                   &li[k].trace, params.skills[k], lo.gradients[k]}});
      }
    }
    double margin = std::numeric_limits<double>::infinity();
    for (const auto& [steps, t] : targets) margin = std::min(margin, adapted_relu_margin(t.inner, t.outer, *t.trace));
    if (margin < e.gradcheck_kink_margin) {
      ++report.redrawn;
      continue;
    }
    for (const auto& [steps, t] : targets) {
      const FdReport r = fd_check(adapted_objective(t.inner, t.outer, alpha, steps), t.theta, t.exact, e.fd_step,
                                  e.fd_floor);
      report.rows.push_back({accepted, candidate, steps, t.component, r.max_rel_error, r.worst_index,
                             r.max_rel_error <= e.fd_tolerance});
    }
    ++accepted;
  }
  return report;
}

}  // namespace dmil
