#pragma once

// Training, evaluation and gradient-check drivers shared by the command line
// tool and the acceptance checks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "dmil/checkpoint.hpp"
#include "dmil/config.hpp"
#include "dmil/tasks.hpp"

namespace dmil {

/// dmil_noaux is DMIL with lambda_aux forced to 0.
enum class Method { dmil, dmil_noaux, dmil_high, dmil_low, maml, em_only };

Method parse_method(const std::string& name);
std::string method_name(Method method);

struct Benchmark {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
};

/// Train task i uses seed train_seed_base + i, test task i test_seed_base + i.
Benchmark make_benchmark(const DataConfig& config);

/// The algorithm settings a method trains and adapts with.
DmilConfig method_config(const ExperimentConfig& config, Method method);

/// Initial parameters for a run. MAML gets a single policy (K = 1) behind a
/// trivial one-output selector.
HierarchicalParams initial_params(const ExperimentConfig& config, Method method, std::uint64_t seed);

/// Task indices and their four batches for every outer iteration. The
/// schedule depends on the run seed only, so every method sees the same
/// batches.
class Schedule {
 public:
  Schedule(const ExperimentConfig& config, std::size_t train_tasks, std::uint64_t seed);
  std::vector<TaskBatches> next(const Benchmark& benchmark);
  std::uint64_t rng_state() const { return rng_.state(); }

 private:
  std::size_t tasks_per_step_;
  std::size_t batch_trajectories_;
  SplitMix64 rng_;
  std::vector<BatchSampler> samplers_;
};

struct MetricsRow {
  std::size_t iteration = 0;
  double meta_train_loss = 0.0;
  double high_loss = 0.0;
  double low_loss = 0.0;
  double grad_norm_high = 0.0;
  double grad_norm_skills = 0.0;
  bool diverged = false;
  double seconds = 0.0;  ///< wall time, kept out of the metrics CSV
};

/// Header and row of the metrics CSV. Values are printed with 17 significant
/// digits so that identical runs give identical bytes.
std::string metrics_header();
std::string metrics_line(const MetricsRow& row);

struct TrainResult {
  Checkpoint final;
  std::vector<MetricsRow> rows;
  bool any_diverged = false;
};

/// Receives every metrics row as soon as it is produced, and every
/// checkpoint due (iteration 0, every checkpoint_every iterations, the last).
struct TrainSink {
  std::function<void(const MetricsRow&)> on_row;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

TrainResult train_method(const ExperimentConfig& config, Method method, std::uint64_t seed,
                         const Benchmark& benchmark, const TrainSink& sink = {});

/// Test-time adaptation scope: DMIL-High fine-tunes only the high-level
/// network, DMIL-Low only the skills, every other method everything.
AdaptScope method_scope(Method method);

struct EvalRow {
  std::uint64_t seed = 0;
  std::string method;
  std::size_t task = 0;
  std::size_t shots = 0;
  double pre_mse = 0.0;
  double post_mse = 0.0;
  double skill_acc = 0.0;
  double switch_rate = 0.0;
  double success = 0.0;
};

/// One row per test task and shot count: query MSE before and after
/// adaptation, permutation-matched accuracy of the adapted high-level labels
/// on the query states, and switch rate and success of closed-loop rollouts
/// with the adapted policy.
std::vector<EvalRow> evaluate_method(const ExperimentConfig& config, Method method, const HierarchicalParams& params,
                                     const Benchmark& benchmark, std::uint64_t seed);

void write_report_csv(std::ostream& out, const std::vector<EvalRow>& rows);
/// Per method and shot count, mean and sample standard deviation across
/// seeds of the per-seed task means.
nlohmann::json summarize(const std::vector<EvalRow>& rows);

struct GradcheckRow {
  std::size_t instance = 0;
  std::size_t candidate = 0;  ///< draw index, counting redrawn instances
  int steps = 0;
  std::string component;  ///< "high" or "skill<k>"
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  /// Candidates redrawn because a relu kink fell within the kink margin.
  std::size_t redrawn = 0;
  bool passed() const;
  double max_rel_error() const;
};

/// Exact HO and LO meta-gradients against central differences of the
/// composed adapt-then-evaluate objectives on small random instances
/// (eval.gradcheck_* settings). Candidates with a relu pre-activation closer
/// than eval.gradcheck_kink_margin to zero anywhere along the objectives are
/// redrawn, since the objective is not differentiable there.
GradcheckReport run_gradcheck(const ExperimentConfig& config, std::uint64_t seed,
                              MetaGradMode mode = MetaGradMode::exact);

}  // namespace dmil
