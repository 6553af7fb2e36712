#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmil/dmil.hpp"
#include "dmil/optim.hpp"
#include "dmil/tasks.hpp"

namespace dmil {

struct DataConfig {
  std::size_t n_train_tasks = 20;
  std::size_t n_test_tasks = 5;
  std::size_t n_support = 40;
  std::size_t n_query = 10;
  std::size_t horizon = 120;
  double noise_std = kDefaultNoiseStd;
  std::uint64_t train_seed_base = 0;
  std::uint64_t test_seed_base = 100000;
};

struct ModelConfig {
  std::size_t K = 3;
  std::vector<std::size_t> high_hidden{64, 64};
  std::vector<std::size_t> skill_hidden{64, 64};
  /// Multiplies the initial output-layer weights of every skill.
  double skill_output_gain = 1.0;
};

/// The "dmil" section: algorithm hyperparameters plus batching.
struct TrainConfig {
  DmilConfig core;
  int test_inner_steps = 3;
  std::size_t batch_trajectories = 16;
  std::size_t tasks_per_step = 4;
  OptimizerKind meta_optimizer = OptimizerKind::sgd;
};

struct EvalConfig {
  std::vector<std::size_t> shots{1, 3};
  std::size_t rollout_episodes = 2;
  std::size_t rollout_horizon = 600;
  std::size_t gradcheck_instances = 20;
  std::vector<std::size_t> gradcheck_hidden{8, 8};
  std::size_t gradcheck_K = 2;
  double gradcheck_alpha = 5e-4;
  std::vector<int> gradcheck_steps{1, 3};
  double fd_step = 1e-5;
  double fd_tolerance = 1e-4;
  /// Denominator floor of the per-coordinate relative error. Central
  /// differences carry rounding noise near 1e-11 at h = 1e-5, so smaller
  /// derivatives are compared in absolute terms.
  double fd_floor = 1e-6;
  /// Instances whose relus come closer than this to a kink are redrawn.
  double gradcheck_kink_margin = 1e-4;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t iterations = 300;
  std::size_t checkpoint_every = 50;
  unsigned threads = 1;
  std::string method = "dmil";
  std::vector<std::string> methods{"dmil", "dmil_high", "dmil_low", "maml", "em_only"};
  std::vector<std::uint64_t> seeds{0};
};

/// A single JSON document with sections {data, model, dmil, eval, run}.
/// Every section and key is optional; unknown ones are rejected.
struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig dmil;
  EvalConfig eval;
  RunConfig run;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_text(const std::string& text);
};

std::string read_text(const std::filesystem::path& path);

}  // namespace dmil
