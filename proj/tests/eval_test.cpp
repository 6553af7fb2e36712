#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "dmil/eval.hpp"
#include "dmil/experiment.hpp"
#include "helpers.hpp"

using namespace dmil;
using namespace dmil::testing;

namespace {

/// Best agreement over every injective map from true labels into
/// max(K, K*) label slots (slots >= K never match a prediction), enumerated
/// over all assignments and filtered for injectivity.
double brute_force_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, int K, int K_true) {
  const int slots = std::max(K, K_true);
  double best = 0.0;
  std::vector<int> map(static_cast<std::size_t>(K_true), 0);
  for (;;) {
    std::vector<int> sorted = map;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end()) {
      int hits = 0;
      for (std::size_t t = 0; t < pred.size(); ++t) hits += map[static_cast<std::size_t>(truth[t])] == pred[t];
      best = std::max(best, static_cast<double>(hits) / static_cast<double>(pred.size()));
    }
    std::size_t i = 0;
    while (i < map.size() && ++map[i] == slots) map[i++] = 0;
    if (i == map.size()) break;
  }
  return best;
}

}  // namespace

TEST_CASE("fd_check on a quadratic") {
  const LossFunction f{"q", [](ad::Var p) { return ad::sum(ad::mul(p, p)); }};
  const ParamVector theta{0.3, -1.2, 2.0};
  const FdReport r = fd_check([&](const ParamVector& p) { return evaluate(f, p); }, theta, grad(f, theta));
  CHECK(r.max_rel_error <= 1e-8);
  CHECK(coordinate_error(1.0, 1.0, 1e-8) == 0.0);
  CHECK(coordinate_error(1e-12, 0.0, 1e-6) == doctest::Approx(1e-6));
}

TEST_CASE("fd_check of a 2-8-2 two-skill meta-gradient") {
  const HierarchicalParams p = HierarchicalParams::init({{2, 8, 2}}, {{2, 8, 2}}, 3);
  const PairSet inner_pairs = random_pairs(6, 4, 2, 2), outer_pairs = random_pairs(6, 5, 2, 2);
  const double alpha = 0.01;
  for (std::size_t k = 0; k < 2; ++k) {
    const LossFunction inner = skill_loss(p.skill_shape, inner_pairs), outer = skill_loss(p.skill_shape, outer_pairs);
    const AdaptTrace trace = inner_adapt(inner, p.skills[k], alpha, 1);
    REQUIRE(adapted_relu_margin(inner, outer, trace) > 1e-3);
    const ParamVector exact = meta_grad(trace, grad(outer, trace.adapted), inner, MetaGradMode::exact);
    CHECK(fd_check(adapted_objective(inner, outer, alpha, 1), p.skills[k], exact, 1e-5, 1e-6).max_rel_error <= 1e-4);
  }
}

TEST_CASE("first-order meta-gradients fail the finite-difference check on curved objectives") {
  const MlpShape shape{{4, 6, 2}};
  const LossFunction inner = skill_loss(shape, random_pairs(8, 6)), outer = skill_loss(shape, random_pairs(8, 7));
  const ParamVector theta = init_params(shape, 8);
  const double alpha = 0.2;
  const AdaptTrace trace = inner_adapt(inner, theta, alpha, 3);
  const ParamVector first = meta_grad(trace, grad(outer, trace.adapted), inner, MetaGradMode::first_order);
  CHECK(fd_check(adapted_objective(inner, outer, alpha, 3), theta, first, 1e-5, 1e-6).max_rel_error > 1e-2);
}

TEST_CASE("fd_check refuses large parameter vectors") {
  const ParamVector big(501);
  CHECK_THROWS_AS(fd_check([](const ParamVector&) { return 0.0; }, big, big), ContractError);
}

TEST_CASE("skill_accuracy") {
  const std::vector<int> truth{0, 0, 1, 1, 2, 2, 2, 0};
  CHECK(skill_accuracy(truth, truth, 3, 3) == 1.0);
  std::vector<int> perm{0, 1, 2};
  do {
    std::vector<int> relabelled;
    for (int z : truth) relabelled.push_back(perm[static_cast<std::size_t>(z)]);
    CHECK(skill_accuracy(relabelled, truth, 3, 3) == 1.0);
  } while (std::next_permutation(perm.begin(), perm.end()));
  CHECK_THROWS_AS(skill_accuracy(std::vector<int>{0}, std::vector<int>{0, 1}, 2, 2), ContractError);
  CHECK_THROWS_AS(skill_accuracy(truth, truth, 7, 3), ContractError);
  CHECK_NOTHROW(skill_accuracy(truth, truth, 7, 3, true));
}

TEST_CASE("skill_accuracy matches the exhaustive matcher and is invariant to relabelling") {
  SplitMix64 rng(21);
  for (int K = 1; K <= 4; ++K) {
    for (int K_true = 1; K_true <= 4; ++K_true) {
      for (int trial = 0; trial < 5; ++trial) {
        std::vector<int> pred, truth;
        for (int t = 0; t < 40; ++t) {
          truth.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(K_true))));
          // Correlated predictions so the best matching is not trivial.
          pred.push_back(rng.uniform() < 0.6 ? truth.back() % K : static_cast<int>(rng.below(static_cast<std::uint64_t>(K))));
        }
        const double acc = skill_accuracy(pred, truth, static_cast<std::size_t>(K), static_cast<std::size_t>(K_true));
        CHECK(acc == doctest::Approx(brute_force_accuracy(pred, truth, K, K_true)).epsilon(1e-15));
        std::vector<int> perm(static_cast<std::size_t>(K));
        std::iota(perm.begin(), perm.end(), 0);
        do {
          std::vector<int> relabelled;
          for (int z : pred) relabelled.push_back(perm[static_cast<std::size_t>(z)]);
          CHECK(skill_accuracy(relabelled, truth, static_cast<std::size_t>(K), static_cast<std::size_t>(K_true)) ==
                acc);
        } while (std::next_permutation(perm.begin(), perm.end()));
      }
    }
  }
}

TEST_CASE("skill_accuracy of random labels is close to chance") {
  SplitMix64 rng(31);
  std::vector<int> pred, truth;
  for (int t = 0; t < 3000; ++t) {
    pred.push_back(static_cast<int>(rng.below(3)));
    truth.push_back(static_cast<int>(rng.below(3)));
  }
  const double acc = skill_accuracy(pred, truth, 3, 3);
  CHECK(acc == doctest::Approx(brute_force_accuracy(pred, truth, 3, 3)));
  // Maximising over 6 matchings lifts the 1/3 baseline by a few standard errors.
  CHECK(acc > 1.0 / 3.0 - 0.03);
  CHECK(acc < 1.0 / 3.0 + 0.05);
}

TEST_CASE("switch_rate") {
  CHECK(switch_rate(std::vector<int>{1, 1, 1, 1}) == 0.0);
  CHECK(switch_rate(std::vector<int>{0, 1, 0, 1, 0}) == 4.0 / 5.0);
  SplitMix64 rng(41);
  std::vector<int> z;
  for (int t = 0; t < 100; ++t) z.push_back(static_cast<int>(rng.below(3)));
  int changes = 0;
  for (std::size_t t = 1; t < z.size(); ++t) changes += z[t] != z[t - 1];
  const double r = switch_rate(z);
  CHECK(r == static_cast<double>(changes) / 100.0);
  CHECK((r >= 0.0 && r <= 99.0 / 100.0));
  CHECK_THROWS_AS(switch_rate(std::vector<int>{0}), ContractError);
}

TEST_CASE("hard switch rate and soft surrogate") {
  SplitMix64 rng(43);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix probs(20, 3);
    std::vector<int> z;
    for (Eigen::Index t = 0; t < 20; ++t) {
      Vector p(3);
      p << rng.uniform(), rng.uniform(), rng.uniform();
      p /= p.sum();
      probs.row(t) = p.transpose();
      z.push_back(static_cast<int>(rng.below(3)));
    }
    // On one-hot sequences the surrogate counts the same switches over T - 1
    // neighbour pairs instead of T steps.
    const Matrix one = SkillLabels{3, z}.one_hot();
    CHECK(switch_rate(z) == doctest::Approx(aux_loss(one) * 19.0 / 20.0).epsilon(1e-14));
    CHECK((aux_loss(probs) >= 0.0 && aux_loss(probs) <= 1.0));
  }
}

TEST_CASE("adaptation_mse") {
  const TaskDataset task = make_dataset(sample_task(4), 4, 2, 30, 4);
  const HierarchicalParams p = HierarchicalParams::init({{4, 8, 3}}, {{4, 8, 2}}, 5);
  SUBCASE("zero rate leaves the error unchanged") {
    const AdaptationMse m = adaptation_mse(p, task, 1, 0.0, 3, 0.1);
    CHECK(m.pre == m.post);
  }
  SUBCASE("deterministic") {
    const AdaptationMse a = adaptation_mse(p, task, 3, 0.01, 3, 0.1), b = adaptation_mse(p, task, 3, 0.01, 3, 0.1);
    CHECK(a.pre == b.pre);
    CHECK(a.post == b.post);
  }
  SUBCASE("shots are bounded by the support set") {
    CHECK_THROWS_AS(adaptation_mse(p, task, 5, 0.01, 3, 0.1), ContractError);
  }
}

TEST_CASE("the ground-truth expert scores the noise variance") {
  // The expert itself as predictor: its squared error per action dimension is
  // exactly the noise added to the demonstrations.
  const double sigma = 0.05;
  const TaskDataset task = make_dataset(sample_task(6, sigma), 4, 20, 120, 6);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& q : task.query) {
    Matrix predicted(q.actions.rows(), 2);
    for (Eigen::Index t = 0; t < q.states.rows(); ++t)
      predicted.row(t) = expert_action(task.spec, q.states.row(t).transpose()).first.transpose();
    sum += action_mse(predicted, q.actions) * static_cast<double>(q.length());
    n += q.length();
  }
  CHECK(sum / static_cast<double>(n) == doctest::Approx(sigma * sigma).epsilon(0.05));
}

TEST_CASE("rollout success of the expert and of a zero policy") {
  const TaskSpec spec = sample_task(8, 0.0);
  CHECK(rollout_success(expert_policy(spec), spec, 4, 600, 1) == 1.0);
  const Policy zero = [](const Vector&) { return std::pair<Vector, int>{Vector::Zero(2), 0}; };
  const RolloutStats s = rollout_stats(zero, spec, 4, 200, 1);
  CHECK(s.success_rate == 0.0);
  CHECK(s.switch_rate == 0.0);
}

TEST_CASE("report summary statistics across seeds") {
  std::vector<EvalRow> rows;
  for (std::uint64_t seed : {0, 1}) {
    for (std::size_t task : {0, 1}) {
      EvalRow r;
      r.seed = seed;
      r.method = "dmil";
      r.task = task;
      r.shots = 1;
      r.post_mse = static_cast<double>(seed * 2 + task);  // seed means 0.5 and 2.5
      rows.push_back(r);
    }
  }
  const auto s = summarize(rows);
  REQUIRE(s.size() == 1);
  CHECK(s[0]["post_mse"]["mean"].get<double>() == doctest::Approx(1.5));
  CHECK(s[0]["post_mse"]["std"].get<double>() == doctest::Approx(std::sqrt(2.0)));
}
