#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "dmil/baselines.hpp"
#include "dmil/dmil.hpp"
#include "dmil/eval.hpp"
#include "helpers.hpp"

using namespace dmil;
using namespace dmil::testing;

namespace {

/// High-level parameters of a {4, K} linear classifier whose bias on
/// `favoured` dominates every input of moderate size.
ParamVector favouring(std::size_t K, std::size_t favoured, double bias = 50.0) {
  ParamVector p(4 * K + K);
  p[4 * K + favoured] = bias;
  return p;
}

DmilConfig small_config(double alpha = 0.01, int steps = 2) {
  DmilConfig c;
  c.alpha = alpha;
  c.beta = 0.1;
  c.inner_steps = steps;
  return c;
}

/// Straight-line cross entropy plus switching penalty.
double reference_high_loss(const MlpShape& shape, const ParamVector& theta, const Batch& batch,
                           const std::vector<int>& labels, double lambda) {
  std::vector<std::vector<double>> probs;
  double ce = 0.0;
  for (Eigen::Index t = 0; t < batch.pairs.states.rows(); ++t) {
    probs.push_back(reference_softmax(reference_forward(shape, theta, row(batch.pairs.states, t))));
    ce -= std::log(probs.back()[static_cast<std::size_t>(labels[static_cast<std::size_t>(t)])]);
  }
  ce /= static_cast<double>(probs.size());
  double overlap = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < batch.starts.size(); ++i) {
    const std::size_t end = i + 1 < batch.starts.size() ? batch.starts[i + 1] : batch.size();
    for (std::size_t t = batch.starts[i]; t + 1 < end; ++t, ++n)
      for (std::size_t k = 0; k < probs[t].size(); ++k) overlap += probs[t][k] * probs[t + 1][k];
  }
  return ce + lambda * (1.0 - overlap / static_cast<double>(n));
}

}  // namespace

TEST_CASE("hard_labels with one skill labels everything 0") {
  const PairSet pairs = random_pairs(20, 1);
  const std::vector<ParamVector> skills{init_params({{4, 8, 2}}, 2)};
  const SkillLabels l = hard_labels(pairs, {{4, 8, 2}}, skills);
  CHECK(l.K == 1);
  CHECK(std::all_of(l.index.begin(), l.index.end(), [](int z) { return z == 0; }));
}

TEST_CASE("hard_labels picks a skill that reproduces the action exactly") {
  const MlpShape shape{{4, 8, 2}};
  const std::vector<ParamVector> skills{init_params(shape, 1), init_params(shape, 2)};
  PairSet pairs = random_pairs(15, 3);
  pairs.actions = mlp_forward(shape, skills[1], pairs.states);
  const SkillLabels l = hard_labels(pairs, shape, skills);
  CHECK(std::all_of(l.index.begin(), l.index.end(), [](int z) { return z == 1; }));
}

TEST_CASE("hard_labels breaks ties towards the lowest index") {
  const MlpShape shape{{4, 8, 2}};
  const ParamVector s = init_params(shape, 5);
  const std::vector<ParamVector> skills{init_params(shape, 4), s, s};
  PairSet pairs = random_pairs(10, 6);
  pairs.actions = mlp_forward(shape, s, pairs.states);
  const SkillLabels l = hard_labels(pairs, shape, skills);
  CHECK(std::all_of(l.index.begin(), l.index.end(), [](int z) { return z == 1; }));
}

TEST_CASE("hard_labels matches the exhaustive argmin loop") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const MlpShape shape{{4, 6, 2}};
    std::vector<ParamVector> skills;
    for (std::size_t k = 0; k < 4; ++k) skills.push_back(init_params(shape, derive_seed(seed, k)));
    const PairSet pairs = random_pairs(30, derive_seed(seed, 9));
    CHECK(hard_labels(pairs, shape, skills).index == brute_force_labels(pairs, shape, skills));
  }
}

TEST_CASE("one-hot labels") {
  const SkillLabels l{3, {2, 0, 1, 2}};
  const Matrix m = l.one_hot();
  CHECK(m.rows() == 4);
  CHECK(m.rowwise().sum() == Vector::Ones(4));
  CHECK(m(0, 2) == 1.0);
  CHECK(m(1, 0) == 1.0);
}

TEST_CASE("aux_loss on constant, alternating and uniform sequences") {
  Matrix constant = Matrix::Zero(6, 3);
  constant.col(1).setOnes();
  CHECK(aux_loss(constant) == 0.0);
  Matrix alternating = Matrix::Zero(7, 2);
  for (int t = 0; t < 7; ++t) alternating(t, t % 2) = 1.0;
  CHECK(aux_loss(alternating) == 1.0);
  CHECK(aux_loss(Matrix::Constant(9, 2, 0.5)) == 0.5);
  CHECK_THROWS_AS(aux_loss(Matrix::Constant(1, 2, 0.5)), ContractError);
}

TEST_CASE("aux_loss over a batch ignores pairs across trajectory boundaries") {
  const Batch b = random_batch(2, 3, 1);
  Matrix probs = Matrix::Zero(6, 2);
  probs.block(0, 0, 3, 1).setOnes();  // first trajectory stays on skill 0
  probs.block(3, 1, 3, 1).setOnes();  // second stays on skill 1
  CHECK(aux_loss(probs, b) == 0.0);
  CHECK(aux_loss(probs) == doctest::Approx(0.2));
}

TEST_CASE("high_loss of an all-zero classifier") {
  const MlpShape shape{{4, 5, 3}};
  const Batch b = random_batch(2, 6, 3);
  SkillLabels labels{3, std::vector<int>(b.size(), 0)};
  for (std::size_t t = 0; t < b.size(); ++t) labels.index[t] = static_cast<int>(t * 7 % 3);
  const double loss = evaluate(high_loss(shape, b, labels, 0.1), ParamVector(shape.param_count()));
  CHECK(loss == doctest::Approx(std::log(3.0) + 0.1 * 2.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("high_loss of a perfect classifier on constant labels") {
  const Batch b = random_batch(1, 8, 4);
  const SkillLabels labels{3, std::vector<int>(b.size(), 2)};
  CHECK(evaluate(high_loss({{4, 3}}, b, labels, 0.1), favouring(3, 2, 40.0)) <= 1e-6);
}

TEST_CASE("high_loss matches a straight-line recomputation") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MlpShape shape{{4, 7, 3}};
    const Batch b = random_batch(3, 5, seed);
    SplitMix64 rng(derive_seed(seed, 1));
    SkillLabels labels{3, {}};
    for (std::size_t t = 0; t < b.size(); ++t) labels.index.push_back(static_cast<int>(rng.below(3)));
    const ParamVector theta = random_params(shape.param_count(), rng);
    const double lambda = 0.35;
    const double expected = reference_high_loss(shape, theta, b, labels.index, lambda);
    CHECK(std::abs(evaluate(high_loss(shape, b, labels, lambda), theta) - expected) <= 1e-10 * std::abs(expected));
  }
}

TEST_CASE("hi_step") {
  const HierarchicalParams p = random_hierarchy(3, 8, 1);
  const Batch tau1 = random_batch(2, 10, 2);
  SUBCASE("zero rate leaves the high-level network untouched") {
    CHECK(bitwise_equal(hi_step(p, tau1, 0.0, 3, 0.1).trace.adapted, p.high));
  }
  SUBCASE("three steps equal three composed single steps") {
    HierarchicalParams q = p;
    for (int s = 0; s < 3; ++s) q.high = hi_step(q, tau1, 5e-4, 1, 0.1).trace.adapted;
    CHECK(bitwise_equal(hi_step(p, tau1, 5e-4, 3, 0.1).trace.adapted, q.high));
  }
  SUBCASE("labels come from the frozen skills") {
    CHECK(hi_step(p, tau1, 5e-4, 3, 0.1).labels.index == brute_force_labels(tau1.pairs, p.skill_shape, p.skills));
  }
  SUBCASE("a small step does not increase the loss") {
    const HighInner hi = hi_step(p, tau1, 5e-4, 3, 0.1);
    if (hi.trace.losses.back() > hi.trace.losses.front())
      MESSAGE("hi_step loss rose from " << hi.trace.losses.front() << " to " << hi.trace.losses.back());
    CHECK(hi.trace.losses.back() <= hi.trace.losses.front() + 1e-12);
  }
}

TEST_CASE("partition_by_skill") {
  const PairSet pairs = random_pairs(25, 8);
  SUBCASE("one skill takes everything") {
    const Partition part = partition_by_skill({{4, 1}}, ParamVector(5), pairs);
    REQUIRE(part.K() == 1);
    CHECK(part.rows[0].size() == 25);
    CHECK(part.parts[0].states == pairs.states);
  }
  SUBCASE("a hand-set classifier routes every pair to skill 2") {
    const Partition part = partition_by_skill({{4, 3}}, favouring(3, 2), pairs);
    CHECK(part.rows[0].empty());
    CHECK(part.rows[1].empty());
    CHECK(part.rows[2].size() == 25);
  }
  SUBCASE("random classifiers match the exhaustive argmax loop") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const MlpShape shape{{4, 6, 4}};
      const ParamVector high = init_params(shape, seed);
      const Partition part = partition_by_skill(shape, high, pairs);
      const std::vector<int> z = brute_force_argmax(shape, high, pairs.states);
      std::set<std::size_t> seen;
      for (std::size_t k = 0; k < 4; ++k) {
        for (std::size_t i = 0; i < part.rows[k].size(); ++i) {
          const std::size_t t = part.rows[k][i];
          CHECK(z[t] == static_cast<int>(k));
          CHECK(seen.insert(t).second);
          CHECK(part.parts[k].states.row(static_cast<Eigen::Index>(i)) ==
                pairs.states.row(static_cast<Eigen::Index>(t)));
        }
      }
      CHECK(seen.size() == pairs.size());
    }
  }
}

TEST_CASE("li_step") {
  const HierarchicalParams p = random_hierarchy(3, 8, 2);
  const PairSet pairs = random_pairs(12, 3);
  SUBCASE("skills without pairs keep an identity trace") {
    HierarchicalParams flat = p;
    flat.high_shape = {{4, 3}};
    flat.high = favouring(3, 1);
    const auto traces = li_step(flat, partition_by_skill(flat.high_shape, flat.high, pairs), 0.1, 3);
    CHECK_FALSE(traces[0].loss.has_value());
    CHECK(bitwise_equal(traces[0].trace.adapted, p.skills[0]));
    CHECK(traces[0].trace.steps.empty());
    CHECK(traces[1].loss.has_value());
    CHECK_FALSE(bitwise_equal(traces[1].trace.adapted, p.skills[1]));
  }
  SUBCASE("zero rate is the identity") {
    const auto li = li_step(p, partition_by_skill(p.high_shape, p.high, pairs), 0.0, 3);
    for (std::size_t k = 0; k < 3; ++k) CHECK(bitwise_equal(li[k].trace.adapted, p.skills[k]));
  }
  SUBCASE("one pair, one step of a linear skill matches the hand gradient") {
    HierarchicalParams lin = HierarchicalParams::init({{4, 1}}, {{4, 2}}, 3);
    const PairSet one = random_pairs(1, 4);
    const auto li = li_step(lin, partition_by_skill(lin.high_shape, lin.high, one), 0.05, 1);
    // loss = |W^T s + b - a|^2, dW(i, j) = 2 s_i r_j, db_j = 2 r_j.
    const ParamVector& w = lin.skills[0];
    double r[2];
    for (int j = 0; j < 2; ++j) {
      r[j] = w[8 + j] - one.actions(0, j);
      for (int i = 0; i < 4; ++i) r[j] += one.states(0, i) * w[j * 4 + i];
    }
    ParamVector expected = w;
    for (int j = 0; j < 2; ++j) {
      for (int i = 0; i < 4; ++i) expected[j * 4 + i] -= 0.05 * 2.0 * one.states(0, i) * r[j];
      expected[8 + j] -= 0.05 * 2.0 * r[j];
    }
    CHECK(max_abs_diff(li[0].trace.adapted, expected) <= 1e-14);
  }
}

TEST_CASE("ho_grad") {
  const HierarchicalParams p = random_hierarchy(2, 6, 11);
  const Batch tau1 = random_batch(2, 6, 12), tau3 = random_batch(2, 6, 13);
  SUBCASE("zero rate gives the plain gradient at the initial parameters") {
    const HighInner hi = hi_step(p, tau1, 0.0, 3, 0.1);
    const HighOuter ho = ho_grad(hi, p, tau3, p.skills, 0.1, MetaGradMode::exact);
    const SkillLabels labels = hard_labels(tau3.pairs, p.skill_shape, p.skills);
    CHECK(bitwise_equal(ho.gradient, grad(high_loss(p.high_shape, tau3, labels, 0.1), p.high)));
  }
  SUBCASE("first order mode gives the gradient at the adapted parameters") {
    const HighInner hi = hi_step(p, tau1, 0.05, 3, 0.1);
    const HighOuter ho = ho_grad(hi, p, tau3, p.skills, 0.1, MetaGradMode::first_order);
    const SkillLabels labels = hard_labels(tau3.pairs, p.skill_shape, p.skills);
    CHECK(bitwise_equal(ho.gradient, grad(high_loss(p.high_shape, tau3, labels, 0.1), hi.trace.adapted)));
  }
  SUBCASE("exact mode matches central differences of the composed objective") {
    const HighInner hi = hi_step(p, tau1, 0.05, 2, 0.1);
    const SkillLabels labels = hard_labels(tau3.pairs, p.skill_shape, p.skills);
    const LossFunction outer = high_loss(p.high_shape, tau3, labels, 0.1);
    REQUIRE(adapted_relu_margin(hi.loss, outer, hi.trace) > 1e-3);
    const HighOuter ho = ho_grad(hi, p, tau3, p.skills, 0.1, MetaGradMode::exact);
    const ParamVector fd = central_differences(adapted_objective(hi.loss, outer, 0.05, 2), p.high, 1e-5);
    CHECK(max_rel_error(ho.gradient, fd, 1e-6) <= 1e-4);
  }
}

TEST_CASE("lo_grad") {
  const HierarchicalParams p = random_hierarchy(2, 6, 21);
  const PairSet tau2 = random_pairs(16, 22), tau4 = random_pairs(16, 23);
  SUBCASE("zero rate gives per-skill plain gradients") {
    const auto li = li_step(p, partition_by_skill(p.high_shape, p.high, tau2), 0.0, 3);
    const LowOuter lo = lo_grad(li, p, p.high, tau4, MetaGradMode::exact);
    const Partition part = partition_by_skill(p.high_shape, p.high, tau4);
    for (std::size_t k = 0; k < 2; ++k) {
      if (part.parts[k].empty()) continue;
      CHECK(bitwise_equal(lo.gradients[k], grad(skill_loss(p.skill_shape, part.parts[k]), p.skills[k])));
    }
  }
  SUBCASE("a skill with no outer pairs gets a zero vector") {
    HierarchicalParams flat = p;
    flat.high_shape = {{4, 2}};
    flat.high = favouring(2, 0);
    const auto li = li_step(flat, partition_by_skill(flat.high_shape, flat.high, tau2), 0.05, 2);
    const LowOuter lo = lo_grad(li, flat, flat.high, tau4, MetaGradMode::exact);
    CHECK(lo.gradients[1].values().isZero(0.0));
    CHECK(lo.gradients[1].size() == p.skills[1].size());
    CHECK(lo.gradients[0].norm() > 0.0);
  }
  SUBCASE("exact mode matches central differences of the composed objective") {
    const double alpha = 0.05;
    const Partition inner_part = partition_by_skill(p.high_shape, p.high, tau2);
    const Partition outer_part = partition_by_skill(p.high_shape, p.high, tau4);
    const auto li = li_step(p, inner_part, alpha, 2);
    const LowOuter lo = lo_grad(li, p, p.high, tau4, MetaGradMode::exact);
    int checked = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!li[k].loss || outer_part.parts[k].empty()) continue;
      const LossFunction outer = skill_loss(p.skill_shape, outer_part.parts[k]);
      REQUIRE(adapted_relu_margin(*li[k].loss, outer, li[k].trace) > 1e-3);
      const ParamVector fd = central_differences(adapted_objective(*li[k].loss, outer, alpha, 2), p.skills[k], 1e-5);
      CHECK(max_rel_error(lo.gradients[k], fd, 1e-6) <= 1e-4);
      ++checked;
    }
    CHECK(checked >= 1);
  }
}

TEST_CASE("meta_train_step with zero outer rate leaves parameters unchanged") {
  const HierarchicalParams p = random_hierarchy(3, 6, 1);
  const std::vector<TaskBatches> tasks{random_task(2, 6, 2)};
  DmilConfig c = small_config();
  c.beta = 0.0;
  CHECK(bitwise_equal(meta_train_step(p, tasks, c), p));
}

TEST_CASE("summed outer updates scale with duplicated tasks") {
  const HierarchicalParams p = random_hierarchy(3, 6, 4);
  const TaskBatches task = random_task(2, 6, 5);
  DmilConfig c = small_config();
  c.reduce = OuterReduce::sum;
  const HierarchicalParams once = meta_train_step(p, std::vector<TaskBatches>{task}, c);
  const HierarchicalParams thrice = meta_train_step(p, std::vector<TaskBatches>{task, task, task}, c);
  const ParamVector d1 = once.high - p.high, d3 = thrice.high - p.high;
  CHECK(max_abs_diff(d3, 3.0 * d1) <= 1e-12);
  for (std::size_t k = 0; k < 3; ++k)
    CHECK(max_abs_diff(thrice.skills[k] - p.skills[k], 3.0 * (once.skills[k] - p.skills[k])) <= 1e-12);

  // The mean reduction rescales the summed gradient.
  c.reduce = OuterReduce::mean;
  const MetaGradient g = accumulate_meta_gradient(p, std::vector<TaskBatches>{task, task, task}, c).gradient;
  CHECK(bitwise_equal(meta_train_step(p, std::vector<TaskBatches>{task, task, task}, c).high,
                      p.high.descend(c.beta / 3.0, g.high)));
}

TEST_CASE("a two-task step equals the hand-assembled phases") {
  const HierarchicalParams p = random_hierarchy(2, 6, 7);
  const std::vector<TaskBatches> tasks{random_task(2, 6, 8), random_task(3, 5, 9)};
  const DmilConfig c = small_config(0.02, 2);

  ParamVector g_high(p.high.size());
  std::vector<ParamVector> g_skills(2, ParamVector(p.skills[0].size()));
  for (const auto& t : tasks) {
    const HighInner hi = hi_step(p, t.tau[0], c.alpha, c.inner_steps, c.lambda_aux);
    const auto li = li_step(p, partition_by_skill(p.high_shape, hi.trace.adapted, t.tau[1].pairs), c.alpha,
                            c.inner_steps);
    std::vector<ParamVector> adapted{li[0].trace.adapted, li[1].trace.adapted};
    g_high += ho_grad(hi, p, t.tau[2], adapted, c.lambda_aux, c.mode).gradient;
    const LowOuter lo = lo_grad(li, p, hi.trace.adapted, t.tau[3].pairs, c.mode);
    for (std::size_t k = 0; k < 2; ++k) g_skills[k] += lo.gradients[k];
  }
  const HierarchicalParams next = meta_train_step(p, tasks, c);
  CHECK(bitwise_equal(next.high, p.high.descend(c.beta / 2.0, g_high)));
  for (std::size_t k = 0; k < 2; ++k) CHECK(bitwise_equal(next.skills[k], p.skills[k].descend(c.beta / 2.0, g_skills[k])));
}

TEST_CASE("with one skill and no auxiliary loss the skill update is the MAML update") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const HierarchicalParams p = random_hierarchy(1, 8, seed);
    std::vector<TaskBatches> tasks;
    for (std::uint64_t i = 0; i < 3; ++i) tasks.push_back(random_task(2, 7, derive_seed(seed, 10 + i)));
    DmilConfig c = small_config(0.03, 3);
    c.lambda_aux = 0.0;
    const HierarchicalParams next = meta_train_step(p, tasks, c);
    CHECK(bitwise_equal(next.skills[0], maml_train_step(p.skill_shape, p.skills[0], tasks, c)));
    CHECK(bitwise_equal(next.high, p.high));
    CHECK(accumulate_meta_gradient(p, tasks, c).gradient.high.values().isZero(0.0));
  }
}

TEST_CASE("every phase reads the pre-step parameters") {
  const HierarchicalParams p = random_hierarchy(3, 6, 31);
  std::vector<TaskBatches> tasks;
  for (std::uint64_t i = 0; i < 4; ++i) tasks.push_back(random_task(2, 6, derive_seed(32, i)));
  const DmilConfig c = small_config();
  std::vector<std::pair<Phase, std::size_t>> seen;
  bool all_pre_step = true;
  HierarchicalParams probe_copy = p;
  const HierarchicalParams next = meta_train_step(p, tasks, c, [&](Phase phase, std::size_t task, const HierarchicalParams& q) {
    seen.emplace_back(phase, task);
    all_pre_step = all_pre_step && bitwise_equal(q, p);
    // Mutating a copy mid-step must not leak into the step.
    probe_copy.high[0] += 1.0;
    probe_copy.skills[0][0] -= 1.0;
  });
  CHECK(all_pre_step);
  CHECK(seen.size() == 16);
  CHECK(bitwise_equal(next, meta_train_step(p, tasks, c)));
}

TEST_CASE("task order changes the summed gradient by at most reassociation error") {
  const HierarchicalParams p = random_hierarchy(3, 6, 41);
  std::vector<TaskBatches> tasks;
  for (std::uint64_t i = 0; i < 5; ++i) tasks.push_back(random_task(2, 6, derive_seed(42, i)));
  const DmilConfig c = small_config();
  const MetaGradient base = accumulate_meta_gradient(p, tasks, c).gradient;
  CHECK(bitwise_equal(base.high, accumulate_meta_gradient(p, tasks, c).gradient.high));
  std::vector<std::size_t> order(tasks.size());
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(43);
  for (int trial = 0; trial < 10; ++trial) {
    shuffle(order, rng);
    std::vector<TaskBatches> permuted;
    for (auto i : order) permuted.push_back(tasks[i]);
    const MetaGradient g = accumulate_meta_gradient(p, permuted, c).gradient;
    CHECK(max_abs_diff(g.high, base.high) <= 1e-12);
    for (std::size_t k = 0; k < 3; ++k) CHECK(max_abs_diff(g.skills[k], base.skills[k]) <= 1e-12);
  }
}

TEST_CASE("parallel task evaluation reproduces the serial sum bit for bit") {
  const HierarchicalParams p = random_hierarchy(3, 6, 51);
  std::vector<TaskBatches> tasks;
  for (std::uint64_t i = 0; i < 5; ++i) tasks.push_back(random_task(2, 6, derive_seed(52, i)));
  const DmilConfig c = small_config();
  const MetaGradient serial = accumulate_meta_gradient(p, tasks, c, 1).gradient;
  const MetaGradient parallel = accumulate_meta_gradient(p, tasks, c, 3).gradient;
  CHECK(bitwise_equal(serial.high, parallel.high));
  for (std::size_t k = 0; k < 3; ++k) CHECK(bitwise_equal(serial.skills[k], parallel.skills[k]));
}

TEST_CASE("few_shot_adapt") {
  const HierarchicalParams p = random_hierarchy(3, 8, 61);
  const Batch b = random_batch(1, 12, 62);
  Trajectory demo{b.pairs.states, b.pairs.actions, std::nullopt};
  SUBCASE("zero rate is the identity") {
    CHECK(bitwise_equal(few_shot_adapt(p, std::vector<Trajectory>{demo}, 0.0, 3, 0.1), p));
  }
  SUBCASE("three identical demonstrations adapt like one") {
    const HierarchicalParams one = few_shot_adapt(p, std::vector<Trajectory>{demo}, 0.01, 3, 0.1);
    const HierarchicalParams three = few_shot_adapt(p, std::vector<Trajectory>{demo, demo, demo}, 0.01, 3, 0.1);
    CHECK(max_abs_diff(one.high, three.high) <= 1e-12);
    for (std::size_t k = 0; k < 3; ++k) CHECK(max_abs_diff(one.skills[k], three.skills[k]) <= 1e-12);
  }
  SUBCASE("scopes restrict what moves") {
    const std::vector<Trajectory> demos{demo};
    const HierarchicalParams high = few_shot_adapt(p, demos, 0.01, 3, 0.1, AdaptScope::high_only);
    const HierarchicalParams low = few_shot_adapt(p, demos, 0.01, 3, 0.1, AdaptScope::skills_only);
    CHECK_FALSE(bitwise_equal(high.high, p.high));
    for (std::size_t k = 0; k < 3; ++k) CHECK(bitwise_equal(high.skills[k], p.skills[k]));
    CHECK(bitwise_equal(low.high, p.high));
    CHECK(bitwise_equal(few_shot_adapt(p, demos, 0.01, 3, 0.1, AdaptScope::none), p));
  }
  SUBCASE("adapting on a skill's own rollout lowers its behaviour cloning loss") {
    // Actions produced by skill 1 with a small perturbation.
    Trajectory own = demo;
    own.actions = mlp_forward(p.skill_shape, p.skills[1], own.states);
    SplitMix64 rng(63);
    own.actions += 0.1 * random_matrix(own.actions.rows(), own.actions.cols(), rng);
    const HierarchicalParams a = few_shot_adapt(p, std::vector<Trajectory>{own}, 5e-4, 3, 0.1);
    const Partition part = partition_by_skill(p.high_shape, a.high, PairSet{own.states, own.actions});
    for (std::size_t k = 0; k < 3; ++k) {
      if (part.parts[k].empty()) continue;
      const LossFunction f = skill_loss(p.skill_shape, part.parts[k]);
      if (evaluate(f, a.skills[k]) >= evaluate(f, p.skills[k])) MESSAGE("skill " << k << " loss did not decrease");
      CHECK(evaluate(f, a.skills[k]) < evaluate(f, p.skills[k]));
    }
  }
}

TEST_CASE("predict_action") {
  SUBCASE("one skill is always chosen") {
    const HierarchicalParams p = random_hierarchy(1, 8, 71);
    SplitMix64 rng(72);
    for (int i = 0; i < 10; ++i) CHECK(predict_action(p, random_matrix(4, 1, rng)).second == 0);
  }
  SUBCASE("hand-set selector and zero skill network") {
    HierarchicalParams p = HierarchicalParams::init({{4, 3}}, {{4, 8, 2}}, 73);
    p.high = favouring(3, 1);
    p.skills[1] = ParamVector(p.skill_shape.param_count());
    const auto [a, z] = predict_action(p, Vector::Ones(4));
    CHECK(z == 1);
    CHECK(a.isZero(0.0));
  }
  SUBCASE("random instances match the brute-force recomputation") {
    const HierarchicalParams p = random_hierarchy(3, 8, 74);
    SplitMix64 rng(75);
    const Matrix states = random_matrix(40, 4, rng);
    const auto [actions, z] = predict_actions(p, states);
    const auto expected_z = brute_force_argmax(p.high_shape, p.high, states);
    CHECK(z == expected_z);
    for (Eigen::Index t = 0; t < states.rows(); ++t) {
      const auto a = reference_forward(p.skill_shape, p.skills[static_cast<std::size_t>(expected_z[t])], row(states, t));
      CHECK(std::abs(actions(t, 0) - a[0]) <= 1e-12);
      CHECK(std::abs(actions(t, 1) - a[1]) <= 1e-12);
      const auto single = predict_action(p, states.row(t).transpose());
      CHECK(single.second == z[static_cast<std::size_t>(t)]);
    }
  }
}
