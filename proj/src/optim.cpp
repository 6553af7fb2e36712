#include "dmil/optim.hpp"

#include <cmath>

namespace dmil {

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEpsilon = 1e-8;
}  // namespace

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown meta optimizer '" + name + "' (valid: sgd, adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

MetaOptimizer::MetaOptimizer(OptimizerKind kind, double learning_rate, std::size_t skills)
    : kind_(kind), lr_(learning_rate), skills_(skills) {}

void MetaOptimizer::update(Moments& state, ParamVector& params, const ParamVector& gradient, double scale) {
  require(params.size() == gradient.size(), "optimizer gradient length differs from parameters");
  if (kind_ == OptimizerKind::sgd) {
    params = params.descend(lr_ * scale, gradient);
  } else {
    if (state.m.size() == 0) {
      state.m = Vector::Zero(gradient.values().size());
      state.v = Vector::Zero(gradient.values().size());
    }
    ++state.t;
    const Vector g = scale * gradient.values();
    state.m = kBeta1 * state.m + (1.0 - kBeta1) * g;
    state.v = kBeta2 * state.v + (1.0 - kBeta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
    Vector direction = (state.m / c1).array() / ((state.v / c2).array().sqrt() + kEpsilon);
    params = params.descend(lr_, ParamVector(std::move(direction)));
  }
  if (!params.all_finite()) throw NumericError("optimizer", "update produced non-finite parameters");
}

void MetaOptimizer::step_high(ParamVector& params, const ParamVector& gradient) { update(high_, params, gradient, 1.0); }

void MetaOptimizer::step_skill(std::size_t k, ParamVector& params, const ParamVector& gradient) {
  require(k < skills_.size(), "optimizer skill index out of range");
  update(skills_[k], params, gradient, 1.0);
}

void MetaOptimizer::step(HierarchicalParams& params, const MetaGradient& gradient, OuterReduce reduce) {
  require(gradient.skills.size() == params.K() && params.K() == skills_.size(), "optimizer skill count mismatch");
  require(gradient.task_count > 0, "meta-gradient holds no tasks");
  if (kind_ == OptimizerKind::sgd) {
    params = apply_meta_gradient(params, gradient, lr_, reduce);
    return;
  }
  const double scale = reduce == OuterReduce::mean ? 1.0 / static_cast<double>(gradient.task_count) : 1.0;
  update(high_, params.high, gradient.high, scale);
  for (std::size_t k = 0; k < params.K(); ++k) update(skills_[k], params.skills[k], gradient.skills[k], scale);
}

}  // namespace dmil
