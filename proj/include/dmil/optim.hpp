#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dmil/dmil.hpp"

namespace dmil {

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

/// Outer-loop optimizer applied to reduced meta-gradients. Each component
/// (the high-level network and every skill) keeps its own state so that
/// components can be stepped separately. With `sgd` a full step equals
/// apply_meta_gradient.
class MetaOptimizer {
 public:
  MetaOptimizer(OptimizerKind kind, double learning_rate, std::size_t skills);

  /// Reduces `gradient` (sum or mean over tasks) and updates all components.
  void step(HierarchicalParams& params, const MetaGradient& gradient, OuterReduce reduce);
  void step_high(ParamVector& params, const ParamVector& gradient);
  void step_skill(std::size_t k, ParamVector& params, const ParamVector& gradient);

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }

 private:
  struct Moments {
    Vector m;
    Vector v;
    long t = 0;
  };
  void update(Moments& state, ParamVector& params, const ParamVector& gradient, double scale);

  OptimizerKind kind_;
  double lr_;
  Moments high_;
  std::vector<Moments> skills_;
};

}  // namespace dmil
