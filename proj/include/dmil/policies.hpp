#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dmil/autodiff.hpp"

namespace dmil {

/// Fully connected network, ReLU on hidden layers, linear output layer.
///
/// Parameter layout, layer by layer: the in x out weight matrix in
/// column-major order followed by the out biases. The forward pass of a batch
/// (one sample per row) is H <- relu(H W + 1 b^T), without relu on the last
/// layer.
struct MlpShape {
  std::vector<std::size_t> layer_sizes;

  void validate() const;
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t param_count() const;

  friend bool operator==(const MlpShape&, const MlpShape&) = default;
};

/// Weights ~ N(0, 1) / sqrt(fan_in), biases zero. Deterministic in seed.
/// The output layer's weights are further multiplied by `output_gain`.
ParamVector init_params(const MlpShape& shape, std::uint64_t seed, double output_gain = 1.0);

/// Batched forward pass; `inputs` holds one sample per row.
Matrix mlp_forward(const MlpShape& shape, const ParamVector& params, const Matrix& inputs);
/// The same pass recorded on a tape.
ad::Var mlp_forward(const MlpShape& shape, ad::Var params, ad::Var inputs);

/// Row-wise softmax of the high-level logits.
Matrix high_probabilities(const MlpShape& shape, const ParamVector& params, const Matrix& states);
Vector high_forward(const MlpShape& shape, const ParamVector& params, const Vector& state);
Vector skill_forward(const MlpShape& shape, const ParamVector& params, const Vector& state);

/// Index of the largest entry of each row; ties go to the lowest index.
std::vector<int> row_argmax(const Matrix& m);

/// The high-level selector and its K sub-skill policies.
struct HierarchicalParams {
  MlpShape high_shape;
  MlpShape skill_shape;
  ParamVector high;
  std::vector<ParamVector> skills;

  std::size_t K() const { return skills.size(); }
  void validate() const;

  static HierarchicalParams init(const MlpShape& high_shape, const MlpShape& skill_shape, std::uint64_t seed,
                                 double skill_output_gain = 1.0);
};

bool bitwise_equal(const HierarchicalParams& a, const HierarchicalParams& b);

}  // namespace dmil
