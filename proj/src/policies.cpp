#include "dmil/policies.hpp"

#include <cmath>

#include "dmil/random.hpp"

namespace dmil {

void MlpShape::validate() const {
  require(layer_sizes.size() >= 2, "MlpShape needs at least an input and an output layer");
  for (auto s : layer_sizes) require(s >= 1, "MlpShape layer sizes must be >= 1");
}

std::size_t MlpShape::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) n += layer_sizes[l] * layer_sizes[l + 1] + layer_sizes[l + 1];
  return n;
}

ParamVector init_params(const MlpShape& shape, std::uint64_t seed, double output_gain) {
  shape.validate();
  require(std::isfinite(output_gain) && output_gain >= 0.0, "output gain must be finite and >= 0");
  SplitMix64 rng(seed);
  ParamVector p(shape.param_count());
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < shape.layer_sizes.size(); ++l) {
    const std::size_t in = shape.layer_sizes[l], out = shape.layer_sizes[l + 1];
    const bool last = l + 2 == shape.layer_sizes.size();
    const double s = (last ? output_gain : 1.0) / std::sqrt(static_cast<double>(in));
    for (std::size_t i = 0; i < in * out; ++i) p[offset + i] = s * rng.normal();
    offset += in * out + out;
  }
  return p;
}

Matrix mlp_forward(const MlpShape& shape, const ParamVector& params, const Matrix& inputs) {
  require(params.size() == shape.param_count(), "parameter count does not match network shape");
  require(inputs.cols() == static_cast<Eigen::Index>(shape.input_dim()), "input dimension does not match network");
  Matrix h = inputs;
  Eigen::Index offset = 0;
  const std::size_t layers = shape.layer_sizes.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto in = static_cast<Eigen::Index>(shape.layer_sizes[l]);
    const auto out = static_cast<Eigen::Index>(shape.layer_sizes[l + 1]);
    Eigen::Map<const Matrix> w(params.values().data() + offset, in, out);
    Eigen::Map<const Eigen::RowVectorXd> b(params.values().data() + offset + in * out, out);
    Matrix next = h * w;
    next.rowwise() += b;
    if (l + 1 < layers) next = next.cwiseMax(0.0);
    h = std::move(next);
    offset += in * out + out;
  }
  return h;
}

ad::Var mlp_forward(const MlpShape& shape, ad::Var params, ad::Var inputs) {
  require(params.rows() == static_cast<Eigen::Index>(shape.param_count()), "parameter count does not match network shape");
  require(inputs.cols() == static_cast<Eigen::Index>(shape.input_dim()), "input dimension does not match network");
  ad::Var h = inputs;
  Eigen::Index offset = 0;
  const std::size_t layers = shape.layer_sizes.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto in = static_cast<Eigen::Index>(shape.layer_sizes[l]);
    const auto out = static_cast<Eigen::Index>(shape.layer_sizes[l + 1]);
    const ad::Var w = ad::slice(params, offset, in, out);
    const ad::Var b = ad::slice(params, offset + in * out, 1, out);
    h = ad::add_row(ad::matmul(h, w), b);
    if (l + 1 < layers) h = ad::relu(h);
    offset += in * out + out;
  }
  return h;
}

Matrix high_probabilities(const MlpShape& shape, const ParamVector& params, const Matrix& states) {
  Matrix logits = mlp_forward(shape, params, states);
  const Vector row_max = logits.rowwise().maxCoeff();
  Matrix e = (logits.colwise() - row_max).array().exp().matrix();
  const Vector z = e.rowwise().sum();
  return e.array().colwise() / z.array();
}

Vector high_forward(const MlpShape& shape, const ParamVector& params, const Vector& state) {
  require(state.size() == static_cast<Eigen::Index>(shape.input_dim()), "state dimension does not match network");
  return high_probabilities(shape, params, state.transpose()).row(0).transpose();
}

Vector skill_forward(const MlpShape& shape, const ParamVector& params, const Vector& state) {
  require(state.size() == static_cast<Eigen::Index>(shape.input_dim()), "state dimension does not match network");
  return mlp_forward(shape, params, state.transpose()).row(0).transpose();
}

std::vector<int> row_argmax(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()), 0);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c)
      if (m(r, c) > m(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

void HierarchicalParams::validate() const {
  high_shape.validate();
  skill_shape.validate();
  require(!skills.empty(), "HierarchicalParams needs K >= 1");
  require(high_shape.output_dim() == skills.size(), "high-level output dimension must equal K");
  require(high_shape.input_dim() == skill_shape.input_dim(), "high-level and skill input dimensions differ");
  require(high.size() == high_shape.param_count(), "high-level parameter count does not match its shape");
  for (const auto& s : skills) require(s.size() == skill_shape.param_count(), "skill parameter count does not match its shape");
}

HierarchicalParams HierarchicalParams::init(const MlpShape& high_shape, const MlpShape& skill_shape,
                                            std::uint64_t seed, double skill_output_gain) {
  HierarchicalParams p;
  p.high_shape = high_shape;
  p.skill_shape = skill_shape;
  p.high = init_params(high_shape, derive_seed(seed, 0));
  for (std::size_t k = 0; k < high_shape.output_dim(); ++k)
    p.skills.push_back(init_params(skill_shape, derive_seed(seed, k + 1), skill_output_gain));
  p.validate();
  return p;
}

bool bitwise_equal(const HierarchicalParams& a, const HierarchicalParams& b) {
  if (!(a.high_shape == b.high_shape) || !(a.skill_shape == b.skill_shape)) return false;
  if (!bitwise_equal(a.high, b.high) || a.skills.size() != b.skills.size()) return false;
  for (std::size_t k = 0; k < a.skills.size(); ++k)
    if (!bitwise_equal(a.skills[k], b.skills[k])) return false;
  return true;
}

}  // namespace dmil
