#include "dmil/data.hpp"

namespace dmil {

void Trajectory::validate() const {
  require(states.rows() >= 2, "trajectory needs at least two steps");
  require(actions.rows() == states.rows(), "trajectory states and actions differ in length");
  if (true_skills) require(true_skills->size() == length(), "trajectory skill labels differ in length");
}

namespace {
bool same(const Matrix& a, const Matrix& b) { return a.rows() == b.rows() && a.cols() == b.cols() && a == b; }
}  // namespace

bool operator==(const Trajectory& a, const Trajectory& b) {
  return same(a.states, b.states) && same(a.actions, b.actions) && a.true_skills == b.true_skills;
}

PairSet PairSet::select(std::span<const std::size_t> rows) const {
  PairSet out;
  out.states.resize(static_cast<Eigen::Index>(rows.size()), states.cols());
  out.actions.resize(static_cast<Eigen::Index>(rows.size()), actions.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < size(), "PairSet::select row out of range");
    out.states.row(static_cast<Eigen::Index>(i)) = states.row(static_cast<Eigen::Index>(rows[i]));
    out.actions.row(static_cast<Eigen::Index>(i)) = actions.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> Batch::neighbour_pairs() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const std::size_t begin = starts[i];
    const std::size_t end = i + 1 < starts.size() ? starts[i + 1] : size();
    for (std::size_t t = begin; t + 1 < end; ++t) out.emplace_back(t, t + 1);
  }
  return out;
}

Batch Batch::stack(std::span<const Trajectory* const> trajectories) {
  Batch b;
  Eigen::Index rows = 0;
  Eigen::Index sdim = 0, adim = 0;
  for (const Trajectory* t : trajectories) {
    t->validate();
    if (rows == 0) {
      sdim = t->states.cols();
      adim = t->actions.cols();
    }
    require(t->states.cols() == sdim && t->actions.cols() == adim, "trajectories differ in dimensions");
    rows += t->states.rows();
  }
  b.pairs.states.resize(rows, sdim);
  b.pairs.actions.resize(rows, adim);
  Eigen::Index r = 0;
  for (const Trajectory* t : trajectories) {
    b.starts.push_back(static_cast<std::size_t>(r));
    b.pairs.states.middleRows(r, t->states.rows()) = t->states;
    b.pairs.actions.middleRows(r, t->actions.rows()) = t->actions;
    r += t->states.rows();
  }
  return b;
}

Batch Batch::stack(std::span<const Trajectory> trajectories) {
  std::vector<const Trajectory*> ptrs;
  for (const auto& t : trajectories) ptrs.push_back(&t);
  return stack(std::span<const Trajectory* const>(ptrs));
}

Batch Batch::concat(std::span<const Batch> batches) {
  Batch out;
  Eigen::Index rows = 0, sdim = 0, adim = 0;
  for (const auto& b : batches) {
    if (b.size() == 0) continue;
    if (rows == 0) {
      sdim = b.pairs.states.cols();
      adim = b.pairs.actions.cols();
    }
    rows += static_cast<Eigen::Index>(b.size());
  }
  out.pairs.states.resize(rows, sdim);
  out.pairs.actions.resize(rows, adim);
  Eigen::Index r = 0;
  for (const auto& b : batches) {
    if (b.size() == 0) continue;
    for (auto s : b.starts) out.starts.push_back(s + static_cast<std::size_t>(r));
    out.pairs.states.middleRows(r, b.pairs.states.rows()) = b.pairs.states;
    out.pairs.actions.middleRows(r, b.pairs.actions.rows()) = b.pairs.actions;
    r += static_cast<Eigen::Index>(b.size());
  }
  return out;
}

}  // namespace dmil
