#include "dmil/tasks.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

namespace dmil {

namespace {

Eigen::Matrix2d rotation(double angle) {
  Eigen::Matrix2d r;
  r << std::cos(angle), -std::sin(angle), std::sin(angle), std::cos(angle);
  return r;
}

Eigen::Vector2d polar(double radius, double angle) { return {radius * std::cos(angle), radius * std::sin(angle)}; }

double orbit_heading(double rotation_angle) { return std::numbers::pi / 3.0 + rotation_angle / 3.0; }

}  // namespace

void TaskSpec::validate() const {
  require(outer_radius > inner_radius && inner_radius > 0.0, "task radii must satisfy r1 > r2 > 0");
  require(gain_scale >= TaskRanges::gain_lo && gain_scale <= TaskRanges::gain_hi, "gain_scale must lie in [0.5, 2]");
  require(waypoints.size() >= 2, "task needs at least two waypoints");
  require(noise_std >= 0.0, "noise_std must be >= 0");
}

void TaskDataset::validate() const {
  require(!support.empty() && !query.empty(), "task dataset needs nonempty support and query sets");
  for (const auto& t : support) t.validate();
  for (const auto& t : query) t.validate();
}

TaskSpec sample_task(std::uint64_t seed, double noise_std) {
  SplitMix64 rng(derive_seed(seed, 0x7a5c));
  TaskSpec spec;
  spec.seed = seed;
  spec.rotation_angle = rng.uniform(-std::numbers::pi / 4.0, std::numbers::pi / 4.0);
  spec.gain_scale = rng.uniform(TaskRanges::gain_lo, TaskRanges::gain_hi);
  spec.outer_radius = rng.uniform(TaskRanges::outer_radius_lo, TaskRanges::outer_radius_hi);
  spec.inner_radius = rng.uniform(TaskRanges::inner_radius_lo, TaskRanges::inner_radius_hi);
  const double box = TaskRanges::first_waypoint_box;
  Eigen::Vector2d w(rng.uniform(-box, box), rng.uniform(-box, box));
  spec.waypoints.push_back(w);
  for (int i = 1; i < TaskRanges::waypoints; ++i) {
    const double gap = spec.outer_radius + rng.uniform(TaskRanges::waypoint_gap_lo, TaskRanges::waypoint_gap_hi);
    w += polar(gap, rng.uniform(0.0, 2.0 * std::numbers::pi));
    spec.waypoints.push_back(w);
  }
  spec.noise_std = noise_std;
  spec.validate();
  return spec;
}

int expert_skill(const TaskSpec& spec, const Vector& state) {
  require(state.size() == static_cast<Eigen::Index>(kStateDim), "expert expects a 4-dimensional state");
  const double d = (state.tail<2>() - state.head<2>()).norm();
  if (d > spec.outer_radius) return 0;
  if (d > spec.inner_radius) return 1;
  return 2;
}

std::pair<Vector, int> expert_action(const TaskSpec& spec, const Vector& state, SplitMix64* noise) {
  const int skill = expert_skill(spec, state);
  const Eigen::Vector2d delta = state.tail<2>() - state.head<2>();
  const double d = delta.norm();
  const Eigen::Vector2d unit = delta / std::max(d, 1e-6);
  Eigen::Vector2d a;
  switch (skill) {
    case 0:
      a = spec.gain_scale * rotation(spec.rotation_angle) * unit;
      break;
    case 1:
      a = spec.gain_scale * rotation(orbit_heading(spec.rotation_angle)) * unit;
      break;
    default:
      a = kDockGain * spec.gain_scale * rotation(spec.rotation_angle) * delta;
      break;
  }
  if (noise != nullptr && spec.noise_std > 0.0) {
    a[0] += spec.noise_std * noise->normal();
    a[1] += spec.noise_std * noise->normal();
  }
  return {Vector(a), skill};
}

Eigen::Vector2d clip_action(const Eigen::Vector2d& a) {
  const double n = a.norm();
  return n > kMaxAction ? Eigen::Vector2d(a * (kMaxAction / n)) : a;
}

Eigen::Vector2d sample_start(const TaskSpec& spec, SplitMix64& rng) {
  const double gap = spec.outer_radius + rng.uniform(TaskRanges::start_gap_lo, TaskRanges::start_gap_hi);
  return spec.waypoints.front() + polar(gap, rng.uniform(0.0, 2.0 * std::numbers::pi));
}

namespace {

Vector make_state(const Eigen::Vector2d& p, const Eigen::Vector2d& g) {
  Vector s(4);
  s << p, g;
  return s;
}

}  // namespace

Rollout rollout_policy(const TaskSpec& spec, const Policy& policy, const Eigen::Vector2d& start, std::size_t horizon) {
  Rollout out;
  std::vector<Vector> states, actions;
  Eigen::Vector2d p = start;
  std::size_t goal = 0;
  for (std::size_t t = 0; t < horizon; ++t) {
    const Vector s = make_state(p, spec.waypoints[goal]);
    auto [a, z] = policy(s);
    require(a.size() == static_cast<Eigen::Index>(kActionDim), "policy must return a 2-dimensional action");
    states.push_back(s);
    actions.push_back(a);
    out.skills.push_back(z);
    p += kTimeStep * clip_action(a);
    if ((spec.waypoints[goal] - p).norm() < kWaypointTolerance) {
      if (goal + 1 == spec.waypoints.size()) {
        out.success = true;
        break;
      }
      ++goal;
    }
  }
  out.trajectory.states.resize(static_cast<Eigen::Index>(states.size()), static_cast<Eigen::Index>(kStateDim));
  out.trajectory.actions.resize(static_cast<Eigen::Index>(actions.size()), static_cast<Eigen::Index>(kActionDim));
  for (std::size_t t = 0; t < states.size(); ++t) {
    out.trajectory.states.row(static_cast<Eigen::Index>(t)) = states[t].transpose();
    out.trajectory.actions.row(static_cast<Eigen::Index>(t)) = actions[t].transpose();
  }
  return out;
}

Trajectory rollout_expert(const TaskSpec& spec, std::size_t horizon, std::uint64_t seed) {
  require(horizon >= 2, "rollout_expert needs T >= 2");
  spec.validate();
  SplitMix64 rng(seed);
  const Eigen::Vector2d start = sample_start(spec, rng);
  Trajectory traj;
  traj.states.resize(static_cast<Eigen::Index>(horizon), static_cast<Eigen::Index>(kStateDim));
  traj.actions.resize(static_cast<Eigen::Index>(horizon), static_cast<Eigen::Index>(kActionDim));
  std::vector<int> skills;
  Eigen::Vector2d p = start;
  std::size_t goal = 0;
  for (std::size_t t = 0; t < horizon; ++t) {
    const Vector s = make_state(p, spec.waypoints[goal]);
    auto [a, z] = expert_action(spec, s, &rng);
    traj.states.row(static_cast<Eigen::Index>(t)) = s.transpose();
    traj.actions.row(static_cast<Eigen::Index>(t)) = a.transpose();
    skills.push_back(z);
    p += kTimeStep * clip_action(a);
    if ((spec.waypoints[goal] - p).norm() < kWaypointTolerance && goal + 1 < spec.waypoints.size()) ++goal;
  }
  traj.true_skills = std::move(skills);
  return traj;
}

TaskDataset make_dataset(const TaskSpec& spec, std::size_t n_support, std::size_t n_query, std::size_t horizon,
                         std::uint64_t seed) {
  require(n_support >= 4, "n_support must be >= 4 so that four batches can be drawn");
  require(n_query >= 1, "n_query must be >= 1");
  TaskDataset ds;
  ds.spec = spec;
  for (std::size_t i = 0; i < n_support + n_query; ++i) {
    Trajectory t = rollout_expert(spec, horizon, derive_seed(seed, i));
    (i < n_support ? ds.support : ds.query).push_back(std::move(t));
  }
  return ds;
}

namespace {

using nlohmann::json;

json matrix_rows(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix rows_matrix(const json& rows, std::size_t width, std::size_t line, const char* field) {
  if (!rows.is_array()) throw ParseError(line, std::string("field '") + field + "' must be an array");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const json& row = rows[r];
    if (!row.is_array() || row.size() != width)
      throw ParseError(line, std::string("field '") + field + "' row " + std::to_string(r) + " must have " +
                                 std::to_string(width) + " numbers");
    for (std::size_t c = 0; c < width; ++c) {
      if (!row[c].is_number()) throw ParseError(line, std::string("field '") + field + "' holds a non-number");
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c].get<double>();
    }
  }
  return m;
}

void write_line(std::ofstream& out, const TaskDataset& ds, const Trajectory& t, const char* split) {
  json j;
  j["task_seed"] = ds.spec.seed;
  j["noise_std"] = ds.spec.noise_std;
  j["split"] = split;
  j["states"] = matrix_rows(t.states);
  j["actions"] = matrix_rows(t.actions);
  j["true_skills"] = t.true_skills ? json(*t.true_skills) : json(nullptr);
  out << j.dump() << '\n';
}

}  // namespace

void save_datasets(const std::filesystem::path& path, std::span<const TaskDataset> datasets) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& ds : datasets) {
    for (const auto& t : ds.support) write_line(out, ds, t, "support");
    for (const auto& t : ds.query) write_line(out, ds, t, "query");
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<TaskDataset> load_datasets(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<TaskDataset> out;
  std::map<std::uint64_t, std::size_t> index;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(line, std::string("invalid JSON: ") + e.what());
    }
    for (const char* key : {"task_seed", "noise_std", "split", "states", "actions", "true_skills"})
      if (!j.contains(key)) throw ParseError(line, std::string("missing field '") + key + "'");
    if (!j["task_seed"].is_number_unsigned() && !j["task_seed"].is_number_integer())
      throw ParseError(line, "task_seed must be an integer");
    if (!j["noise_std"].is_number()) throw ParseError(line, "noise_std must be a number");
    const auto seed = j["task_seed"].get<std::uint64_t>();
    const std::string split = j["split"].is_string() ? j["split"].get<std::string>() : "";
    if (split != "support" && split != "query") throw ParseError(line, "split must be 'support' or 'query'");
    Trajectory t;
    t.states = rows_matrix(j["states"], kStateDim, line, "states");
    t.actions = rows_matrix(j["actions"], kActionDim, line, "actions");
    if (!j["true_skills"].is_null()) {
      if (!j["true_skills"].is_array()) throw ParseError(line, "true_skills must be an array or null");
      std::vector<int> skills;
      for (const auto& v : j["true_skills"]) {
        if (!v.is_number_integer()) throw ParseError(line, "true_skills holds a non-integer");
        skills.push_back(v.get<int>());
      }
      t.true_skills = std::move(skills);
    }
    try {
      t.validate();
    } catch (const ContractError& e) {
      throw ParseError(line, e.what());
    }
    auto [it, inserted] = index.try_emplace(seed, out.size());
    if (inserted) {
      out.emplace_back();
      out.back().spec = sample_task(seed, j["noise_std"].get<double>());
    }
    TaskDataset& ds = out[it->second];
    (split == "support" ? ds.support : ds.query).push_back(std::move(t));
  }
  for (const auto& ds : out) {
    require(ds.support.size() >= 4, "task " + std::to_string(ds.spec.seed) + " has fewer than 4 support trajectories");
    require(!ds.query.empty(), "task " + std::to_string(ds.spec.seed) + " has no query trajectories");
  }
  return out;
}

TaskBatches BatchSampler::draw(const TaskDataset& task, std::size_t trajectories_per_batch) {
  require(trajectories_per_batch >= 1, "batch size must be >= 1");
  require(!task.support.empty(), "task has no support trajectories");
  if (order_.size() != task.support.size()) {
    order_.resize(task.support.size());
    cursor_ = order_.size();
  }
  TaskBatches out;
  for (auto& batch : out.tau) {
    std::vector<const Trajectory*> picked;
    for (std::size_t i = 0; i < trajectories_per_batch; ++i) {
      if (cursor_ == order_.size()) {
        for (std::size_t j = 0; j < order_.size(); ++j) order_[j] = j;
        shuffle(order_, rng_);
        cursor_ = 0;
      }
      picked.push_back(&task.support[order_[cursor_++]]);
    }
    batch = Batch::stack(std::span<const Trajectory* const>(picked));
  }
  return out;
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m, SplitMix64& rng) {
  require(m <= n, "cannot draw more distinct indices than available");
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(all[i], all[j]);
  }
  all.resize(m);
  return all;
}

}  // namespace dmil
