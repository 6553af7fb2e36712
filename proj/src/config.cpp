#include "dmil/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace dmil {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

/// Reads the keys of one section, refusing keys it does not know.
class Section {
 public:
  Section(const json& root, std::string name, std::vector<std::string> keys)
      : name_(std::move(name)), keys_(std::move(keys)) {
    if (!root.contains(name_)) return;
    node_ = &root.at(name_);
    if (!node_->is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    const std::set<std::string> known(keys_.begin(), keys_.end());
    for (const auto& [key, value] : node_->items())
      if (!known.count(key))
        throw ConfigError("unknown config key '" + name_ + "." + key + "'; valid keys: " + join(keys_));
  }

  template <class T>
  void get(const char* key, T& out) const {
    if (node_ == nullptr || !node_->contains(key)) return;
    try {
      out = node_->at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  template <class T, class Parse>
  void get_parsed(const char* key, T& out, Parse parse) const {
    std::string text;
    get(key, text);
    if (!text.empty()) out = parse(text);
  }

 private:
  std::string name_;
  std::vector<std::string> keys_;
  const json* node_ = nullptr;
};

MetaGradMode parse_mode(const std::string& s) {
  if (s == "exact") return MetaGradMode::exact;
  if (s == "first_order") return MetaGradMode::first_order;
  throw ConfigError("dmil.mode must be 'exact' or 'first_order', got '" + s + "'");
}

HoLabels parse_ho_labels(const std::string& s) {
  if (s == "adapted") return HoLabels::adapted;
  if (s == "initial") return HoLabels::initial;
  throw ConfigError("dmil.ho_labels must be 'adapted' or 'initial', got '" + s + "'");
}

OuterReduce parse_reduce(const std::string& s) {
  if (s == "sum") return OuterReduce::sum;
  if (s == "mean") return OuterReduce::mean;
  throw ConfigError("dmil.outer_reduce must be 'sum' or 'mean', got '" + s + "'");
}

OptimizerKind parse_optimizer_key(const std::string& s) {
  try {
    return parse_optimizer(s);
  } catch (const ConfigError&) {
    throw ConfigError("dmil.meta_optimizer must be 'sgd' or 'adam', got '" + s + "'");
  }
}

}  // namespace

json ExperimentConfig::to_json() const {
  json j;
  j["data"] = {{"n_train_tasks", data.n_train_tasks}, {"n_test_tasks", data.n_test_tasks},
               {"n_support", data.n_support},         {"n_query", data.n_query},
               {"horizon", data.horizon},             {"noise_std", data.noise_std},
               {"train_seed_base", data.train_seed_base}, {"test_seed_base", data.test_seed_base}};
  j["model"] = {{"K", model.K}, {"high_hidden", model.high_hidden}, {"skill_hidden", model.skill_hidden},
                {"skill_output_gain", model.skill_output_gain}};
  const DmilConfig& c = dmil.core;
  j["dmil"] = {{"alpha", c.alpha},
               {"beta", c.beta},
               {"inner_steps", c.inner_steps},
               {"test_inner_steps", dmil.test_inner_steps},
               {"lambda_aux", c.lambda_aux},
               {"mode", c.mode == MetaGradMode::exact ? "exact" : "first_order"},
               {"ho_labels", c.ho_labels == HoLabels::adapted ? "adapted" : "initial"},
               {"outer_reduce", c.reduce == OuterReduce::mean ? "mean" : "sum"},
               {"batch_trajectories", dmil.batch_trajectories},
               {"tasks_per_step", dmil.tasks_per_step},
               {"meta_optimizer", to_string(dmil.meta_optimizer)}};
  j["eval"] = {{"shots", eval.shots},
               {"rollout_episodes", eval.rollout_episodes},
               {"rollout_horizon", eval.rollout_horizon},
               {"gradcheck_instances", eval.gradcheck_instances},
               {"gradcheck_hidden", eval.gradcheck_hidden},
               {"gradcheck_K", eval.gradcheck_K},
               {"gradcheck_alpha", eval.gradcheck_alpha},
               {"gradcheck_steps", eval.gradcheck_steps},
               {"fd_step", eval.fd_step},
               {"fd_tolerance", eval.fd_tolerance},
               {"fd_floor", eval.fd_floor},
               {"gradcheck_kink_margin", eval.gradcheck_kink_margin}};
  j["run"] = {{"seed", run.seed},       {"iterations", run.iterations}, {"checkpoint_every", run.checkpoint_every},
              {"threads", run.threads}, {"method", run.method},         {"methods", run.methods},
              {"seeds", run.seeds}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const std::vector<std::string> sections{"data", "model", "dmil", "eval", "run"};
  for (const auto& [key, value] : j.items())
    if (std::find(sections.begin(), sections.end(), key) == sections.end())
      throw ConfigError("unknown config section '" + key + "'; valid sections: " + join(sections));

  ExperimentConfig c;
  const Section data(j, "data", {"n_train_tasks", "n_test_tasks", "n_support", "n_query", "horizon", "noise_std",
                                 "train_seed_base", "test_seed_base"});
  data.get("n_train_tasks", c.data.n_train_tasks);
  data.get("n_test_tasks", c.data.n_test_tasks);
  data.get("n_support", c.data.n_support);
  data.get("n_query", c.data.n_query);
  data.get("horizon", c.data.horizon);
  data.get("noise_std", c.data.noise_std);
  data.get("train_seed_base", c.data.train_seed_base);
  data.get("test_seed_base", c.data.test_seed_base);

  const Section model(j, "model", {"K", "high_hidden", "skill_hidden", "skill_output_gain"});
  model.get("K", c.model.K);
  model.get("high_hidden", c.model.high_hidden);
  model.get("skill_hidden", c.model.skill_hidden);
  model.get("skill_output_gain", c.model.skill_output_gain);

  const Section d(j, "dmil", {"alpha", "beta", "inner_steps", "test_inner_steps", "lambda_aux", "mode", "ho_labels",
                              "outer_reduce", "batch_trajectories", "tasks_per_step", "meta_optimizer"});
  d.get("alpha", c.dmil.core.alpha);
  d.get("beta", c.dmil.core.beta);
  d.get("inner_steps", c.dmil.core.inner_steps);
  d.get("test_inner_steps", c.dmil.test_inner_steps);
  d.get("lambda_aux", c.dmil.core.lambda_aux);
  d.get_parsed("mode", c.dmil.core.mode, parse_mode);
  d.get_parsed("ho_labels", c.dmil.core.ho_labels, parse_ho_labels);
  d.get_parsed("outer_reduce", c.dmil.core.reduce, parse_reduce);
  d.get("batch_trajectories", c.dmil.batch_trajectories);
  d.get("tasks_per_step", c.dmil.tasks_per_step);
  d.get_parsed("meta_optimizer", c.dmil.meta_optimizer, parse_optimizer_key);

  const Section e(j, "eval", {"shots", "rollout_episodes", "rollout_horizon", "gradcheck_instances",
                              "gradcheck_hidden", "gradcheck_K", "gradcheck_alpha", "gradcheck_steps", "fd_step",
                              "fd_tolerance", "fd_floor", "gradcheck_kink_margin"});
  e.get("shots", c.eval.shots);
  e.get("rollout_episodes", c.eval.rollout_episodes);
  e.get("rollout_horizon", c.eval.rollout_horizon);
  e.get("gradcheck_instances", c.eval.gradcheck_instances);
  e.get("gradcheck_hidden", c.eval.gradcheck_hidden);
  e.get("gradcheck_K", c.eval.gradcheck_K);
  e.get("gradcheck_alpha", c.eval.gradcheck_alpha);
  e.get("gradcheck_steps", c.eval.gradcheck_steps);
  e.get("fd_step", c.eval.fd_step);
  e.get("fd_tolerance", c.eval.fd_tolerance);
  e.get("fd_floor", c.eval.fd_floor);
  e.get("gradcheck_kink_margin", c.eval.gradcheck_kink_margin);

  const Section r(j, "run", {"seed", "iterations", "checkpoint_every", "threads", "method", "methods", "seeds"});
  r.get("seed", c.run.seed);
  r.get("iterations", c.run.iterations);
  r.get("checkpoint_every", c.run.checkpoint_every);
  r.get("threads", c.run.threads);
  r.get("method", c.run.method);
  r.get("methods", c.run.methods);
  r.get("seeds", c.run.seeds);

  if (c.model.K < 1) throw ConfigError("model.K must be >= 1");
  if (c.dmil.core.inner_steps < 1 || c.dmil.test_inner_steps < 1) throw ConfigError("inner step counts must be >= 1");
  if (c.dmil.core.alpha < 0.0 || c.dmil.core.beta < 0.0) throw ConfigError("learning rates must be >= 0");
  if (c.data.n_support < 4) throw ConfigError("data.n_support must be >= 4");
  if (c.data.n_query < 1) throw ConfigError("data.n_query must be >= 1");
  if (c.data.horizon < 2) throw ConfigError("data.horizon must be >= 2");
  if (c.dmil.tasks_per_step < 1 || c.dmil.tasks_per_step > c.data.n_train_tasks)
    throw ConfigError("dmil.tasks_per_step must lie in [1, data.n_train_tasks]");
  for (auto s : c.eval.shots)
    if (s < 1 || s > c.data.n_support) throw ConfigError("eval.shots entries must lie in [1, data.n_support]");
  return c;
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace dmil
