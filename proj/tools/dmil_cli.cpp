// Experiment runner: gen-data, train, eval, gradcheck, ablate.
//
// Every command writes the config it ran with (byte for byte) to
// <out>/config.json. Exit codes: 0 success, 1 usage or input error,
// 2 a numeric failure was flagged (divergent inner loop, failed gradient
// check), 3 a non-finite value aborted the run.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "dmil/experiment.hpp"

namespace fs = std::filesystem;
using namespace dmil;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string checkpoint;
};

struct Loaded {
  ExperimentConfig config;
  std::string text;
};

Loaded load(const Options& o) {
  Loaded l;
  if (o.config_path.empty()) {
    l.text = l.config.to_json().dump(2) + "\n";
  } else {
    l.text = read_text(o.config_path);
    l.config = ExperimentConfig::from_text(l.text);
  }
  if (o.seed) {
    l.config.run.seed = *o.seed;
    l.config.run.seeds = {*o.seed};
  }
  return l;
}

void prepare_out(const Options& o, const Loaded& l) {
  fs::create_directories(o.out);
  std::ofstream(fs::path(o.out) / "config.json", std::ios::binary) << l.text;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

std::string ckpt_name(std::size_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06zu.json", iteration);
  return buf;
}

/// Trains one method into `dir`: metrics.csv, timing.csv, checkpoints/.
TrainResult train_into(const fs::path& dir, const ExperimentConfig& config, Method method, std::uint64_t seed,
                       const Benchmark& benchmark) {
  fs::create_directories(dir / "checkpoints");
  auto metrics = open_out(dir / "metrics.csv");
  auto timing = open_out(dir / "timing.csv");
  metrics << metrics_header() << '\n' << std::flush;
  timing << "iteration,seconds\n";
  TrainSink sink;
  sink.on_row = [&](const MetricsRow& r) {
    metrics << metrics_line(r) << '\n' << std::flush;
    timing << r.iteration << ',' << r.seconds << '\n';
  };
  sink.on_checkpoint = [&](const Checkpoint& c) {
    save_checkpoint(dir / "checkpoints" / ckpt_name(c.iteration), c);
    save_checkpoint(dir / "final.json", c);
  };
  TrainResult result = train_method(config, method, seed, benchmark, sink);
  if (result.any_diverged) std::cerr << method_name(method) << " seed " << seed << ": divergent inner loop flagged\n";
  return result;
}

int cmd_gen_data(const Options& o) {
  const Loaded l = load(o);
  prepare_out(o, l);
  const Benchmark b = make_benchmark(l.config.data);
  save_datasets(fs::path(o.out) / "train.jsonl", b.train);
  save_datasets(fs::path(o.out) / "test.jsonl", b.test);
  std::cout << "wrote " << b.train.size() << " train and " << b.test.size() << " test tasks to " << o.out << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  const Loaded l = load(o);
  prepare_out(o, l);
  const Method method = parse_method(l.config.run.method);
  const TrainResult r = train_into(o.out, l.config, method, l.config.run.seed, make_benchmark(l.config.data));
  if (!r.rows.empty())
    std::cout << method_name(method) << ": loss " << r.rows.front().meta_train_loss << " -> "
              << r.rows.back().meta_train_loss << " after " << r.rows.size() << " iterations\n";
  return r.any_diverged ? 2 : 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const Loaded l = load(o);
  const Checkpoint c = load_checkpoint(o.checkpoint);
  prepare_out(o, l);
  const auto rows =
      evaluate_method(l.config, parse_method(c.method), c.params, make_benchmark(l.config.data), l.config.run.seed);
  auto csv = open_out(fs::path(o.out) / "report.csv");
  write_report_csv(csv, rows);
  open_out(fs::path(o.out) / "summary.json") << summarize(rows).dump(2) << '\n';
  for (const auto& r : rows)
    std::cout << "task " << r.task << " shots " << r.shots << ": mse " << r.pre_mse << " -> " << r.post_mse
              << ", skill_acc " << r.skill_acc << ", success " << r.success << '\n';
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const Loaded l = load(o);
  prepare_out(o, l);
  const GradcheckReport report = run_gradcheck(l.config, l.config.run.seed);
  auto csv = open_out(fs::path(o.out) / "gradcheck.csv");
  csv << "instance,candidate,steps,component,max_rel_error,worst_index,passed\n";
  for (const auto& r : report.rows) {
    char err[32];
    std::snprintf(err, sizeof err, "%.6e", r.max_rel_error);
    csv << r.instance << ',' << r.candidate << ',' << r.steps << ',' << r.component << ',' << err << ','
        << r.worst_index << ',' << (r.passed ? 1 : 0) << '\n';
  }
  const bool ok = report.passed();
  std::cout << (ok ? "PASS" : "FAIL") << ": " << report.rows.size() << " checks on "
            << l.config.eval.gradcheck_instances << " instances (" << report.redrawn
            << " redrawn near relu kinks), max relative error " << report.max_rel_error() << " (tolerance "
            << l.config.eval.fd_tolerance << ")\n";
  return ok ? 0 : 2;
}

int cmd_ablate(const Options& o) {
  const Loaded l = load(o);
  prepare_out(o, l);
  const Benchmark benchmark = make_benchmark(l.config.data);
  std::vector<Method> methods;
  for (const auto& name : l.config.run.methods) methods.push_back(parse_method(name));
  std::vector<EvalRow> all;
  bool diverged = false;
  for (std::uint64_t seed : l.config.run.seeds) {
    for (Method m : methods) {
      const fs::path dir = fs::path(o.out) / (method_name(m) + "_seed" + std::to_string(seed));
      const TrainResult r = train_into(dir, l.config, m, seed, benchmark);
      diverged = diverged || r.any_diverged;
      const auto rows = evaluate_method(l.config, m, r.final.params, benchmark, seed);
      all.insert(all.end(), rows.begin(), rows.end());
      std::cerr << method_name(m) << " seed " << seed << " done\n";
    }
  }
  auto csv = open_out(fs::path(o.out) / "report.csv");
  write_report_csv(csv, all);
  const auto summary = summarize(all);
  open_out(fs::path(o.out) / "summary.json") << summary.dump(2) << '\n';

  // Paired table: per seed and shot count, mean post-adaptation MSE of each method.
  auto paired = open_out(fs::path(o.out) / "paired.csv");
  paired << "seed,shots";
  for (Method m : methods) paired << ',' << method_name(m);
  paired << '\n';
  for (std::uint64_t seed : l.config.run.seeds) {
    for (std::size_t shots : l.config.eval.shots) {
      paired << seed << ',' << shots;
      for (Method m : methods) {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : all)
          if (r.seed == seed && r.shots == shots && r.method == method_name(m)) {
            sum += r.post_mse;
            ++n;
          }
        paired << ',' << (n ? sum / n : 0.0);
      }
      paired << '\n';
    }
  }
  std::cout << summary.dump(2) << '\n';
  return diverged ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual meta imitation learning experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Overrides run.seed (and run.seeds)");
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the train/test benchmark as JSON Lines");
  auto* train = app.add_subcommand("train", "Meta-train run.method, writing metrics and checkpoints");
  auto* eval = app.add_subcommand("eval", "Few-shot evaluation of a checkpoint on the test tasks");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the exact meta-gradients");
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate run.methods on run.seeds with shared batches");
  for (auto* sub : {gen, train, eval, grad, ablate}) add_common(sub);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->check(CLI::ExistingFile)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    if (grad->parsed()) return cmd_gradcheck(o);
    if (ablate->parsed()) return cmd_ablate(o);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
