#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "nmt/checkpoint.hpp"
#include "nmt/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace nmt;

namespace {

std::vector<PairRecord> training_pairs(const TrainConfig& c) {
  if (!c.train_data.empty()) return read_pairs(c.train_data);
  return generate_pairs(c.data, c.train_pairs, c.seed);
}

std::vector<PairRecord> validation_pairs(const TrainConfig& c) {
  if (!c.val_data.empty()) return read_pairs(c.val_data);
  return generate_pairs(c.data, c.val_pairs_per_class * c.data.num_classes, c.seed + 0x5EED0000ull);
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir) {
  const TrainConfig config = TrainConfig::from_file(config_path);
  fs::create_directories(out_dir);
  const auto train = training_pairs(config);
  const auto val = validation_pairs(config);
  std::cerr << "train pairs " << train.size() << ", validation pairs " << val.size() << '\n';

  MatchingModel model(config, config.seed);
  std::cerr << "parameters " << model.params().scalar_count() << '\n';
  const EvalReport before = evaluate(model, val, config.threads);
  std::cerr << "untrained accuracy " << before.mean_accuracy << '\n';

  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::trunc);
  std::ofstream plot(out_dir / "plot.tsv", std::ios::trunc);
  plot << "epoch\tlr\ttrain_loss\tval_accuracy\n";
  const fs::path ckpt = out_dir / "checkpoint.nmtc";

  Trainer trainer(model, config);
  auto start = std::chrono::steady_clock::now();
  try {
    trainer.run(train, val, [&](const EpochMetrics& m, const Trainer& t) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      nlohmann::json j{{"epoch", m.epoch},
                       {"lr", m.lr},
                       {"train_loss", m.train_loss},
                       {"val_accuracy", m.val_accuracy},
                       {"seconds", secs}};
      metrics << j.dump() << '\n' << std::flush;
      plot << m.epoch << '\t' << m.lr << '\t' << m.train_loss << '\t' << m.val_accuracy << '\n'
           << std::flush;
      std::cerr << "epoch " << m.epoch << " lr " << m.lr << " loss " << m.train_loss
                << " val " << m.val_accuracy << " (" << secs << " s)\n";
      save_checkpoint(ckpt, t.model(), &t.optimizer(), m.epoch, t.history());
    });
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "; last good checkpoint kept at " << ckpt
              << '\n';
    return 3;
  }
  const EvalReport after = evaluate(model, val, config.threads);
  std::cout << after.to_text();
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& pairs_path, bool json,
             std::size_t threads) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const auto pairs = read_pairs(pairs_path);
  const EvalReport r = evaluate(*ck.model, pairs, threads);
  std::cout << (json ? r.to_json() + "\n" : r.to_text());
  return 0;
}

int cmd_match(const fs::path& checkpoint, const fs::path& pair_path, std::size_t index) {
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const auto pairs = read_pairs(pair_path);
  if (index >= pairs.size()) {
    throw ConfigError(pair_path.string() + " has " + std::to_string(pairs.size()) +
                      " records; index " + std::to_string(index) + " out of range");
  }
  const PairRecord& pair = pairs[index];
  const Prediction p = ck.model->predict(pair);
  std::cout << "assignment:";
  for (std::size_t j : p.matching.assignment) std::cout << ' ' << j;
  std::cout << "\ninjective: " << (p.matching.injective ? "yes" : "no") << '\n';
  std::cout << "sinkhorn iterations: " << p.plan.iterations_used << '\n';
  std::cout << "max marginal error: " << std::scientific << std::setprecision(3)
            << p.plan.max_marginal_error << '\n';
  std::cout << std::fixed << std::setprecision(4) << "scores:";
  for (double s : p.match_scores) std::cout << ' ' << s;
  std::cout << "\nplan:\n";
  for (std::size_t i = 0; i < p.plan.values.rows(); ++i) {
    for (std::size_t j = 0; j < p.plan.values.cols(); ++j) {
      std::cout << (j ? " " : "  ") << p.plan.values(i, j);
    }
    std::cout << '\n';
  }
  if (!pair.truth.empty()) {
    std::cout << "accuracy vs truth: " << accuracy(p.matching.assignment, pair.truth) << '\n';
  }
  return 0;
}

int cmd_gradcheck(const std::string& module, std::size_t instances, std::uint64_t seed) {
  std::vector<std::string> modules;
  if (module == "all") modules = gradcheck_modules();
  else modules = {module};
  bool ok = true;
  for (const auto& name : modules) {
    const auto results = run_gradcheck(name, instances, seed);
    double worst = 0.0;
    bool module_ok = true;
    for (const auto& r : results) {
      worst = std::max(worst, r.report.worst());
      if (!r.report.passed()) {
        module_ok = false;
        for (const auto& p : r.report.params) {
          if (!p.passed) {
            std::cout << "  instance " << r.instance << " " << p.name << " rel err "
                      << p.max_rel_error << (p.failure.empty() ? "" : " (" + p.failure + ")")
                      << '\n';
          }
        }
      }
    }
    std::cout << (module_ok ? "PASS " : "FAIL ") << name << " instances=" << results.size()
              << " worst_rel_err=" << std::scientific << std::setprecision(2) << worst << '\n';
    ok = ok && module_ok;
  }
  return ok ? 0 : 1;
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out, std::uint64_t seed) {
  std::size_t count = 0;
  const SyntheticPairSpec spec = spec_from_entries(read_key_value_file(spec_path), &count);
  const auto pairs = generate_pairs(spec, count, seed);
  write_pairs(out, pairs);
  std::cerr << "wrote " << pairs.size() << " pairs to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalized matching transformer: keypoint matching toolkit"};
  app.require_subcommand(1);

  fs::path config_path, out_dir;
  auto* train = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  train->add_option("--config", config_path, "key = value config file")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  fs::path checkpoint, pairs_path;
  bool json = false;
  std::size_t threads = 0;
  auto* eval = app.add_subcommand("eval", "per-class accuracy of a checkpoint on a pair file");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--pairs", pairs_path)->required();
  eval->add_flag("--json", json, "machine-readable output");
  eval->add_option("--threads", threads, "worker threads (0: all cores)");

  std::size_t index = 0;
  auto* match = app.add_subcommand("match", "match one pair and dump the transport plan");
  match->add_option("--checkpoint", checkpoint)->required();
  match->add_option("--pair", pairs_path)->required();
  match->add_option("--index", index, "record index within the pair file");

  std::string module = "all";
  std::size_t instances = 10;
  std::uint64_t seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--module", module, "spline-gnn|norm-transformer|losses|feature-extraction|model|all");
  gradcheck->add_option("--instances", instances);
  gradcheck->add_option("--seed", seed);

  fs::path spec_path;
  auto* gen = app.add_subcommand("gen-data", "generate synthetic pairs");
  gen->add_option("--spec", spec_path, "key = value spec file (pair spec keys + count)")->required();
  gen->add_option("--out", out_dir, "output pair file")->required();
  gen->add_option("--seed", seed)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config_path, out_dir);
    if (*eval) return cmd_eval(checkpoint, pairs_path, json, threads);
    if (*match) return cmd_match(checkpoint, pairs_path, index);
    if (*gradcheck) return cmd_gradcheck(module, instances, seed);
    if (*gen) return cmd_gen_data(spec_path, out_dir, seed);
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
