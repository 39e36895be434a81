// Command-line front end for the robustness experiment.
#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "brainprog/avc.hpp"
#include "brainprog/diffmodel.hpp"
#include "brainprog/gp.hpp"
#include "brainprog/harness.hpp"
#include "brainprog/image_io.hpp"
#include "brainprog/parallel.hpp"
#include "brainprog/svm.hpp"

namespace fs = std::filesystem;
using namespace brainprog;

namespace {

harness::ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    harness::ExperimentConfig c;
    c.derive_seeds();
    return c;
  }
  return harness::load_config(path);
}

std::vector<int> discover_epsilons(const fs::path& adv_dir) {
  std::vector<int> eps;
  for (const auto& entry : fs::directory_iterator(adv_dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && name.rfind("eps_", 0) == 0) eps.push_back(std::stoi(name.substr(4)));
  }
  std::sort(eps.begin(), eps.end());
  return eps;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolved visual-cortex classifiers versus a CNN under FGSM attack"};
  app.require_subcommand(1);
  unsigned threads = 0;
  bool quiet = false;
  app.add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");
  app.add_flag("--quiet", quiet, "Suppress progress output");

  std::string out, data, config_path, model_path, adv, bp_path, svm_path, split = "validation";
  int per_class = 300;
  std::uint64_t seed = 1;
  std::vector<int> eps;
  bool dump_maps = false;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the stripes/background texture dataset");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--per-class", per_class, "Images per class")->check(CLI::Range(20, 1000000));
  gen->add_option("--seed", seed, "Generator seed");

  auto* evolve = app.add_subcommand("evolve", "Evolve a BP individual and fit its SVM");
  evolve->add_option("--data", data, "Dataset directory")->required();
  evolve->add_option("--config", config_path, "Experiment config (JSON)");
  evolve->add_option("--out", out, "Output directory")->required();
  evolve->add_flag("--dump-maps", dump_maps, "Write the best individual's maps for the first training image");

  auto* train = app.add_subcommand("train-cnn", "Train the differentiable model");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--config", config_path, "Experiment config (JSON)");
  train->add_option("--out", out, "Output directory")->required();

  auto* attack_cmd = app.add_subcommand("attack", "Craft FGSM examples on the differentiable model");
  attack_cmd->add_option("--model", model_path, "Trained model file")->required();
  attack_cmd->add_option("--data", data, "Dataset directory")->required();
  attack_cmd->add_option("--eps", eps, "Epsilon list in 8-bit units")->delimiter(',')->default_str("2,4,8,16,32");
  attack_cmd->add_option("--split", split, "Split to attack")->check(CLI::IsMember({"validation", "test"}));
  attack_cmd->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Evaluate both classifiers on clean and adversarial sets");
  eval->add_option("--bp", bp_path, "BP individual file")->required();
  eval->add_option("--svm", svm_path, "SVM model file")->required();
  eval->add_option("--cnn", model_path, "Differentiable model file")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--adv", adv, "Adversarial directory (from attack)")->required();
  eval->add_option("--config", config_path, "Experiment config (JSON)");
  eval->add_option("--split", split, "Evaluation split")->check(CLI::IsMember({"validation", "test"}));
  eval->add_option("--out", out, "Output directory")->required();

  auto* run_all = app.add_subcommand("run-all", "Run every stage with checkpoints");
  run_all->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run_all->add_flag("--force", force, "Rerun stages that already completed");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) set_thread_count(threads);
  if (quiet) harness::set_log_stream(nullptr);

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      stage = "data";
      const auto m = harness::make_texture_dataset(out, per_class, seed);
      std::cout << "wrote " << m.train.size() + m.validation.size() + m.test.size() << " images to " << out << "\n";
    } else if (*evolve) {
      auto config = config_or_default(config_path);
      const auto m = harness::resolve_dataset(data, config);
      const auto bp = harness::run_evolution_stage(m, config, out);
      if (dump_maps) {
        const auto first = image::load_image(m.root / m.train.front().path);
        avc::dump_maps(bp.best, first, config.avc, fs::path(out) / "maps");
      }
      std::cout << "fitness " << bp.best.fitness.value_or(0.0) << " train accuracy " << bp.train_accuracy << "\n";
    } else if (*train) {
      auto config = config_or_default(config_path);
      const auto m = harness::resolve_dataset(data, config);
      const auto outcome = harness::run_cnn_stage(m, config, out);
      std::cout << "train accuracy " << outcome.train_accuracy << " " << config.eval_split << " accuracy "
                << outcome.validation_accuracy << "\n";
    } else if (*attack_cmd) {
      if (eps.empty()) eps = {2, 4, 8, 16, 32};
      harness::ExperimentConfig config;
      config.epsilons = eps;
      config.validate();
      const auto model = attack::load_model(model_path);
      const auto m = harness::resolve_dataset(data, config);
      harness::run_attack_stage(model, m, split, eps, out);
      std::cout << "adversarial sets written to " << out << "\n";
    } else if (*eval) {
      auto config = config_or_default(config_path);
      if (eval->count("--split")) config.eval_split = split;
      config.epsilons = discover_epsilons(adv);
      config.validate();
      const auto m = harness::resolve_dataset(data, config);
      const auto bp = gp::load_individual(bp_path);
      const auto clf = svm::load_classifier(svm_path);
      const auto model = attack::load_model(model_path);
      auto report = harness::run_evaluation_stage(bp, clf, model, m, config, adv, out);
      harness::emit_report(report, out);
      std::cout << "report written to " << out << "\n";
    } else if (*run_all) {
      stage = "config";
      const auto config = harness::load_config(config_path);
      const auto report = harness::run_experiment(config, force);
      std::cout << "report written to " << config.output_dir.string() << "\n";
      (void)report;
    }
  } catch (const harness::StageError& e) {
    std::cerr << "brainprog: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "brainprog: stage '" << stage << "' failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
