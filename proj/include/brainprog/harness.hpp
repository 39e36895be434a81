#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "brainprog/avc.hpp"
#include "brainprog/diffmodel.hpp"
#include "brainprog/error.hpp"
#include "brainprog/gp.hpp"
#include "brainprog/image.hpp"
#include "brainprog/svm.hpp"

namespace brainprog::harness {

namespace fs = std::filesystem;

inline constexpr int kTargetLabel = 1;
inline constexpr int kBackgroundLabel = -1;

/// Split fractions per class; target/background name the class directories
/// (empty selects "background" for the background and the other directory as target).
struct SplitSpec {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
  std::string target;
  std::string background;
};

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  int label = 0;     // +1 target, -1 background

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  fs::path root;
  std::string target_class;
  std::string background_class;
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<std::string>> class_files;
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> validation;
  std::vector<ManifestEntry> test;

  const std::vector<ManifestEntry>& split(const std::string& name) const;
  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Deterministic stratified split of a class-per-directory image tree.
DatasetManifest ingest_dataset(const fs::path& root, const SplitSpec& spec, std::uint64_t seed);

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const DatasetManifest& m, const fs::path& path);
DatasetManifest read_manifest(const fs::path& path);

/// Procedural 64x64 two-class texture set: oriented stripe fields (target
/// class "stripes") against blob fields (class "background").
DatasetManifest make_texture_dataset(const fs::path& out_dir, int per_class, std::uint64_t seed,
                                     const SplitSpec& spec = {0.75, 0.25, 0.0, "stripes", "background"});
image::RgbImage render_stripes(Rng& rng, int size = 64);
image::RgbImage render_blobs(Rng& rng, int size = 64);

struct ExperimentConfig {
  fs::path output_dir = "run";
  std::uint64_t master_seed = 1;
  unsigned threads = 0;

  fs::path dataset_root;
  bool generate_dataset = true;
  int per_class = 400;
  SplitSpec split{0.75, 0.25, 0.0, "", ""};
  std::string eval_split = "validation";

  std::vector<int> epsilons{2, 4, 8, 16, 32};
  avc::AvcConfig avc{64, 128};
  double svm_c = 1.0;
  gp::EvolutionConfig evolution;
  attack::Architecture architecture;
  attack::TrainConfig cnn;

  /// Seeds for each stage derived from master_seed.
  void derive_seeds();
  void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const fs::path& path);

struct MethodRow {
  std::string method;
  double train = 0.0;
  double clean = 0.0;
  std::vector<double> adversarial;  // one per epsilon

  friend bool operator==(const MethodRow&, const MethodRow&) = default;
};

struct RunReport {
  std::vector<int> epsilons;
  std::vector<MethodRow> rows;
  bool complete = false;
  std::string failed_stage;
  nlohmann::json metadata = nlohmann::json::object();

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

nlohmann::json report_to_json(const RunReport& r);
RunReport report_from_json(const nlohmann::json& j);

/// report.json, report.csv (method x accuracy matrix, 4 decimals) and
/// accuracy_vs_epsilon.csv (epsilon 0 is the clean set).
void emit_report(const RunReport& report, const fs::path& dir);

/// Raised when a pipeline stage fails; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause)
      : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Stage building blocks shared by run_experiment and the command-line tool.

/// Uses DIR/manifest.json when present, otherwise ingests DIR with the config split.
DatasetManifest resolve_dataset(const fs::path& data_dir, const ExperimentConfig& config);

struct LoadedSplit {
  std::vector<image::RgbImage> images;
  std::vector<int> labels;
  std::vector<std::string> paths;
};
LoadedSplit load_split(const DatasetManifest& m, const std::string& split);

struct BpArtifacts {
  gp::Individual best;
  svm::LinearClassifier classifier;
  double train_accuracy = 0.0;
};

/// Evolves the BP individual on the train split and fits the final SVM.
/// Writes best.ind, svm.model, history.csv and per-generation files to out_dir.
BpArtifacts run_evolution_stage(const DatasetManifest& m, const ExperimentConfig& config, const fs::path& out_dir);

/// Trains the differentiable model; writes cnn.bin and metrics.json.
attack::TrainOutcome run_cnn_stage(const DatasetManifest& m, const ExperimentConfig& config, const fs::path& out_dir);

/// Crafts FGSM examples for the evaluation split at every epsilon.
/// Layout: out_dir/eps_<e>/<index>.png plus <index>.json sidecars and index.json.
void run_attack_stage(const attack::DiffModel& model, const DatasetManifest& m, const std::string& split,
                      const std::vector<int>& epsilons, const fs::path& out_dir);

/// Evaluates both classifiers on train, clean evaluation and adversarial sets;
/// writes per-method prediction files and returns the filled report.
RunReport run_evaluation_stage(const gp::Individual& bp, const svm::LinearClassifier& clf,
                               const attack::DiffModel& model, const DatasetManifest& m,
                               const ExperimentConfig& config, const fs::path& adv_dir, const fs::path& out_dir);

/// Full pipeline with per-stage checkpoints (a DONE marker per stage directory).
RunReport run_experiment(const ExperimentConfig& config, bool force = false);

/// Progress lines from the stages go here; nullptr silences them (default std::clog).
void set_log_stream(std::ostream* stream);

/// Lower-case hex SHA-256 of a file.
std::string sha256_file(const fs::path& path);

/// Image preparation shared by the attack and evaluation stages.
image::RgbImage attack_input(const image::RgbImage& img, int input_size);

}  // namespace brainprog::harness
