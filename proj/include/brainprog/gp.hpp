#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "brainprog/dsl.hpp"
#include "brainprog/error.hpp"
#include "brainprog/rng.hpp"

namespace brainprog::gp {

using dsl::Dimension;
using dsl::ExprTree;

inline constexpr std::size_t kVisualSlots = 4;
inline constexpr std::size_t kMinMergeTrees = 1;
inline constexpr std::size_t kMaxMergeTrees = 8;

/// A multi-tree program: four visual operators (orientation, color, shape,
/// intensity, in that order) followed by 1..8 merge trees.
struct Individual {
  std::array<ExprTree, kVisualSlots> vo;
  std::vector<ExprTree> mm;
  std::optional<double> fitness;

  std::size_t tree_count() const noexcept { return kVisualSlots + mm.size(); }
  /// Slot i over the concatenation vo ++ mm.
  const ExprTree& slot(std::size_t i) const { return i < kVisualSlots ? vo[i] : mm.at(i - kVisualSlots); }
  ExprTree& slot(std::size_t i) { return i < kVisualSlots ? vo[i] : mm.at(i - kVisualSlots); }
  static Dimension slot_dimension(std::size_t i) noexcept {
    return i < kVisualSlots ? dsl::kVisualDimensions[i] : Dimension::Merge;
  }

  /// Structural equality, ignoring fitness.
  bool same_program(const Individual& other) const { return vo == other.vo && mm == other.mm; }
};

struct EvolutionConfig {
  int population_size = 30;
  int max_generations = 30;
  double target_fitness = 1.0;
  double p_crossover = 0.8;
  double p_mutation = 0.2;
  double p_chromosome_level = 0.5;
  int elitism_count = 1;
  std::uint64_t seed = 1;
  int descriptor_n = 128;
  /// Depth cap for freshly generated trees (initialization, chromosome mutation).
  int init_depth_cap = 5;
  int max_depth = dsl::kMaxDepth;

  /// Throws ConfigError on invalid settings.
  void validate() const;
};

struct GenerationRecord {
  int generation = 0;
  double best_fitness = 0.0;
  double mean_fitness = 0.0;
  std::string best_program;
};

struct EvolutionHistory {
  std::vector<GenerationRecord> records;
};

/// All invariant violations of an individual (empty when valid).
std::vector<std::string> check_individual(const Individual& ind, int max_depth = dsl::kMaxDepth);

Individual random_individual(const EvolutionConfig& config, Rng& rng);
std::vector<Individual> init_population(const EvolutionConfig& config, Rng& rng);

/// Roulette wheel over fitness; uniform when every fitness is zero.
std::size_t select_parent_index(std::span<const Individual> population, Rng& rng);
const Individual& select_parent(std::span<const Individual> population, Rng& rng);

using Offspring = std::pair<Individual, Individual>;

/// Cut-and-splice over the merge-tree lists: cut_a trees are kept from the
/// head of a and cut_b from the head of b, then the tails are exchanged.
Offspring crossover_chromosome_at(const Individual& a, const Individual& b, std::size_t cut_a, std::size_t cut_b,
                                  const EvolutionConfig& config, Rng& rng);
Offspring crossover_chromosome(const Individual& a, const Individual& b, const EvolutionConfig& config, Rng& rng);

/// Swaps the subtree at node_a of a's slot with the subtree at node_b of the
/// chosen tree of b. For visual slots b uses the same slot; for merge slots
/// b_slot names b's merge tree. Empty when an offspring would exceed max_depth.
std::optional<Offspring> crossover_gene_at(const Individual& a, const Individual& b, std::size_t slot_a,
                                           std::size_t slot_b, std::size_t node_a, std::size_t node_b,
                                           int max_depth);
Offspring crossover_gene(const Individual& a, const Individual& b, const EvolutionConfig& config, Rng& rng);

Individual mutate_chromosome(const Individual& ind, const EvolutionConfig& config, Rng& rng);
Individual mutate_gene_at(const Individual& ind, std::size_t slot, std::size_t node, const EvolutionConfig& config,
                          Rng& rng);
Individual mutate_gene(const Individual& ind, const EvolutionConfig& config, Rng& rng);

using FitnessFunction = std::function<double(const Individual&)>;
using GenerationObserver = std::function<void(int generation, std::span<const Individual> population)>;

struct EvolutionResult {
  Individual best;
  EvolutionHistory history;
};

/// Generational loop with elitism; stops at target_fitness or max_generations.
EvolutionResult evolve(const EvolutionConfig& config, const FitnessFunction& fitness,
                       const GenerationObserver& observer = {});

/// Thrown when fitness evaluation fails; carries the individual's text form.
class FitnessError : public Error {
 public:
  FitnessError(const std::string& cause, std::string program)
      : Error("fitness evaluation failed: " + cause + "\n" + program), program_(std::move(program)) {}
  const std::string& program() const noexcept { return program_; }

 private:
  std::string program_;
};

std::string serialize_individual(const Individual& ind);
Individual parse_individual(std::string_view text);
void save_individual(const Individual& ind, const std::filesystem::path& path);
Individual load_individual(const std::filesystem::path& path);

/// Writes history.csv (generation, best_fitness, mean_fitness, best_file) and
/// one best-individual file per generation into dir.
void save_history(const EvolutionHistory& history, const std::filesystem::path& dir);

}  // namespace brainprog::gp
