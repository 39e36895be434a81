#include "brainprog/gp.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>

#include "brainprog/error.hpp"

namespace brainprog::gp {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void reset_fitness(Offspring& o) {
  o.first.fitness.reset();
  o.second.fitness.reset();
}

}  // namespace

void EvolutionConfig::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0,1]");
  };
  prob(p_crossover, "p_crossover");
  prob(p_mutation, "p_mutation");
  prob(p_chromosome_level, "p_chromosome_level");
  prob(target_fitness, "target_fitness");
  if (population_size < 2) throw ConfigError("population_size must be >= 2");
  if (max_generations < 1) throw ConfigError("max_generations must be >= 1");
  if (elitism_count < 0 || elitism_count >= population_size) {
    throw ConfigError("elitism_count must be in [0, population_size)");
  }
  if (descriptor_n < 1) throw ConfigError("descriptor_n must be >= 1");
  if (max_depth < 2 || max_depth > dsl::kMaxDepth) throw ConfigError("max_depth must be in [2, 8]");
  if (init_depth_cap < 2 || init_depth_cap > max_depth) throw ConfigError("init_depth_cap must be in [2, max_depth]");
}

std::vector<std::string> check_individual(const Individual& ind, int max_depth) {
  std::vector<std::string> problems;
  if (ind.mm.size() < kMinMergeTrees || ind.mm.size() > kMaxMergeTrees) {
    problems.push_back("merge tree count " + std::to_string(ind.mm.size()) + " outside [1,8]");
  }
  for (std::size_t i = 0; i < ind.tree_count(); ++i) {
    const ExprTree& t = ind.slot(i);
    if (t.dimension() != Individual::slot_dimension(i)) {
      problems.push_back("slot " + std::to_string(i) + " holds a " + dsl::dimension_name(t.dimension()) + " tree");
    }
    if (auto err = dsl::check_tree(t, max_depth)) problems.push_back("slot " + std::to_string(i) + ": " + *err);
  }
  if (ind.fitness && !(*ind.fitness >= 0.0 && *ind.fitness <= 1.0)) problems.push_back("fitness outside [0,1]");
  return problems;
}

Individual random_individual(const EvolutionConfig& config, Rng& rng) {
  auto tree = [&](Dimension d) { return dsl::random_tree(d, config.init_depth_cap, rng); };
  ExprTree o = tree(Dimension::Orientation);
  ExprTree c = tree(Dimension::Color);
  ExprTree s = tree(Dimension::Shape);
  ExprTree i = tree(Dimension::Intensity);
  Individual ind{{std::move(o), std::move(c), std::move(s), std::move(i)}, {}, std::nullopt};
  const auto k = static_cast<std::size_t>(rng.uniform_int(kMinMergeTrees, kMaxMergeTrees));
  for (std::size_t j = 0; j < k; ++j) ind.mm.push_back(tree(Dimension::Merge));
  return ind;
}

std::vector<Individual> init_population(const EvolutionConfig& config, Rng& rng) {
  config.validate();
  std::vector<Individual> pop;
  pop.reserve(static_cast<std::size_t>(config.population_size));
  for (int i = 0; i < config.population_size; ++i) pop.push_back(random_individual(config, rng));
  return pop;
}

std::size_t select_parent_index(std::span<const Individual> population, Rng& rng) {
  if (population.empty()) throw Error("select_parent: empty population");
  double total = 0.0;
  for (const auto& ind : population) {
    if (!ind.fitness) throw Error("select_parent: individual without fitness");
    total += *ind.fitness;
  }
  if (!(total > 0.0)) return rng.index(population.size());
  const double spin = rng.uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < population.size(); ++i) {
    const double f = *population[i].fitness;
    if (f <= 0.0) continue;
    acc += f;
    last_positive = i;
    if (spin < acc) return i;
  }
  return last_positive;
}

const Individual& select_parent(std::span<const Individual> population, Rng& rng) {
  return population[select_parent_index(population, rng)];
}

namespace {

void clamp_merge_count(Individual& ind, const EvolutionConfig& config, Rng& rng) {
  if (ind.mm.size() > kMaxMergeTrees) ind.mm.resize(kMaxMergeTrees, ind.mm.front());
  while (ind.mm.size() < kMinMergeTrees) ind.mm.push_back(dsl::random_tree(Dimension::Merge, config.init_depth_cap, rng));
}

}  // namespace

Offspring crossover_chromosome_at(const Individual& a, const Individual& b, std::size_t cut_a, std::size_t cut_b,
                                  const EvolutionConfig& config, Rng& rng) {
  if (cut_a > a.mm.size() || cut_b > b.mm.size()) throw Error("crossover_chromosome: cut point out of range");
  Individual x{a.vo, {}, std::nullopt};
  Individual y{b.vo, {}, std::nullopt};
  x.mm.assign(a.mm.begin(), a.mm.begin() + static_cast<long>(cut_a));
  x.mm.insert(x.mm.end(), b.mm.begin() + static_cast<long>(cut_b), b.mm.end());
  y.mm.assign(b.mm.begin(), b.mm.begin() + static_cast<long>(cut_b));
  y.mm.insert(y.mm.end(), a.mm.begin() + static_cast<long>(cut_a), a.mm.end());
  clamp_merge_count(x, config, rng);
  clamp_merge_count(y, config, rng);
  return {std::move(x), std::move(y)};
}

Offspring crossover_chromosome(const Individual& a, const Individual& b, const EvolutionConfig& config, Rng& rng) {
  const std::size_t cut_a = rng.index(a.mm.size() + 1);
  const std::size_t cut_b = rng.index(b.mm.size() + 1);
  return crossover_chromosome_at(a, b, cut_a, cut_b, config, rng);
}

std::optional<Offspring> crossover_gene_at(const Individual& a, const Individual& b, std::size_t slot_a,
                                           std::size_t slot_b, std::size_t node_a, std::size_t node_b,
                                           int max_depth) {
  if (slot_a < kVisualSlots && slot_b != slot_a) throw Error("crossover_gene: visual slots must match");
  if (slot_a >= kVisualSlots && slot_b < kVisualSlots) throw Error("crossover_gene: merge slot paired with visual slot");
  const ExprTree& ta = a.slot(slot_a);
  const ExprTree& tb = b.slot(slot_b);
  const ExprTree sub_a = ta.subtree(node_a);
  const ExprTree sub_b = tb.subtree(node_b);
  ExprTree new_a = ta.replace_subtree(node_a, sub_b.nodes());
  ExprTree new_b = tb.replace_subtree(node_b, sub_a.nodes());
  if (new_a.depth() > max_depth || new_b.depth() > max_depth) return std::nullopt;
  Offspring out{a, b};
  out.first.slot(slot_a) = std::move(new_a);
  out.second.slot(slot_b) = std::move(new_b);
  reset_fitness(out);
  return out;
}

Offspring crossover_gene(const Individual& a, const Individual& b, const EvolutionConfig& config, Rng& rng) {
  const std::size_t slot_a = rng.index(a.tree_count());
  const std::size_t slot_b = slot_a < kVisualSlots ? slot_a : kVisualSlots + rng.index(b.mm.size());
  const ExprTree& ta = a.slot(slot_a);
  const ExprTree& tb = b.slot(slot_b);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const std::size_t na = rng.index(ta.size());
    const std::size_t nb = rng.index(tb.size());
    if (auto out = crossover_gene_at(a, b, slot_a, slot_b, na, nb, config.max_depth)) return std::move(*out);
  }
  return {a, b};
}

Individual mutate_chromosome(const Individual& ind, const EvolutionConfig& config, Rng& rng) {
  const std::size_t slot = rng.index(ind.tree_count());
  Individual out = ind;
  out.slot(slot) = dsl::random_tree(Individual::slot_dimension(slot), config.init_depth_cap, rng);
  out.fitness.reset();
  return out;
}

Individual mutate_gene_at(const Individual& ind, std::size_t slot, std::size_t node, const EvolutionConfig& config,
                          Rng& rng) {
  const ExprTree& tree = ind.slot(slot);
  const int allowance = config.max_depth - tree.node_depth(node);
  const ExprTree sub = dsl::random_subtree(tree.dimension(), allowance + 1, rng);
  Individual out = ind;
  out.slot(slot) = tree.replace_subtree(node, sub.nodes());
  out.fitness.reset();
  return out;
}

Individual mutate_gene(const Individual& ind, const EvolutionConfig& config, Rng& rng) {
  const std::size_t slot = rng.index(ind.tree_count());
  const std::size_t node = rng.index(ind.slot(slot).size());
  return mutate_gene_at(ind, slot, node, config, rng);
}

EvolutionResult evolve(const EvolutionConfig& config, const FitnessFunction& fitness,
                       const GenerationObserver& observer) {
  config.validate();
  Rng rng(config.seed);
  std::vector<Individual> pop = init_population(config, rng);
  EvolutionHistory history;

  for (int generation = 1;; ++generation) {
    for (auto& ind : pop) {
      if (ind.fitness) continue;
      double f;
      try {
        f = fitness(ind);
      } catch (const std::exception& e) {
        throw FitnessError(e.what(), serialize_individual(ind));
      }
      ind.fitness = std::clamp(f, 0.0, 1.0);
    }

    std::vector<std::size_t> order(pop.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return *pop[x].fitness > *pop[y].fitness; });
    double sum = 0.0;
    for (const auto& ind : pop) sum += *ind.fitness;
    const Individual& best = pop[order.front()];
    history.records.push_back({generation, *best.fitness, sum / static_cast<double>(pop.size()),
                               serialize_individual(best)});
    if (observer) observer(generation, pop);

    if (*best.fitness >= config.target_fitness || generation >= config.max_generations) {
      return {best, std::move(history)};
    }

    std::vector<Individual> next;
    next.reserve(pop.size());
    for (int e = 0; e < config.elitism_count; ++e) next.push_back(pop[order[static_cast<std::size_t>(e)]]);

    while (next.size() < pop.size()) {
      const Individual& a = select_parent(pop, rng);
      std::vector<Individual> children;
      if (rng.bernoulli(config.p_crossover)) {
        const Individual& b = select_parent(pop, rng);
        Offspring o = rng.bernoulli(config.p_chromosome_level) ? crossover_chromosome(a, b, config, rng)
                                                               : crossover_gene(a, b, config, rng);
        children.push_back(std::move(o.first));
        children.push_back(std::move(o.second));
      } else {
        children.push_back(a);
      }
      for (auto& child : children) {
        if (rng.bernoulli(config.p_mutation)) {
          child = rng.bernoulli(config.p_chromosome_level) ? mutate_chromosome(child, config, rng)
                                                           : mutate_gene(child, config, rng);
        }
        // Programs identical to a parent reuse its cached fitness.
        if (!child.fitness) {
          for (const auto& p : pop) {
            if (p.same_program(child)) {
              child.fitness = p.fitness;
              break;
            }
          }
        }
        if (next.size() < pop.size()) next.push_back(std::move(child));
      }
    }
    pop = std::move(next);
  }
}

// ---------------------------------------------------------------------------
// Persistence

std::string serialize_individual(const Individual& ind) {
  std::string out = "individual roles=O,C,S,I mm=" + std::to_string(ind.mm.size()) +
                    " fitness=" + (ind.fitness ? format_double(*ind.fitness) : std::string("unset")) + "\n";
  for (std::size_t i = 0; i < ind.tree_count(); ++i) {
    out += dsl::serialize(ind.slot(i));
    out += '\n';
  }
  return out;
}

Individual parse_individual(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string header;
  if (!std::getline(in, header)) throw ParseError("individual: missing header", 0);
  std::istringstream hs(header);
  std::string word;
  hs >> word;
  if (word != "individual") throw ParseError("individual: header must start with 'individual'", 0);
  std::optional<std::size_t> mm_count;
  std::optional<double> fitness;
  while (hs >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw ParseError("individual: malformed header field '" + word + "'", 0);
    const std::string key = word.substr(0, eq);
    const std::string value = word.substr(eq + 1);
    if (key == "roles") {
      if (value != "O,C,S,I") throw ParseError("individual: unsupported roles '" + value + "'", 0);
    } else if (key == "mm") {
      mm_count = std::stoul(value);
    } else if (key == "fitness") {
      if (value != "unset") {
        double f = 0.0;
        auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), f);
        if (ec != std::errc()) throw ParseError("individual: bad fitness '" + value + "'", 0);
        fitness = f;
      }
    }
  }
  if (!mm_count) throw ParseError("individual: header lacks mm count", 0);

  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  if (lines.size() != kVisualSlots + *mm_count) {
    throw ParseError("individual: expected " + std::to_string(kVisualSlots + *mm_count) + " trees, found " +
                         std::to_string(lines.size()),
                     0);
  }
  std::vector<ExprTree> mm;
  for (std::size_t i = kVisualSlots; i < lines.size(); ++i) mm.push_back(dsl::parse(lines[i], Dimension::Merge));
  Individual ind{{dsl::parse(lines[0], Dimension::Orientation), dsl::parse(lines[1], Dimension::Color),
                  dsl::parse(lines[2], Dimension::Shape), dsl::parse(lines[3], Dimension::Intensity)},
                 std::move(mm),
                 fitness};
  if (auto problems = check_individual(ind); !problems.empty()) {
    throw ParseError("individual: " + problems.front(), 0);
  }
  return ind;
}

void save_individual(const Individual& ind, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << serialize_individual(ind);
}

Individual load_individual(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_individual(ss.str());
}

void save_history(const EvolutionHistory& history, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "history.csv");
  if (!csv) throw Error("cannot write '" + (dir / "history.csv").string() + "'");
  csv << "generation,best_fitness,mean_fitness,best_file\n";
  for (const auto& r : history.records) {
    char name[32];
    std::snprintf(name, sizeof name, "gen_%03d_best.ind", r.generation);
    std::ofstream(dir / name) << r.best_program;
    csv << r.generation << ',' << format_double(r.best_fitness) << ',' << format_double(r.mean_fitness) << ','
        << name << '\n';
  }
}

}  // namespace brainprog::gp
