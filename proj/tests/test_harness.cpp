#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "brainprog/harness.hpp"
#include "brainprog/image_io.hpp"
#include "test_util.hpp"

using namespace brainprog;
using namespace brainprog::harness;
using image::ImageGrid;
using image::RgbImage;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

void make_class_dir(const fs::path& dir, int count, double shade) {
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    const ImageGrid g(4, 4, shade);
    image::save_png(RgbImage(g, g, g), dir / ("img" + std::to_string(i) + ".png"));
  }
}

std::set<std::string> paths_of(const std::vector<ManifestEntry>& entries) {
  std::set<std::string> out;
  for (const auto& e : entries) out.insert(e.path);
  return out;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.output_dir = out;
  c.master_seed = 4;
  c.per_class = 20;
  c.epsilons = {4, 32};
  c.avc = {16, 16};
  c.evolution.population_size = 3;
  c.evolution.max_generations = 2;
  c.evolution.init_depth_cap = 3;
  c.architecture = {16, 2, 2, 4, 2};
  c.cnn.epochs = 2;
  c.cnn.batch_size = 8;
  c.derive_seeds();
  return c;
}

class QuietLog : public ::testing::Environment {
 public:
  void SetUp() override { set_log_stream(nullptr); }
};
const auto* const kQuiet = ::testing::AddGlobalTestEnvironment(new QuietLog);

}  // namespace

TEST(Ingest, StratifiedSixTwoTwo) {
  test::TempDir dir;
  make_class_dir(dir / "cats", 10, 0.2);
  make_class_dir(dir / "background", 10, 0.8);
  const DatasetManifest m = ingest_dataset(dir.path(), {0.6, 0.2, 0.2, "", ""}, 7);
  EXPECT_EQ(m.target_class, "cats");
  EXPECT_EQ(m.background_class, "background");
  for (const auto* split : {&m.train, &m.validation, &m.test}) {
    const auto pos = std::count_if(split->begin(), split->end(), [](const auto& e) { return e.label == kTargetLabel; });
    const auto neg = std::count_if(split->begin(), split->end(), [](const auto& e) { return e.label == kBackgroundLabel; });
    const long expected = split == &m.train ? 6 : 2;
    EXPECT_EQ(pos, expected);
    EXPECT_EQ(neg, expected);
  }
  const auto a = paths_of(m.train), b = paths_of(m.validation), c = paths_of(m.test);
  EXPECT_EQ(a.size() + b.size() + c.size(), 20u);
  std::set<std::string> all = a;
  all.insert(b.begin(), b.end());
  all.insert(c.begin(), c.end());
  EXPECT_EQ(all.size(), 20u);
  for (const auto& e : m.train) {
    EXPECT_EQ(e.path.rfind(e.label == kTargetLabel ? "cats/" : "background/", 0), 0u) << e.path;
  }
}

TEST(Ingest, DeterministicAndSeedSensitive) {
  test::TempDir dir;
  make_class_dir(dir / "a", 12, 0.2);
  make_class_dir(dir / "background", 12, 0.8);
  const SplitSpec spec{0.5, 0.25, 0.25, "", ""};
  EXPECT_EQ(ingest_dataset(dir.path(), spec, 1), ingest_dataset(dir.path(), spec, 1));
  EXPECT_NE(ingest_dataset(dir.path(), spec, 1).train, ingest_dataset(dir.path(), spec, 2).train);
}

TEST(Ingest, EmptyClassDirectoryIsNamed) {
  test::TempDir dir;
  make_class_dir(dir / "target", 4, 0.2);
  fs::create_directories(dir / "background");
  try {
    ingest_dataset(dir.path(), {}, 1);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("background"), std::string::npos);
  }
  try {
    ingest_dataset(dir.path(), {0.6, 0.2, 0.2, "target", "missing"}, 1);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos);
  }
}

TEST(Ingest, AmbiguousTargetRejected) {
  test::TempDir dir;
  make_class_dir(dir / "one", 3, 0.1);
  make_class_dir(dir / "two", 3, 0.2);
  make_class_dir(dir / "background", 3, 0.3);
  EXPECT_THROW(ingest_dataset(dir.path(), {}, 1), ConfigError);
  EXPECT_NO_THROW(ingest_dataset(dir.path(), {0.6, 0.2, 0.2, "two", ""}, 1));
}

TEST(Manifest, JsonRoundTrip) {
  test::TempDir dir;
  make_class_dir(dir / "t", 5, 0.2);
  make_class_dir(dir / "background", 5, 0.8);
  const DatasetManifest m = ingest_dataset(dir.path(), {0.6, 0.2, 0.2, "", ""}, 3);
  write_manifest(m, dir / "m.json");
  EXPECT_EQ(read_manifest(dir / "m.json"), m);
  const auto j = manifest_to_json(m);
  EXPECT_EQ(j.at("counts").at("train").get<int>(), 6);
  EXPECT_EQ(manifest_from_json(j), m);
  EXPECT_THROW(read_manifest(dir / "nope.json"), Error);
}

TEST(TextureDataset, CountsAndByteIdentity) {
  test::TempDir a, b;
  const DatasetManifest ma = make_texture_dataset(a.path(), 20, 11);
  const DatasetManifest mb = make_texture_dataset(b.path(), 20, 11);
  EXPECT_EQ(ma.class_files.at("stripes").size(), 20u);
  EXPECT_EQ(ma.class_files.at("background").size(), 20u);
  EXPECT_EQ(ma.train.size(), 30u);
  EXPECT_EQ(ma.validation.size(), 10u);
  std::size_t pngs = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (entry.path().extension() != ".png") continue;
    ++pngs;
    const fs::path rel = fs::relative(entry.path(), a.path());
    ASSERT_EQ(slurp(entry.path()), slurp(b.path() / rel)) << rel;
  }
  EXPECT_EQ(pngs, 40u);
  EXPECT_EQ(ma.train, mb.train);
  EXPECT_THROW(make_texture_dataset(a / "small", 19, 1), ConfigError);
  const RgbImage img = image::load_image(a.path() / ma.train.front().path);
  EXPECT_EQ(img.width(), 64);
}

TEST(TextureDataset, MeanColorBaselineIsWeak) {
  // Best single threshold on any per-image color statistic, fitted on train.
  test::TempDir dir;
  const DatasetManifest m = make_texture_dataset(dir.path(), 150, 3);
  auto features = [&](const std::vector<ManifestEntry>& split) {
    std::vector<std::vector<double>> out;
    for (const auto& e : split) {
      const RgbImage img = image::load_image(m.root / e.path);
      std::vector<double> f;
      double gray_sum = 0, gray_sq = 0;
      for (const auto* ch : {&img.r, &img.g, &img.b}) f.push_back(image::mean(*ch));
      for (std::size_t i = 0; i < img.r.size(); ++i) {
        const double g = (img.r[i] + img.g[i] + img.b[i]) / 3;
        gray_sum += g;
        gray_sq += g * g;
      }
      const double n = static_cast<double>(img.r.size());
      f.push_back(gray_sum / n);
      f.push_back(std::sqrt(std::max(0.0, gray_sq / n - (gray_sum / n) * (gray_sum / n))));
      out.push_back(f);
    }
    return out;
  };
  const auto train = features(m.train);
  const auto val = features(m.validation);
  auto accuracy_of = [](const std::vector<std::vector<double>>& x, const std::vector<ManifestEntry>& e, std::size_t k,
                        double t, int sign) {
    int ok = 0;
    for (std::size_t i = 0; i < x.size(); ++i) ok += ((x[i][k] > t ? 1 : -1) * sign) == e[i].label;
    return static_cast<double>(ok) / static_cast<double>(x.size());
  };
  double best = 0, best_val = 0;
  for (std::size_t k = 0; k < train[0].size(); ++k) {
    for (const auto& row : train) {
      for (int sign : {1, -1}) {
        const double acc = accuracy_of(train, m.train, k, row[k], sign);
        if (acc > best) {
          best = acc;
          best_val = accuracy_of(val, m.validation, k, row[k], sign);
        }
      }
    }
  }
  EXPECT_LT(best_val, 0.7);
  EXPECT_LT(best, 0.75);
}

TEST(Report, CsvSchemaAndFourDecimals) {
  test::TempDir dir;
  RunReport r;
  r.epsilons = {2, 4, 8, 16, 32};
  r.rows = {{"BP", 0.91234, 0.9, {0.9, 0.89995, 0.9, 0.88, 0.87}}, {"DiffModel", 1.0, 0.95, {0.9, 0.8, 0.7, 0.5, 0.123456}}};
  r.complete = true;
  emit_report(r, dir.path());
  const auto csv = read_csv(dir / "report.csv");
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], (std::vector<std::string>{"method", "train", "clean", "eps_2", "eps_4", "eps_8", "eps_16", "eps_32"}));
  for (std::size_t row = 1; row < 3; ++row) {
    ASSERT_EQ(csv[row].size(), 8u);
    EXPECT_EQ(csv[row][0], r.rows[row - 1].method);
    std::vector<double> expected{r.rows[row - 1].train, r.rows[row - 1].clean};
    expected.insert(expected.end(), r.rows[row - 1].adversarial.begin(), r.rows[row - 1].adversarial.end());
    for (std::size_t c = 1; c < 8; ++c) {
      const std::string& cell = csv[row][c];
      EXPECT_EQ(cell.size() - cell.find('.') - 1, 4u) << cell;
      EXPECT_NEAR(std::stod(cell), expected[c - 1], 5e-5);
    }
  }
  EXPECT_EQ(csv[2][7], "0.1235");
  const auto series = read_csv(dir / "accuracy_vs_epsilon.csv");
  ASSERT_EQ(series.size(), 1u + 2 * 6);
  EXPECT_EQ(series[1], (std::vector<std::string>{"BP", "0", "0.9000"}));
  RunReport bad = r;
  bad.rows[0].adversarial.pop_back();
  EXPECT_THROW(emit_report(bad, dir.path()), Error);
}

TEST(Report, JsonRoundTrip) {
  RunReport r;
  r.epsilons = {2, 32};
  r.rows = {{"BP", 0.1 + 0.2, 1.0 / 3, {0.5, 2.0 / 7}}};
  r.metadata["seed"] = 5;
  r.failed_stage = "attack";
  EXPECT_EQ(report_from_json(report_to_json(r)), r);
  test::TempDir dir;
  emit_report(r, dir.path());
  EXPECT_EQ(report_from_json(nlohmann::json::parse(slurp(dir / "report.json"))), r);
}

TEST(Config, DefaultsAndValidation) {
  const ExperimentConfig c = config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.epsilons, (std::vector<int>{2, 4, 8, 16, 32}));
  EXPECT_EQ(c.per_class, 400);
  EXPECT_EQ(c.evolution.population_size, 30);
  EXPECT_EQ(c.evolution.max_generations, 30);
  EXPECT_THROW(config_from_json(nlohmann::json{{"epsilons", {4, 2}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"epsilons", {0, 2}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"epsilons", {2, 256}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"dataset", {{"per_class", 5}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"dataset", {{"generate", false}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"svm_c", -1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"evolution", {{"population_size", 1}}}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"master_seed", "x"}}), ConfigError);
  const ExperimentConfig d = config_from_json(nlohmann::json{{"master_seed", 9}});
  EXPECT_NE(d.evolution.seed, c.evolution.seed);
  EXPECT_NE(d.cnn.seed, d.evolution.seed);
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(d))), config_to_json(d));
}

TEST(Sha256, KnownDigest) {
  test::TempDir dir;
  {
    std::ofstream out(dir / "abc.txt", std::ios::binary);
    out << "abc";
  }
  EXPECT_EQ(sha256_file(dir / "abc.txt"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Experiment, EndToEndWithCheckpoints) {
  test::TempDir dir;
  const ExperimentConfig c = tiny_config(dir / "run");
  const RunReport r = run_experiment(c);
  ASSERT_TRUE(r.complete);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].method, "BP");
  EXPECT_EQ(r.rows[1].method, "DiffModel");
  for (const auto& row : r.rows) {
    for (double v : {row.train, row.clean}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(row.adversarial.size(), 2u);
  }
  for (const char* f : {"report.csv", "report.json", "accuracy_vs_epsilon.csv"}) EXPECT_TRUE(fs::exists(c.output_dir / f));

  // clean accuracy recomputed from each persisted predictions file
  for (const auto& [file, row] : {std::pair{"predictions_bp.csv", 0}, std::pair{"predictions_diffmodel.csv", 1}}) {
    const auto csv = read_csv(c.output_dir / "04_evaluate" / file);
    ASSERT_EQ(csv[0], (std::vector<std::string>{"path", "label", "clean", "eps_4", "eps_32"}));
    ASSERT_EQ(csv.size(), 11u);  // 5 evaluation images per class
    for (std::size_t col = 2; col < 5; ++col) {
      int ok = 0;
      for (std::size_t i = 1; i < csv.size(); ++i) ok += csv[i][1] == csv[i][col];
      const double acc = ok / 10.0;
      EXPECT_EQ(acc, col == 2 ? r.rows[static_cast<std::size_t>(row)].clean
                              : r.rows[static_cast<std::size_t>(row)].adversarial[col - 3]);
    }
  }

  // adversarial images respect the budget against the prepared clean input
  const DatasetManifest m = read_manifest(c.output_dir / "00_data" / "manifest.json");
  const auto index = nlohmann::json::parse(slurp(c.output_dir / "03_attack" / "eps_32" / "index.json"));
  for (const auto& e : index.at("entries")) {
    const RgbImage clean = attack_input(image::load_image(m.root / e.at("source").get<std::string>()), 16);
    const RgbImage adv = image::load_image(c.output_dir / "03_attack" / "eps_32" / e.at("file").get<std::string>());
    for (std::size_t i = 0; i < clean.r.size(); ++i) ASSERT_LE(std::fabs(adv.g[i] - clean.g[i]), 32 / 255.0 + 1e-12);
  }

  // a rerun resumes every stage and reproduces the report
  const std::string csv_before = slurp(c.output_dir / "report.csv");
  const fs::file_time_type stamp = fs::last_write_time(c.output_dir / "01_evolve" / "best.ind");
  const RunReport again = run_experiment(c);
  EXPECT_EQ(fs::last_write_time(c.output_dir / "01_evolve" / "best.ind"), stamp);
  EXPECT_EQ(slurp(c.output_dir / "report.csv"), csv_before);
  EXPECT_EQ(again.rows, r.rows);
  for (const auto& [stage, t] : again.metadata.at("timings_seconds").items()) EXPECT_EQ(t.get<double>(), 0.0) << stage;

  // an independent run in a fresh directory is byte-identical
  ExperimentConfig other = c;
  other.output_dir = dir / "run2";
  run_experiment(other, true);
  EXPECT_EQ(slurp(other.output_dir / "report.csv"), csv_before);
}

TEST(Experiment, TamperedAdversarialSetIsRejected) {
  test::TempDir dir;
  ExperimentConfig c = tiny_config(dir / "run");
  run_experiment(c);
  // Replace one adversarial image with an unrelated one and rerun evaluation.
  const fs::path eps_dir = c.output_dir / "03_attack" / "eps_4";
  const auto index = nlohmann::json::parse(slurp(eps_dir / "index.json"));
  const fs::path victim = eps_dir / index.at("entries")[0].at("file").get<std::string>();
  const ImageGrid white(16, 16, 1.0), black(16, 16, 0.0);
  image::save_png(RgbImage(white, black, white), victim);
  fs::remove(c.output_dir / "04_evaluate" / "DONE");
  try {
    run_experiment(c);
    FAIL() << "expected the budget check to fail";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "evaluate");
    EXPECT_NE(std::string(e.what()).find("eps"), std::string::npos);
  }
  const RunReport partial = report_from_json(nlohmann::json::parse(slurp(c.output_dir / "report.json")));
  EXPECT_FALSE(partial.complete);
  EXPECT_EQ(partial.failed_stage, "evaluate");
}

TEST(Experiment, FailingStageIsNamed) {
  test::TempDir dir;
  ExperimentConfig c = tiny_config(dir / "run");
  c.generate_dataset = false;
  c.dataset_root = dir / "does-not-exist";
  try {
    run_experiment(c);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "data");
  }
}
