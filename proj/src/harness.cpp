#include "brainprog/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>

#include <openssl/evp.h>

#include "brainprog/fgsm.hpp"
#include "brainprog/image_io.hpp"
#include "brainprog/parallel.hpp"
#include "brainprog/rng.hpp"

namespace brainprog::harness {

using image::ImageGrid;
using nlohmann::json;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kDoneMarker = "DONE";

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<std::string> list_images(const fs::path& root, const std::string& cls) {
  const fs::path dir = root / cls;
  if (!fs::is_directory(dir)) throw LoadError("class directory missing: " + dir.string());
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) {
      files.push_back((fs::path(cls) / entry.path().filename()).generic_string());
    }
  }
  if (files.empty()) throw LoadError("class directory has no images: " + dir.string());
  std::sort(files.begin(), files.end());
  return files;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int label_to_class(int label) { return label == kTargetLabel ? 1 : 0; }
int class_to_label(int cls) { return cls == 1 ? kTargetLabel : kBackgroundLabel; }

std::string eps_dir_name(int e) { return "eps_" + std::to_string(e); }

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

ImageGrid blend_plane(const ImageGrid& field, double lo, double hi, double noise_sigma, Rng& rng) {
  ImageGrid out(field.width(), field.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(lo + (hi - lo) * field[i] + noise_sigma * rng.normal(), 0.0, 1.0);
  }
  return out;
}

image::RgbImage colorize(const ImageGrid& field, Rng& rng) {
  double a[3];
  double b[3];
  for (int c = 0; c < 3; ++c) a[c] = rng.uniform();
  for (int c = 0; c < 3; ++c) b[c] = rng.uniform();
  const double sigma = rng.uniform(0.02, 0.08);
  image::RgbImage img;
  img.r = blend_plane(field, a[0], b[0], sigma, rng);
  img.g = blend_plane(field, a[1], b[1], sigma, rng);
  img.b = blend_plane(field, a[2], b[2], sigma, rng);
  return img;
}

}  // namespace

const std::vector<ManifestEntry>& DatasetManifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "validation") return validation;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

DatasetManifest ingest_dataset(const fs::path& root, const SplitSpec& spec, std::uint64_t seed) {
  for (double f : {spec.train, spec.validation, spec.test}) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
  }
  if (spec.train + spec.validation + spec.test > 1.0 + 1e-9) throw ConfigError("split fractions sum above 1");
  if (!fs::is_directory(root)) throw LoadError("dataset root missing: " + root.string());

  DatasetManifest m;
  m.root = fs::absolute(root).lexically_normal();
  m.seed = seed;
  m.background_class = spec.background.empty() ? "background" : spec.background;
  m.target_class = spec.target;
  if (m.target_class.empty()) {
    std::vector<std::string> others;
    for (const auto& entry : fs::directory_iterator(root)) {
      const std::string name = entry.path().filename().string();
      if (entry.is_directory() && name != m.background_class) others.push_back(name);
    }
    if (others.size() != 1) {
      throw ConfigError("cannot infer target class under " + root.string() + ": expected exactly one directory besides '" +
                        m.background_class + "', found " + std::to_string(others.size()));
    }
    m.target_class = others.front();
  }
  if (m.target_class == m.background_class) throw ConfigError("target and background class are the same directory");

  const std::array<std::pair<std::string, int>, 2> classes{{{m.target_class, kTargetLabel},
                                                            {m.background_class, kBackgroundLabel}}};
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    const auto& [cls, label] = classes[ci];
    std::vector<std::string> files = list_images(root, cls);
    m.class_files[cls] = files;
    Rng rng(derive_seed(seed, 0x5b117, ci));
    rng.shuffle(files.begin(), files.end());
    const double n = static_cast<double>(files.size());
    const auto c1 = static_cast<std::size_t>(std::llround(n * spec.train));
    const auto c2 = std::min(files.size(), static_cast<std::size_t>(std::llround(n * (spec.train + spec.validation))));
    const auto c3 = std::min(files.size(),
                             static_cast<std::size_t>(std::llround(n * (spec.train + spec.validation + spec.test))));
    if (c1 == 0) throw ConfigError("class '" + cls + "' gets no training images");
    for (std::size_t i = 0; i < c3; ++i) {
      auto& dst = i < c1 ? m.train : (i < c2 ? m.validation : m.test);
      dst.push_back({files[i], label});
    }
  }
  return m;
}

json manifest_to_json(const DatasetManifest& m) {
  auto entries = [](const std::vector<ManifestEntry>& v) {
    json arr = json::array();
    for (const auto& e : v) arr.push_back({{"path", e.path}, {"label", e.label}});
    return arr;
  };
  json files = json::object();
  for (const auto& [cls, list] : m.class_files) files[cls] = list;
  return {{"root", m.root.generic_string()},
          {"target_class", m.target_class},
          {"background_class", m.background_class},
          {"seed", m.seed},
          {"class_files", files},
          {"counts",
           {{"train", m.train.size()}, {"validation", m.validation.size()}, {"test", m.test.size()}}},
          {"train", entries(m.train)},
          {"validation", entries(m.validation)},
          {"test", entries(m.test)}};
}

DatasetManifest manifest_from_json(const json& j) {
  try {
    DatasetManifest m;
    m.root = j.at("root").get<std::string>();
    m.target_class = j.at("target_class").get<std::string>();
    m.background_class = j.at("background_class").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [cls, list] : j.at("class_files").items()) {
      m.class_files[cls] = list.get<std::vector<std::string>>();
    }
    auto entries = [](const json& arr) {
      std::vector<ManifestEntry> v;
      for (const auto& e : arr) v.push_back({e.at("path").get<std::string>(), e.at("label").get<int>()});
      return v;
    };
    m.train = entries(j.at("train"));
    m.validation = entries(j.at("validation"));
    m.test = entries(j.at("test"));
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what(), 0);
  }
}

void write_manifest(const DatasetManifest& m, const fs::path& path) { write_text(path, manifest_to_json(m).dump(2)); }

DatasetManifest read_manifest(const fs::path& path) { return manifest_from_json(read_json(path)); }

image::RgbImage render_stripes(Rng& rng, int size) {
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double cycles = rng.uniform(3.0, 8.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double sharpness = rng.uniform(1.0, 3.0);
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  ImageGrid field(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double t = 2.0 * std::numbers::pi * cycles * (x * c + y * s) / size + phase;
      field.at(x, y) = 0.5 + 0.5 * std::tanh(sharpness * std::sin(t)) / std::tanh(sharpness);
    }
  }
  return colorize(field, rng);
}

image::RgbImage render_blobs(Rng& rng, int size) {
  const int count = static_cast<int>(rng.uniform_int(6, 14));
  struct Blob {
    double x, y, r;
  };
  std::vector<Blob> blobs;
  for (int i = 0; i < count; ++i) {
    blobs.push_back({rng.uniform(0.0, size), rng.uniform(0.0, size), rng.uniform(0.05, 0.14) * size});
  }
  ImageGrid field(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = 0.0;
      for (const auto& b : blobs) {
        const double dx = x - b.x;
        const double dy = y - b.y;
        v += std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
      }
      field.at(x, y) = v;
    }
  }
  return colorize(image::normalize_minmax(field), rng);
}

DatasetManifest make_texture_dataset(const fs::path& out_dir, int per_class, std::uint64_t seed,
                                     const SplitSpec& spec) {
  if (per_class < 20) throw ConfigError("make_texture_dataset: per_class must be at least 20");
  SplitSpec named = spec;
  if (named.target.empty()) named.target = "stripes";
  if (named.background.empty()) named.background = "background";
  std::error_code ec;
  fs::create_directories(out_dir / named.target, ec);
  fs::create_directories(out_dir / named.background, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());

  parallel_for(static_cast<std::size_t>(2 * per_class), [&](std::size_t k) {
    const bool stripes = k < static_cast<std::size_t>(per_class);
    const std::size_t i = stripes ? k : k - per_class;
    Rng rng(derive_seed(seed, stripes ? 0x57 : 0xb6, i));
    const image::RgbImage img = stripes ? render_stripes(rng) : render_blobs(rng);
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.png", i);
    image::save_png(img, out_dir / (stripes ? named.target : named.background) / name);
  });
  DatasetManifest m = ingest_dataset(out_dir, named, seed);
  write_manifest(m, out_dir / kManifestFile);
  return m;
}

void ExperimentConfig::derive_seeds() {
  evolution.seed = derive_seed(master_seed, 0xe70);
  evolution.descriptor_n = avc.descriptor_n;
  cnn.seed = derive_seed(master_seed, 0xc22);
}

void ExperimentConfig::validate() const {
  if (epsilons.empty()) throw ConfigError("epsilon list is empty");
  for (std::size_t i = 0; i < epsilons.size(); ++i) {
    if (epsilons[i] < 1 || epsilons[i] > 255) throw ConfigError("epsilon values must lie in 1..255");
    if (i > 0 && epsilons[i] <= epsilons[i - 1]) throw ConfigError("epsilon values must be strictly increasing");
  }
  if (avc.working_size < 2) throw ConfigError("avc.working_size must be at least 2");
  if (avc.descriptor_n < 1) throw ConfigError("avc.descriptor_n must be positive");
  if (avc.descriptor_n > 4 * avc.working_size * avc.working_size) {
    throw ConfigError("avc.descriptor_n exceeds the pooled mental-map size");
  }
  if (!(svm_c > 0.0)) throw ConfigError("svm_c must be positive");
  if (!generate_dataset && dataset_root.empty()) throw ConfigError("dataset.root is required when generate is false");
  if (generate_dataset && per_class < 20) throw ConfigError("dataset.per_class must be at least 20");
  if (eval_split != "validation" && eval_split != "test") throw ConfigError("eval_split must be validation or test");
  if (architecture.input_size < 4 || architecture.input_size % 4 != 0) {
    throw ConfigError("cnn.input_size must be a positive multiple of 4");
  }
  if (cnn.epochs < 1 || cnn.batch_size < 1 || !(cnn.learning_rate > 0.0)) throw ConfigError("invalid cnn training settings");
  evolution.validate();
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    c.output_dir = j.value("output_dir", c.output_dir.string());
    c.master_seed = j.value("master_seed", c.master_seed);
    c.threads = j.value("threads", c.threads);
    c.epsilons = j.value("epsilons", c.epsilons);
    c.svm_c = j.value("svm_c", c.svm_c);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      c.dataset_root = d.value("root", std::string());
      c.generate_dataset = d.value("generate", c.dataset_root.empty());
      c.per_class = d.value("per_class", c.per_class);
      c.eval_split = d.value("eval_split", c.eval_split);
      c.split.target = d.value("target", c.split.target);
      c.split.background = d.value("background", c.split.background);
      if (d.contains("split")) {
        const json& s = d.at("split");
        c.split.train = s.value("train", c.split.train);
        c.split.validation = s.value("validation", c.split.validation);
        c.split.test = s.value("test", c.split.test);
      }
    }
    if (j.contains("avc")) {
      c.avc.working_size = j["avc"].value("working_size", c.avc.working_size);
      c.avc.descriptor_n = j["avc"].value("descriptor_n", c.avc.descriptor_n);
    }
    if (j.contains("evolution")) {
      const json& e = j.at("evolution");
      auto& ev = c.evolution;
      ev.population_size = e.value("population_size", ev.population_size);
      ev.max_generations = e.value("max_generations", ev.max_generations);
      ev.target_fitness = e.value("target_fitness", ev.target_fitness);
      ev.p_crossover = e.value("p_crossover", ev.p_crossover);
      ev.p_mutation = e.value("p_mutation", ev.p_mutation);
      ev.p_chromosome_level = e.value("p_chromosome_level", ev.p_chromosome_level);
      ev.elitism_count = e.value("elitism_count", ev.elitism_count);
      ev.init_depth_cap = e.value("init_depth_cap", ev.init_depth_cap);
      ev.max_depth = e.value("max_depth", ev.max_depth);
    }
    if (j.contains("cnn")) {
      const json& n = j.at("cnn");
      auto& a = c.architecture;
      a.input_size = n.value("input_size", a.input_size);
      a.conv1_channels = n.value("conv1_channels", a.conv1_channels);
      a.conv2_channels = n.value("conv2_channels", a.conv2_channels);
      a.hidden = n.value("hidden", a.hidden);
      auto& t = c.cnn;
      t.epochs = n.value("epochs", t.epochs);
      t.batch_size = n.value("batch_size", t.batch_size);
      t.learning_rate = n.value("learning_rate", t.learning_rate);
      t.momentum = n.value("momentum", t.momentum);
      t.decay_every = n.value("decay_every", t.decay_every);
      t.decay_factor = n.value("decay_factor", t.decay_factor);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.derive_seeds();
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const auto& ev = c.evolution;
  const auto& a = c.architecture;
  const auto& t = c.cnn;
  return {{"output_dir", c.output_dir.generic_string()},
          {"master_seed", c.master_seed},
          {"threads", c.threads},
          {"epsilons", c.epsilons},
          {"svm_c", c.svm_c},
          {"dataset",
           {{"root", c.dataset_root.generic_string()},
            {"generate", c.generate_dataset},
            {"per_class", c.per_class},
            {"eval_split", c.eval_split},
            {"target", c.split.target},
            {"background", c.split.background},
            {"split", {{"train", c.split.train}, {"validation", c.split.validation}, {"test", c.split.test}}}}},
          {"avc", {{"working_size", c.avc.working_size}, {"descriptor_n", c.avc.descriptor_n}}},
          {"evolution",
           {{"population_size", ev.population_size},
            {"max_generations", ev.max_generations},
            {"target_fitness", ev.target_fitness},
            {"p_crossover", ev.p_crossover},
            {"p_mutation", ev.p_mutation},
            {"p_chromosome_level", ev.p_chromosome_level},
            {"elitism_count", ev.elitism_count},
            {"init_depth_cap", ev.init_depth_cap},
            {"max_depth", ev.max_depth}}},
          {"cnn",
           {{"input_size", a.input_size},
            {"conv1_channels", a.conv1_channels},
            {"conv2_channels", a.conv2_channels},
            {"hidden", a.hidden},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"momentum", t.momentum},
            {"decay_every", t.decay_every},
            {"decay_factor", t.decay_factor}}}};
}

ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_json(path)); }

json report_to_json(const RunReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"method", row.method}, {"train", row.train}, {"clean", row.clean}, {"adversarial", row.adversarial}});
  }
  return {{"epsilons", r.epsilons},
          {"rows", rows},
          {"complete", r.complete},
          {"failed_stage", r.failed_stage},
          {"metadata", r.metadata}};
}

RunReport report_from_json(const json& j) {
  try {
    RunReport r;
    r.epsilons = j.at("epsilons").get<std::vector<int>>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back({row.at("method").get<std::string>(), row.at("train").get<double>(),
                        row.at("clean").get<double>(), row.at("adversarial").get<std::vector<double>>()});
    }
    r.complete = j.at("complete").get<bool>();
    r.failed_stage = j.at("failed_stage").get<std::string>();
    r.metadata = j.at("metadata");
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what(), 0);
  }
}

void emit_report(const RunReport& report, const fs::path& dir) {
  for (const auto& row : report.rows) {
    if (row.adversarial.size() != report.epsilons.size()) {
      throw Error("report row '" + row.method + "' has " + std::to_string(row.adversarial.size()) +
                  " adversarial accuracies for " + std::to_string(report.epsilons.size()) + " epsilons");
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());

  write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");

  std::string csv = "method,train,clean";
  for (int e : report.epsilons) csv += ",eps_" + std::to_string(e);
  csv += "\n";
  std::string series = "method,epsilon,accuracy\n";
  for (const auto& row : report.rows) {
    csv += row.method + "," + fixed4(row.train) + "," + fixed4(row.clean);
    series += row.method + ",0," + fixed4(row.clean) + "\n";
    for (std::size_t i = 0; i < row.adversarial.size(); ++i) {
      csv += "," + fixed4(row.adversarial[i]);
      series += row.method + "," + std::to_string(report.epsilons[i]) + "," + fixed4(row.adversarial[i]) + "\n";
    }
    csv += "\n";
  }
  write_text(dir / "report.csv", csv);
  write_text(dir / "accuracy_vs_epsilon.csv", series);
}

std::string sha256_file(const fs::path& path) {
  const std::string data = read_text(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed for " + path.string());
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

image::RgbImage attack_input(const image::RgbImage& img, int input_size) {
  return image::quantize8(image::resize(img, input_size, input_size));
}

DatasetManifest resolve_dataset(const fs::path& data_dir, const ExperimentConfig& config) {
  if (fs::exists(data_dir / kManifestFile)) {
    DatasetManifest m = read_manifest(data_dir / kManifestFile);
    m.root = data_dir;
    return m;
  }
  return ingest_dataset(data_dir, config.split, derive_seed(config.master_seed, 0xda7a));
}

LoadedSplit load_split(const DatasetManifest& m, const std::string& split) {
  const auto& entries = m.split(split);
  LoadedSplit out;
  out.images.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) { out.images[i] = image::load_image(m.root / entries[i].path); });
  for (const auto& e : entries) {
    out.labels.push_back(e.label);
    out.paths.push_back(e.path);
  }
  return out;
}


namespace {

std::ostream* g_log = &std::clog;

void log_line(const std::string& text) {
  if (g_log) *g_log << text << std::endl;
}

std::vector<attack::Tensor> to_tensors(const std::vector<image::RgbImage>& images, int input_size) {
  std::vector<attack::Tensor> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) { out[i] = attack::to_tensor(attack_input(images[i], input_size)); });
  return out;
}

std::vector<int> to_classes(const std::vector<int>& labels) {
  std::vector<int> out;
  for (int y : labels) out.push_back(label_to_class(y));
  return out;
}

std::vector<int> bp_predictions(const gp::Individual& bp, const svm::LinearClassifier& clf,
                                const std::vector<image::RgbImage>& images, const avc::AvcConfig& avc_config) {
  std::vector<int> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    out[i] = clf.predict(avc::describe_image(bp, images[i], avc_config).values);
  });
  return out;
}

std::vector<int> cnn_predictions(const attack::DiffModel& model, const std::vector<attack::Tensor>& x) {
  std::vector<int> out(x.size());
  parallel_for(x.size(), [&](std::size_t i) { out[i] = class_to_label(attack::predict_class(model, x[i])); });
  return out;
}

struct AdversarialSet {
  std::vector<image::RgbImage> images;
};

AdversarialSet load_adversarial_set(const fs::path& dir, const std::vector<std::string>& sources,
                                    const std::vector<image::RgbImage>& clean, int epsilon) {
  const json index = read_json(dir / "index.json");
  if (index.at("epsilon").get<int>() != epsilon) throw Error(dir.string() + ": epsilon mismatch in index.json");
  const auto& entries = index.at("entries");
  if (entries.size() != sources.size()) {
    throw Error(dir.string() + ": expected " + std::to_string(sources.size()) + " adversarial images, index lists " +
                std::to_string(entries.size()));
  }
  AdversarialSet set;
  set.images.resize(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (entries[i].at("source").get<std::string>() != sources[i]) {
      throw Error(dir.string() + ": adversarial entry " + std::to_string(i) + " does not match " + sources[i]);
    }
  }
  parallel_for(sources.size(), [&](std::size_t i) {
    set.images[i] = image::load_image(dir / entries[i].at("file").get<std::string>());
  });
  // Budget check over the whole set before anything is evaluated.
  const double bound = epsilon / 255.0 + 1e-12;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& a = set.images[i];
    const auto& c = clean[i];
    if (!a.r.same_shape(c.r)) throw EvaluationError(dir.string() + ": adversarial image size differs for " + sources[i]);
    for (const auto* pair : {&a.r, &a.g, &a.b}) {
      const ImageGrid& cp = pair == &a.r ? c.r : (pair == &a.g ? c.g : c.b);
      for (std::size_t k = 0; k < cp.size(); ++k) {
        if (std::abs((*pair)[k] - cp[k]) > bound) {
          throw EvaluationError(dir.string() + ": perturbation exceeds epsilon/255 for " + sources[i]);
        }
      }
    }
  }
  return set;
}

double accuracy_of(const std::vector<int>& predicted, const std::vector<int>& labels) {
  return svm::accuracy(predicted, labels);
}

void write_predictions(const fs::path& path, const std::vector<std::string>& sources, const std::vector<int>& labels,
                       const std::vector<int>& clean, const std::vector<std::vector<int>>& adversarial,
                       const std::vector<int>& epsilons) {
  std::string csv = "path,label,clean";
  for (int e : epsilons) csv += ",eps_" + std::to_string(e);
  csv += "\n";
  for (std::size_t i = 0; i < sources.size(); ++i) {
    csv += sources[i] + "," + std::to_string(labels[i]) + "," + std::to_string(clean[i]);
    for (const auto& col : adversarial) csv += "," + std::to_string(col[i]);
    csv += "\n";
  }
  write_text(path, csv);
}

}  // namespace

void set_log_stream(std::ostream* stream) { g_log = stream; }

BpArtifacts run_evolution_stage(const DatasetManifest& m, const ExperimentConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const LoadedSplit train = load_split(m, "train");
  std::vector<avc::ColorDecomposition> decs(train.images.size());
  parallel_for(decs.size(), [&](std::size_t i) {
    decs[i] = avc::prepare_image(train.images[i], config.avc.working_size);
  });

  gp::EvolutionConfig evo = config.evolution;
  evo.descriptor_n = config.avc.descriptor_n;
  const avc::FitnessOptions options{evo.seed, config.svm_c, 3};
  const int n = config.avc.descriptor_n;
  auto fitness = [&](const gp::Individual& ind) { return avc::fitness(ind, decs, train.labels, n, options); };
  auto observer = [&](int generation, std::span<const gp::Individual> population) {
    double best = 0.0;
    double mean = 0.0;
    for (const auto& ind : population) {
      best = std::max(best, ind.fitness.value_or(0.0));
      mean += ind.fitness.value_or(0.0);
    }
    mean /= static_cast<double>(population.size());
    log_line("evolve: generation " + std::to_string(generation) + " best " + fixed4(best) + " mean " + fixed4(mean));
  };
  gp::EvolutionResult result = gp::evolve(evo, fitness, observer);
  gp::save_individual(result.best, out_dir / "best.ind");
  gp::save_history(result.history, out_dir);

  BpArtifacts out{result.best, {}, 0.0};
  svm::LabeledVectors data;
  data.x = avc::describe_all(out.best, decs, n);
  data.y = train.labels;
  out.classifier = svm::train_classifier(data, {config.svm_c, derive_seed(config.master_seed, 0x5f), 1e-4, 1000});
  svm::save_classifier(out.classifier, out_dir / "svm.model");
  std::vector<int> predicted;
  for (const auto& x : data.x) predicted.push_back(out.classifier.predict(x));
  out.train_accuracy = svm::accuracy(predicted, data.y);
  write_text(out_dir / "metrics.json", json{{"fitness", out.best.fitness.value_or(0.0)},
                                            {"generations", result.history.records.size()},
                                            {"train_accuracy", out.train_accuracy}}
                                           .dump(2));
  return out;
}

attack::TrainOutcome run_cnn_stage(const DatasetManifest& m, const ExperimentConfig& config, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const int size = config.architecture.input_size;
  const LoadedSplit train = load_split(m, "train");
  const LoadedSplit val = load_split(m, config.eval_split);
  const auto train_x = to_tensors(train.images, size);
  const auto val_x = to_tensors(val.images, size);
  const auto train_y = to_classes(train.labels);
  const auto val_y = to_classes(val.labels);
  attack::TrainOutcome outcome =
      attack::train_model(config.architecture, train_x, train_y, val_x, val_y, config.cnn);
  for (std::size_t e = 0; e < outcome.epoch_loss.size(); ++e) {
    log_line("train-cnn: epoch " + std::to_string(e + 1) + " loss " + fixed4(outcome.epoch_loss[e]));
  }
  const json meta{{"seed", config.cnn.seed},
                  {"train_accuracy", outcome.train_accuracy},
                  {config.eval_split + "_accuracy", outcome.validation_accuracy}};
  attack::save_model(outcome.model, out_dir / "cnn.bin", meta.dump());
  write_text(out_dir / "metrics.json", json{{"train_accuracy", outcome.train_accuracy},
                                            {"eval_accuracy", outcome.validation_accuracy},
                                            {"epoch_loss", outcome.epoch_loss}}
                                           .dump(2));
  return outcome;
}

void run_attack_stage(const attack::DiffModel& model, const DatasetManifest& m, const std::string& split,
                      const std::vector<int>& epsilons, const fs::path& out_dir) {
  const int size = model.input.width;
  if (model.input.height != size || model.input.channels != 3) throw ConfigError("attack: model input must be 3 x s x s");
  const LoadedSplit data = load_split(m, split);
  for (int e : epsilons) fs::create_directories(out_dir / eps_dir_name(e));

  const std::size_t count = data.images.size();
  std::vector<std::vector<json>> sidecars(epsilons.size(), std::vector<json>(count));
  parallel_for(count, [&](std::size_t i) {
    const image::RgbImage x = attack_input(data.images[i], size);
    const int cls = label_to_class(data.labels[i]);
    const attack::Tensor grad = attack::grad_input(model, attack::to_tensor(x), cls);
    const int before = attack::predict_class(model, attack::to_tensor(x));
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", i);
    for (std::size_t k = 0; k < epsilons.size(); ++k) {
      const attack::AdversarialExample ex = attack::fgsm_from_gradient(x, grad, cls, epsilons[k]);
      const image::RgbImage stored = image::quantize8(ex.perturbed);
      const fs::path dir = out_dir / eps_dir_name(epsilons[k]);
      image::save_png(stored, dir / (std::string(name) + ".png"));
      const attack::Tensor adv = attack::to_tensor(stored);
      const attack::Tensor clean = attack::to_tensor(x);
      std::vector<double> rho(adv.data.size());
      for (std::size_t j = 0; j < rho.size(); ++j) rho[j] = adv.data[j] - clean.data[j];
      json side{{"source", data.paths[i]},
                {"file", std::string(name) + ".png"},
                {"label", data.labels[i]},
                {"epsilon", epsilons[k]},
                {"linf", attack::norm(rho, attack::NormOrder::infinity())},
                {"prediction_clean", class_to_label(before)},
                {"prediction_adversarial", class_to_label(attack::predict_class(model, adv))}};
      write_text(dir / (std::string(name) + ".json"), side.dump(2));
      sidecars[k][i] = std::move(side);
    }
  });
  for (std::size_t k = 0; k < epsilons.size(); ++k) {
    json entries = json::array();
    for (const auto& s : sidecars[k]) entries.push_back({{"source", s["source"]}, {"file", s["file"]}, {"label", s["label"]}});
    write_text(out_dir / eps_dir_name(epsilons[k]) / "index.json",
               json{{"epsilon", epsilons[k]}, {"split", split}, {"entries", entries}}.dump(2));
  }
}

RunReport run_evaluation_stage(const gp::Individual& bp, const svm::LinearClassifier& clf,
                               const attack::DiffModel& model, const DatasetManifest& m,
                               const ExperimentConfig& config, const fs::path& adv_dir, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const int size = model.input.width;
  const LoadedSplit train = load_split(m, "train");
  const LoadedSplit eval = load_split(m, config.eval_split);

  std::vector<image::RgbImage> clean(eval.images.size());
  parallel_for(clean.size(), [&](std::size_t i) { clean[i] = attack_input(eval.images[i], size); });

  std::vector<AdversarialSet> adversarial;
  for (int e : config.epsilons) {
    adversarial.push_back(load_adversarial_set(adv_dir / eps_dir_name(e), eval.paths, clean, e));
  }

  RunReport report;
  report.epsilons = config.epsilons;
  MethodRow bp_row{"BP", 0.0, 0.0, {}};
  MethodRow cnn_row{"DiffModel", 0.0, 0.0, {}};

  bp_row.train = accuracy_of(bp_predictions(bp, clf, train.images, config.avc), train.labels);
  std::vector<attack::Tensor> train_x = to_tensors(train.images, size);
  cnn_row.train = accuracy_of(cnn_predictions(model, train_x), train.labels);
  train_x.clear();

  const auto bp_clean = bp_predictions(bp, clf, clean, config.avc);
  std::vector<attack::Tensor> clean_x(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) clean_x[i] = attack::to_tensor(clean[i]);
  const auto cnn_clean = cnn_predictions(model, clean_x);
  bp_row.clean = accuracy_of(bp_clean, eval.labels);
  cnn_row.clean = accuracy_of(cnn_clean, eval.labels);

  std::vector<std::vector<int>> bp_adv;
  std::vector<std::vector<int>> cnn_adv;
  for (std::size_t k = 0; k < adversarial.size(); ++k) {
    const auto& imgs = adversarial[k].images;
    bp_adv.push_back(bp_predictions(bp, clf, imgs, config.avc));
    std::vector<attack::Tensor> x(imgs.size());
    for (std::size_t i = 0; i < imgs.size(); ++i) x[i] = attack::to_tensor(imgs[i]);
    cnn_adv.push_back(cnn_predictions(model, x));
    bp_row.adversarial.push_back(accuracy_of(bp_adv.back(), eval.labels));
    cnn_row.adversarial.push_back(accuracy_of(cnn_adv.back(), eval.labels));
    log_line("evaluate: eps " + std::to_string(config.epsilons[k]) + " BP " + fixed4(bp_row.adversarial.back()) +
             " DiffModel " + fixed4(cnn_row.adversarial.back()));
  }
  write_predictions(out_dir / "predictions_bp.csv", eval.paths, eval.labels, bp_clean, bp_adv, config.epsilons);
  write_predictions(out_dir / "predictions_diffmodel.csv", eval.paths, eval.labels, cnn_clean, cnn_adv,
                    config.epsilons);

  report.rows = {bp_row, cnn_row};
  report.complete = true;
  report.metadata["eval_split"] = config.eval_split;
  report.metadata["eval_count"] = eval.labels.size();
  report.metadata["train_count"] = train.labels.size();
  return report;
}

RunReport run_experiment(const ExperimentConfig& config, bool force) {
  config.validate();
  if (config.threads > 0) set_thread_count(config.threads);
  const fs::path out = config.output_dir;
  fs::create_directories(out);

  RunReport report;
  report.epsilons = config.epsilons;
  report.metadata["config"] = config_to_json(config);
  report.metadata["seeds"] = {{"master", config.master_seed},
                              {"evolution", config.evolution.seed},
                              {"fitness_folds", config.evolution.seed},
                              {"svm", derive_seed(config.master_seed, 0x5f)},
                              {"cnn", config.cnn.seed},
                              {"dataset", derive_seed(config.master_seed, 0xda7a)}};
  report.metadata["timings_seconds"] = json::object();
  report.metadata["files"] = json::object();

  const fs::path data_dir = out / "00_data";
  const fs::path evolve_dir = out / "01_evolve";
  const fs::path cnn_dir = out / "02_cnn";
  const fs::path attack_dir = out / "03_attack";
  const fs::path eval_dir = out / "04_evaluate";

  std::string stage;
  auto run_stage = [&](const std::string& name, const fs::path& dir, const auto& body) {
    stage = name;
    const bool done = !force && fs::exists(dir / kDoneMarker);
    const auto start = std::chrono::steady_clock::now();
    if (!done) {
      if (fs::exists(dir)) fs::remove_all(dir);
      fs::create_directories(dir);
    }
    log_line(name + (done ? ": resuming from checkpoint" : ": running"));
    body(done);
    if (!done) write_text(dir / kDoneMarker, "");
    report.metadata["timings_seconds"][name] = done ? 0.0 : elapsed_seconds(start);
  };

  try {
    DatasetManifest manifest;
    run_stage("data", data_dir, [&](bool done) {
      if (!done) {
        const std::uint64_t seed = derive_seed(config.master_seed, 0xda7a);
        if (config.generate_dataset) {
          SplitSpec spec = config.split;
          manifest = make_texture_dataset(data_dir / "images", config.per_class, seed, spec);
        } else {
          manifest = ingest_dataset(config.dataset_root, config.split, seed);
        }
        write_manifest(manifest, data_dir / kManifestFile);
      }
      manifest = read_manifest(data_dir / kManifestFile);
    });
    report.metadata["files"]["manifest.json"] = sha256_file(data_dir / kManifestFile);

    std::optional<BpArtifacts> artifacts;
    run_stage("evolve", evolve_dir, [&](bool done) {
      if (!done) {
        artifacts = run_evolution_stage(manifest, config, evolve_dir);
      } else {
        artifacts = BpArtifacts{gp::load_individual(evolve_dir / "best.ind"),
                                svm::load_classifier(evolve_dir / "svm.model"), 0.0};
      }
    });
    const BpArtifacts& bp = *artifacts;
    report.metadata["files"]["best.ind"] = sha256_file(evolve_dir / "best.ind");
    report.metadata["files"]["svm.model"] = sha256_file(evolve_dir / "svm.model");
    report.metadata["bp_fitness"] = bp.best.fitness.value_or(0.0);

    attack::DiffModel model;
    run_stage("train-cnn", cnn_dir, [&](bool done) {
      model = done ? attack::load_model(cnn_dir / "cnn.bin") : run_cnn_stage(manifest, config, cnn_dir).model;
    });
    report.metadata["files"]["cnn.bin"] = sha256_file(cnn_dir / "cnn.bin");

    run_stage("attack", attack_dir, [&](bool done) {
      if (!done) run_attack_stage(model, manifest, config.eval_split, config.epsilons, attack_dir);
    });

    run_stage("evaluate", eval_dir, [&](bool done) {
      if (!done) {
        RunReport result = run_evaluation_stage(bp.best, bp.classifier, model, manifest, config, attack_dir, eval_dir);
        write_text(eval_dir / "rows.json", report_to_json(result).dump(2));
      }
      const RunReport stored = report_from_json(read_json(eval_dir / "rows.json"));
      report.rows = stored.rows;
      for (const auto& [k, v] : stored.metadata.items()) report.metadata[k] = v;
    });
    report.metadata["files"]["predictions_bp.csv"] = sha256_file(eval_dir / "predictions_bp.csv");
    report.metadata["files"]["predictions_diffmodel.csv"] = sha256_file(eval_dir / "predictions_diffmodel.csv");
    report.complete = true;
  } catch (const std::exception& e) {
    report.complete = false;
    report.failed_stage = stage;
    report.metadata["error"] = e.what();
    try {
      emit_report(report, out);
    } catch (const std::exception&) {
    }
    throw StageError(stage, e.what());
  }
  emit_report(report, out);
  return report;
}

}  // namespace brainprog::harness
