#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalign/data.hpp"
#include "evalign/eval.hpp"
#include "evalign/training.hpp"

namespace evalign {

enum class DataSource { synthetic, csv, colored_mnist };

inline DataSource data_source_from_string(const std::string& s) {
  if (s == "synthetic") return DataSource::synthetic;
  if (s == "csv") return DataSource::csv;
  if (s == "colored_mnist") return DataSource::colored_mnist;
  throw std::invalid_argument("unknown data source '" + s +
                              "' (synthetic, csv, colored_mnist)");
}

struct SyntheticDataConfig {
  int dim = 10;
  double core_separation = 6.0;
  double spurious_separation = 18.0;
  double noise_sigma = 6.0;
  // Heldout mirrors the usual group-robustness validation composition:
  // attribute-balanced within each class, unlike the skewed training split.
  GroupCounts train_counts{{1600, 86}, {81, 1382}};
  GroupCounts heldout_counts{{400, 400}, {115, 115}};
  GroupCounts test_counts{{1000, 1000}, {1000, 1000}};
};

struct CsvDataConfig {
  std::string train;
  std::string heldout;
  std::string test;
  CsvSchema schema;  // empty feature_columns = take every non-label column
};

struct ColoredMnistConfig {
  std::string train_images = "data/mnist/train-images-idx3-ubyte";
  std::string train_labels = "data/mnist/train-labels-idx1-ubyte";
  std::string test_images = "data/mnist/t10k-images-idx3-ubyte";
  std::string test_labels = "data/mnist/t10k-labels-idx1-ubyte";
  std::pair<int, int> class_digits{1, 8};
  GroupCounts train_counts{{6398, 344}, {325, 5526}};
  double heldout_fraction = 0.3;  // share of the test pool set aside for calibration
  double heldout_p_corr = 0.5;    // color-label correlation on that slice
  double test_p_corr = 0.1;       // reversed correlation on the final test slice
  bool flatten = true;
};

struct ExperimentConfig {
  DataSource source = DataSource::synthetic;
  SyntheticDataConfig synthetic;
  CsvDataConfig csv;
  ColoredMnistConfig mnist;
  TrainConfig train;
  std::string output_dir = "out";
  ReportFormat format = ReportFormat::json;
};

namespace detail {

inline void check_known_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                             const std::string& where) {
  for (const auto& [key, val] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument("config: unknown key '" + key + "' in " + where);
  }
}

inline GroupCounts counts_from_json(const nlohmann::json& j, const std::string& where) {
  GroupCounts c;
  if (!j.is_array()) throw std::invalid_argument("config: " + where + " must be an array");
  for (const auto& row : j) {
    if (!row.is_array()) throw std::invalid_argument("config: " + where + " rows must be arrays");
    c.push_back(row.get<std::vector<long>>());
  }
  return c;
}

inline nlohmann::json counts_to_json(const GroupCounts& c) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& row : c) j.push_back(row);
  return j;
}

template <typename T>
inline void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::check_known_keys(
      j,
      {"t1_epochs", "t2_epochs", "lr1", "lr2", "eta", "beta", "batch_size", "seed",
       "selection", "loss_variant", "calib_fraction", "hidden_width", "activation",
       "momentum", "class_balance", "include_calib_in_stage1"},
      "train");
  TrainConfig c;
  detail::maybe(j, "t1_epochs", c.t1_epochs);
  detail::maybe(j, "t2_epochs", c.t2_epochs);
  detail::maybe(j, "lr1", c.lr1);
  detail::maybe(j, "lr2", c.lr2);
  detail::maybe(j, "eta", c.anneal.eta);
  detail::maybe(j, "beta", c.beta);
  detail::maybe(j, "batch_size", c.batch_size);
  detail::maybe(j, "seed", c.seed);
  if (j.contains("selection")) c.selection = selection_from_string(j.at("selection"));
  if (j.contains("loss_variant")) c.loss_variant = loss_variant_from_string(j.at("loss_variant"));
  detail::maybe(j, "calib_fraction", c.calib_fraction);
  detail::maybe(j, "hidden_width", c.hidden_width);
  if (j.contains("activation")) c.activation = activation_from_string(j.at("activation"));
  detail::maybe(j, "momentum", c.momentum);
  detail::maybe(j, "class_balance", c.class_balance);
  detail::maybe(j, "include_calib_in_stage1", c.include_calib_in_stage1);
  validate(c);
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["t1_epochs"] = c.t1_epochs;
  j["t2_epochs"] = c.t2_epochs;
  j["lr1"] = c.lr1;
  j["lr2"] = c.lr2;
  j["eta"] = c.anneal.eta;
  j["beta"] = c.beta;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["selection"] = to_string(c.selection);
  j["loss_variant"] = to_string(c.loss_variant);
  j["calib_fraction"] = c.calib_fraction;
  j["hidden_width"] = c.hidden_width;
  j["activation"] = to_string(c.activation);
  j["momentum"] = c.momentum;
  j["class_balance"] = c.class_balance;
  j["include_calib_in_stage1"] = c.include_calib_in_stage1;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::check_known_keys(j, {"data", "train", "output_dir", "report_format"}, "config root");
  ExperimentConfig cfg;
  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
  if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("report_format")) {
    cfg.format = report_format_from_string(j.at("report_format"));
  }
  if (!j.contains("data")) return cfg;
  const nlohmann::json& data = j.at("data");
  detail::check_known_keys(data, {"source", "synthetic", "csv", "colored_mnist"}, "data");
  if (data.contains("source")) cfg.source = data_source_from_string(data.at("source"));
  if (data.contains("synthetic")) {
    const nlohmann::json& s = data.at("synthetic");
    detail::check_known_keys(s,
                             {"dim", "core_separation", "spurious_separation", "noise_sigma",
                              "train_counts", "heldout_counts", "test_counts"},
                             "data.synthetic");
    detail::maybe(s, "dim", cfg.synthetic.dim);
    detail::maybe(s, "core_separation", cfg.synthetic.core_separation);
    detail::maybe(s, "spurious_separation", cfg.synthetic.spurious_separation);
    detail::maybe(s, "noise_sigma", cfg.synthetic.noise_sigma);
    if (s.contains("train_counts")) {
      cfg.synthetic.train_counts = detail::counts_from_json(s.at("train_counts"), "train_counts");
    }
    if (s.contains("heldout_counts")) {
      cfg.synthetic.heldout_counts =
          detail::counts_from_json(s.at("heldout_counts"), "heldout_counts");
    }
    if (s.contains("test_counts")) {
      cfg.synthetic.test_counts = detail::counts_from_json(s.at("test_counts"), "test_counts");
    }
  }
  if (data.contains("csv")) {
    const nlohmann::json& s = data.at("csv");
    detail::check_known_keys(s,
                             {"train", "heldout", "test", "features", "label_column",
                              "attribute_column", "num_classes", "num_attributes"},
                             "data.csv");
    detail::maybe(s, "train", cfg.csv.train);
    detail::maybe(s, "heldout", cfg.csv.heldout);
    detail::maybe(s, "test", cfg.csv.test);
    if (s.contains("features")) {
      cfg.csv.schema.feature_columns = s.at("features").get<std::vector<std::string>>();
    }
    detail::maybe(s, "label_column", cfg.csv.schema.label_column);
    detail::maybe(s, "attribute_column", cfg.csv.schema.attribute_column);
    detail::maybe(s, "num_classes", cfg.csv.schema.num_classes);
    detail::maybe(s, "num_attributes", cfg.csv.schema.num_attributes);
  }
  if (data.contains("colored_mnist")) {
    const nlohmann::json& s = data.at("colored_mnist");
    detail::check_known_keys(s,
                             {"train_images", "train_labels", "test_images", "test_labels",
                              "class_digits", "train_counts", "heldout_fraction",
                              "heldout_p_corr", "test_p_corr", "flatten"},
                             "data.colored_mnist");
    detail::maybe(s, "train_images", cfg.mnist.train_images);
    detail::maybe(s, "train_labels", cfg.mnist.train_labels);
    detail::maybe(s, "test_images", cfg.mnist.test_images);
    detail::maybe(s, "test_labels", cfg.mnist.test_labels);
    if (s.contains("class_digits")) {
      const auto d = s.at("class_digits").get<std::vector<int>>();
      if (d.size() != 2) throw std::invalid_argument("config: class_digits needs 2 entries");
      cfg.mnist.class_digits = {d[0], d[1]};
    }
    if (s.contains("train_counts")) {
      cfg.mnist.train_counts = detail::counts_from_json(s.at("train_counts"), "train_counts");
    }
    detail::maybe(s, "heldout_fraction", cfg.mnist.heldout_fraction);
    detail::maybe(s, "heldout_p_corr", cfg.mnist.heldout_p_corr);
    detail::maybe(s, "test_p_corr", cfg.mnist.test_p_corr);
    detail::maybe(s, "flatten", cfg.mnist.flatten);
  }
  return cfg;
}

// Named hyperparameter bundles; everything in them can be overridden by the
// config file or command-line flags.
inline nlohmann::json preset_json(const std::string& name) {
  nlohmann::json j;
  if (name == "synthetic") {
    j["data"]["source"] = "synthetic";
    j["data"]["synthetic"] = {{"dim", 10},
                              {"core_separation", 6.0},
                              {"spurious_separation", 18.0},
                              {"noise_sigma", 6.0},
                              {"train_counts", {{1600, 86}, {81, 1382}}},
                              {"heldout_counts", {{400, 400}, {115, 115}}},
                              {"test_counts", {{1000, 1000}, {1000, 1000}}}};
    j["train"] = {{"t1_epochs", 10}, {"t2_epochs", 40},  {"lr1", 0.01},
                  {"lr2", 0.15},     {"eta", 10},        {"beta", 10.0},
                  {"batch_size", 64}, {"momentum", 0.95},
                  {"hidden_width", 2048}, {"calib_fraction", 0.5},
                  {"selection", "worst_class_acc"}};
  } else if (name == "balanced") {
    j["data"]["source"] = "synthetic";
    j["data"]["synthetic"]["train_counts"] = {{2500, 2500}, {2500, 2500}};
    j["data"]["synthetic"]["heldout_counts"] = {{625, 625}, {625, 625}};
    j["train"] = {{"t1_epochs", 10}, {"t2_epochs", 40},  {"lr1", 0.01},
                  {"lr2", 0.15},     {"eta", 10},        {"beta", 10.0},
                  {"batch_size", 64}, {"momentum", 0.95},
                  {"hidden_width", 2048}, {"calib_fraction", 0.5},
                  {"selection", "worst_class_acc"}};
  } else if (name == "table2") {
    j["data"]["source"] = "colored_mnist";
    // Short stage 1 keeps the evidence logits out of softplus saturation on
    // the minority groups; the pixel-space head is retrained without the
    // proximal pull, relying on per-epoch selection to early-stop.
    j["train"] = {{"t1_epochs", 3},  {"t2_epochs", 100}, {"lr1", 0.05},
                  {"lr2", 2.0},      {"eta", 3},         {"beta", 0.0},
                  {"batch_size", 64}, {"momentum", 0.9}, {"calib_fraction", 0.5},
                  {"selection", "worst_class_acc"}};
  } else {
    throw std::invalid_argument("unknown preset '" + name +
                                "' (synthetic, balanced, table2)");
  }
  return j;
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  return j;
}

// defaults < preset < config file < flag overrides.
inline nlohmann::json merge_config_layers(const std::string& preset,
                                          const std::string& config_path,
                                          const nlohmann::json& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!preset.empty()) j.merge_patch(preset_json(preset));
  if (!config_path.empty()) j.merge_patch(load_json_file(config_path));
  if (!overrides.empty()) j.merge_patch(overrides);
  return j;
}

namespace detail {

// Per-class color counts implied by a correlation level: a p_corr share of
// class 0 is red (color 0) and of class 1 green (color 1).
inline GroupCounts colored_counts(long n_class0, long n_class1, double p_corr) {
  if (!(p_corr >= 0.0) || !(p_corr <= 1.0)) {
    throw std::invalid_argument("colored_counts: p_corr must lie in [0, 1]");
  }
  const long c00 = std::lround(p_corr * static_cast<double>(n_class0));
  const long c11 = std::lround(p_corr * static_cast<double>(n_class1));
  return {{c00, n_class0 - c00}, {n_class1 - c11, c11}};
}

// Splits the first floor(fraction * n_digit) images of each class digit into
// one raw set and the remainder into another, preserving file order.
inline std::pair<RawImageSet, RawImageSet> split_raw_by_digit(const RawImageSet& raw,
                                                              std::pair<int, int> digits,
                                                              double fraction) {
  if (!(fraction > 0.0) || !(fraction < 1.0)) {
    throw std::invalid_argument("split_raw_by_digit: fraction must lie in (0, 1)");
  }
  long pool[2] = {0, 0};
  for (std::uint8_t l : raw.labels) {
    if (l == digits.first) ++pool[0];
    if (l == digits.second) ++pool[1];
  }
  const long quota[2] = {static_cast<long>(std::floor(fraction * pool[0])),
                         static_cast<long>(std::floor(fraction * pool[1]))};
  RawImageSet first, second;
  first.rows = second.rows = raw.rows;
  first.cols = second.cols = raw.cols;
  long taken[2] = {0, 0};
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const int l = raw.labels[i];
    int cls = -1;
    if (l == digits.first) cls = 0;
    if (l == digits.second) cls = 1;
    RawImageSet* dst = &second;
    if (cls >= 0 && taken[cls] < quota[cls]) {
      ++taken[cls];
      dst = &first;
    }
    const auto img = raw.image(i);
    dst->pixels.insert(dst->pixels.end(), img.begin(), img.end());
    dst->labels.push_back(raw.labels[i]);
  }
  return {first, second};
}

}  // namespace detail

// Materializes the three splits named by the config.
inline PipelineData load_pipeline_data(const ExperimentConfig& cfg) {
  PipelineData d;
  if (cfg.source == DataSource::synthetic) {
    SpuriousSpec s;
    s.dim = cfg.synthetic.dim;
    s.core_separation = cfg.synthetic.core_separation;
    s.spurious_separation = cfg.synthetic.spurious_separation;
    s.noise_sigma = cfg.synthetic.noise_sigma;
    s.counts = cfg.synthetic.train_counts;
    s.seed = mix_seed(cfg.train.seed, 101);
    d.train = generate_synthetic(s);
    s.counts = cfg.synthetic.heldout_counts;
    s.seed = mix_seed(cfg.train.seed, 102);
    d.heldout = generate_synthetic(s);
    s.counts = cfg.synthetic.test_counts;
    s.seed = mix_seed(cfg.train.seed, 103);
    d.test = generate_synthetic(s);
    return d;
  }
  if (cfg.source == DataSource::csv) {
    if (cfg.csv.train.empty() || cfg.csv.heldout.empty() || cfg.csv.test.empty()) {
      throw std::invalid_argument("config: csv source needs train, heldout and test paths");
    }
    auto load = [&](const std::string& path) {
      CsvSchema schema = cfg.csv.schema;
      if (schema.feature_columns.empty()) {
        // Take every column that is not the label or the attribute.
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open csv: " + path);
        std::string line;
        if (!std::getline(is, line)) throw std::runtime_error(path + ":1: missing header row");
        for (const std::string& col : detail::split_csv_line(line)) {
          if (col != schema.label_column && col != schema.attribute_column) {
            schema.feature_columns.push_back(col);
          }
        }
      }
      return load_csv(path, schema);
    };
    d.train = load(cfg.csv.train);
    d.heldout = load(cfg.csv.heldout);
    d.test = load(cfg.csv.test);
    return d;
  }
  // colored_mnist
  const RawImageSet train_raw = load_mnist_idx(cfg.mnist.train_images, cfg.mnist.train_labels);
  d.train = make_colored_mnist(train_raw, cfg.mnist.class_digits, cfg.mnist.train_counts,
                               cfg.mnist.flatten);
  const RawImageSet test_raw = load_mnist_idx(cfg.mnist.test_images, cfg.mnist.test_labels);
  const auto [held_raw, final_raw] =
      detail::split_raw_by_digit(test_raw, cfg.mnist.class_digits, cfg.mnist.heldout_fraction);
  auto digit_pool = [&](const RawImageSet& raw) {
    long n[2] = {0, 0};
    for (std::uint8_t l : raw.labels) {
      if (l == cfg.mnist.class_digits.first) ++n[0];
      if (l == cfg.mnist.class_digits.second) ++n[1];
    }
    return std::pair<long, long>(n[0], n[1]);
  };
  const auto [h0, h1] = digit_pool(held_raw);
  d.heldout = make_colored_mnist(held_raw, cfg.mnist.class_digits,
                                 detail::colored_counts(h0, h1, cfg.mnist.heldout_p_corr),
                                 cfg.mnist.flatten);
  const auto [t0, t1] = digit_pool(final_raw);
  d.test = make_colored_mnist(final_raw, cfg.mnist.class_digits,
                              detail::colored_counts(t0, t1, cfg.mnist.test_p_corr),
                              cfg.mnist.flatten);
  return d;
}

}  // namespace evalign
