#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "evalign/rng.hpp"

namespace evalign {

// In-memory table of examples. Attributes are optional; group ids exist only
// when they are present.
struct Dataset {
  int feature_dim = 0;
  int num_classes = 0;
  int num_attributes = 0;          // 0 when no attribute column
  std::vector<double> features;    // size() x feature_dim, row-major
  std::vector<int> labels;
  std::vector<int> attributes;     // empty when no attribute column

  std::size_t size() const { return labels.size(); }
  bool has_attributes() const { return num_attributes > 0; }

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * static_cast<std::size_t>(feature_dim),
            static_cast<std::size_t>(feature_dim)};
  }

  int group_id(std::size_t i) const { return labels[i] * num_attributes + attributes[i]; }
};

inline void validate(const Dataset& d) {
  if (d.size() == 0) throw std::invalid_argument("Dataset: empty");
  if (d.feature_dim < 1) throw std::invalid_argument("Dataset: feature_dim < 1");
  if (d.num_classes < 2) throw std::invalid_argument("Dataset: num_classes < 2");
  if (d.features.size() != d.size() * static_cast<std::size_t>(d.feature_dim)) {
    throw std::invalid_argument("Dataset: feature matrix shape mismatch");
  }
  if (d.has_attributes() && d.attributes.size() != d.size()) {
    throw std::invalid_argument("Dataset: attribute column length mismatch");
  }
  if (!d.has_attributes() && !d.attributes.empty()) {
    throw std::invalid_argument("Dataset: attributes present but num_attributes == 0");
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.labels[i] < 0 || d.labels[i] >= d.num_classes) {
      throw std::invalid_argument("Dataset: label out of range at row " + std::to_string(i));
    }
    if (d.has_attributes() && (d.attributes[i] < 0 || d.attributes[i] >= d.num_attributes)) {
      throw std::invalid_argument("Dataset: attribute out of range at row " +
                                  std::to_string(i));
    }
  }
  for (double v : d.features) {
    if (!std::isfinite(v)) throw std::invalid_argument("Dataset: non-finite feature");
  }
}

inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.feature_dim = d.feature_dim;
  out.num_classes = d.num_classes;
  out.num_attributes = d.num_attributes;
  out.features.reserve(idx.size() * static_cast<std::size_t>(d.feature_dim));
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) {
    if (i >= d.size()) throw std::invalid_argument("subset: index out of range");
    const auto r = d.row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(d.labels[i]);
    if (d.has_attributes()) out.attributes.push_back(d.attributes[i]);
  }
  return out;
}

inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.feature_dim != b.feature_dim || a.num_classes != b.num_classes ||
      a.num_attributes != b.num_attributes) {
    throw std::invalid_argument("concat: incompatible datasets");
  }
  Dataset out = a;
  out.features.insert(out.features.end(), b.features.begin(), b.features.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.attributes.insert(out.attributes.end(), b.attributes.begin(), b.attributes.end());
  return out;
}

// Per-group sample counts, rows indexed by label and columns by attribute.
using GroupCounts = std::vector<std::vector<long>>;

inline GroupCounts group_counts(const Dataset& d) {
  if (!d.has_attributes()) throw std::invalid_argument("group_counts: no attributes");
  GroupCounts c(d.num_classes, std::vector<long>(d.num_attributes, 0));
  for (std::size_t i = 0; i < d.size(); ++i) ++c[d.labels[i]][d.attributes[i]];
  return c;
}

// Binary classification task with a spurious attribute: class means sit at
// +/- core_separation along axis 0, the attribute shifts them by
// +/- spurious_separation along axis 1, isotropic Gaussian noise on top.
struct SpuriousSpec {
  GroupCounts counts;              // 2x2, counts[y][a]
  int dim = 10;
  double core_separation = 1.0;
  double spurious_separation = 1.5;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;
};

inline void validate(const SpuriousSpec& s) {
  if (s.dim < 2) throw std::invalid_argument("SpuriousSpec: dim must be >= 2");
  if (!(s.noise_sigma > 0.0)) throw std::invalid_argument("SpuriousSpec: noise_sigma <= 0");
  if (!(s.core_separation > 0.0) || !(s.spurious_separation >= 0.0)) {
    throw std::invalid_argument("SpuriousSpec: separations must be positive");
  }
  if (s.counts.size() != 2 || s.counts[0].size() != 2 || s.counts[1].size() != 2) {
    throw std::invalid_argument("SpuriousSpec: counts must be 2x2");
  }
  long total = 0;
  for (const auto& row : s.counts) {
    for (long n : row) {
      if (n < 0) throw std::invalid_argument("SpuriousSpec: negative group count");
      total += n;
    }
  }
  if (total == 0) throw std::invalid_argument("SpuriousSpec: all group counts are zero");
}

inline Dataset generate_synthetic(const SpuriousSpec& s) {
  validate(s);
  Dataset d;
  d.feature_dim = s.dim;
  d.num_classes = 2;
  d.num_attributes = 2;
  Rng rng(mix_seed(s.seed, rng_stream::kSynthetic));
  for (int y = 0; y < 2; ++y) {
    for (int a = 0; a < 2; ++a) {
      const double mu0 = (2 * y - 1) * s.core_separation;
      const double mu1 = (2 * a - 1) * s.spurious_separation;
      for (long n = 0; n < s.counts[y][a]; ++n) {
        for (int j = 0; j < s.dim; ++j) {
          double v = s.noise_sigma * rng.gaussian();
          if (j == 0) v += mu0;
          if (j == 1) v += mu1;
          d.features.push_back(v);
        }
        d.labels.push_back(y);
        d.attributes.push_back(a);
      }
    }
  }
  return d;
}

// Column layout of a CSV file. num_classes/num_attributes of 0 mean "infer
// from the data as max value + 1".
struct CsvSchema {
  std::vector<std::string> feature_columns;
  std::string label_column = "label";
  std::string attribute_column = "attribute";  // empty = no attribute column
  int num_classes = 0;
  int num_attributes = 0;
};

inline CsvSchema default_schema(int feature_dim, bool with_attribute = true) {
  CsvSchema s;
  s.feature_columns.reserve(feature_dim);
  for (int i = 0; i < feature_dim; ++i) s.feature_columns.push_back("f" + std::to_string(i));
  if (!with_attribute) s.attribute_column.clear();
  return s;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double_field(const std::string& s, const std::string& path,
                                 std::size_t line_no, const std::string& col) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || !std::isfinite(v)) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": column '" + col +
                             "': bad numeric value '" + s + "'");
  }
  return v;
}

inline int parse_int_field(const std::string& s, const std::string& path,
                           std::size_t line_no, const std::string& col) {
  std::size_t pos = 0;
  int v = 0;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty() || v < 0) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": column '" + col +
                             "': bad non-negative integer '" + s + "'");
  }
  return v;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  if (schema.feature_columns.empty()) {
    throw std::invalid_argument("load_csv: schema declares no feature columns");
  }
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open csv: " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ":1: missing header row");
  const std::vector<std::string> header = detail::split_csv_line(line);
  auto col_index = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw std::runtime_error(path + ":1: missing declared column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> feat_idx;
  feat_idx.reserve(schema.feature_columns.size());
  for (const std::string& c : schema.feature_columns) feat_idx.push_back(col_index(c));
  const std::size_t label_idx = col_index(schema.label_column);
  const bool with_attr = !schema.attribute_column.empty();
  const std::size_t attr_idx = with_attr ? col_index(schema.attribute_column) : 0;

  Dataset d;
  d.feature_dim = static_cast<int>(schema.feature_columns.size());
  std::size_t line_no = 1;
  int max_label = -1, max_attr = -1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < feat_idx.size(); ++j) {
      d.features.push_back(detail::parse_double_field(fields[feat_idx[j]], path, line_no,
                                                      schema.feature_columns[j]));
    }
    const int y = detail::parse_int_field(fields[label_idx], path, line_no, schema.label_column);
    if (schema.num_classes > 0 && y >= schema.num_classes) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": label " +
                               std::to_string(y) + " outside declared range [0, " +
                               std::to_string(schema.num_classes) + ")");
    }
    d.labels.push_back(y);
    max_label = std::max(max_label, y);
    if (with_attr) {
      const int a =
          detail::parse_int_field(fields[attr_idx], path, line_no, schema.attribute_column);
      if (schema.num_attributes > 0 && a >= schema.num_attributes) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": attribute " +
                                 std::to_string(a) + " outside declared range [0, " +
                                 std::to_string(schema.num_attributes) + ")");
      }
      d.attributes.push_back(a);
      max_attr = std::max(max_attr, a);
    }
  }
  if (d.labels.empty()) throw std::runtime_error(path + ": no data rows");
  d.num_classes = schema.num_classes > 0 ? schema.num_classes : max_label + 1;
  d.num_attributes = with_attr ? (schema.num_attributes > 0 ? schema.num_attributes : max_attr + 1)
                               : 0;
  validate(d);
  return d;
}

inline void save_csv(const Dataset& d, const std::string& path) {
  validate(d);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open csv for writing: " + path);
  for (int j = 0; j < d.feature_dim; ++j) os << 'f' << j << ',';
  os << "label";
  if (d.has_attributes()) os << ",attribute";
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = d.row(i);
    for (double v : r) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      os << buf << ',';
    }
    os << d.labels[i];
    if (d.has_attributes()) os << ',' << d.attributes[i];
    os << '\n';
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

// Raw image set in the IDX container format (magic 2051 for images, 2049 for
// labels, big-endian dimensions, one byte per pixel/label).
struct RawImageSet {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> pixels;  // size() * rows * cols
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }

  std::span<const std::uint8_t> image(std::size_t i) const {
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    return {pixels.data() + i * n, n};
  }
};

namespace detail {

inline std::uint32_t read_u32_be(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error(path + ": truncated header");
  }
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

inline RawImageSet load_mnist_idx(const std::string& images_path,
                                  const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("cannot open idx image file: " + images_path);
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error("cannot open idx label file: " + labels_path);

  const std::uint32_t img_magic = detail::read_u32_be(imgs, images_path);
  if (img_magic != 2051) {
    throw std::runtime_error(images_path + ": bad image magic " + std::to_string(img_magic) +
                             ", expected 2051");
  }
  const std::uint32_t n_imgs = detail::read_u32_be(imgs, images_path);
  const std::uint32_t rows = detail::read_u32_be(imgs, images_path);
  const std::uint32_t cols = detail::read_u32_be(imgs, images_path);

  const std::uint32_t lab_magic = detail::read_u32_be(labs, labels_path);
  if (lab_magic != 2049) {
    throw std::runtime_error(labels_path + ": bad label magic " + std::to_string(lab_magic) +
                             ", expected 2049");
  }
  const std::uint32_t n_labs = detail::read_u32_be(labs, labels_path);
  if (n_imgs != n_labs) {
    throw std::runtime_error("idx count mismatch: " + std::to_string(n_imgs) + " images vs " +
                             std::to_string(n_labs) + " labels");
  }

  RawImageSet set;
  set.rows = static_cast<int>(rows);
  set.cols = static_cast<int>(cols);
  set.pixels.resize(static_cast<std::size_t>(n_imgs) * rows * cols);
  set.labels.resize(n_labs);
  if (!imgs.read(reinterpret_cast<char*>(set.pixels.data()),
                 static_cast<std::streamsize>(set.pixels.size()))) {
    throw std::runtime_error(images_path + ": truncated pixel data");
  }
  if (!labs.read(reinterpret_cast<char*>(set.labels.data()),
                 static_cast<std::streamsize>(set.labels.size()))) {
    throw std::runtime_error(labels_path + ": truncated label data");
  }
  return set;
}

inline void save_mnist_idx(const RawImageSet& set, const std::string& images_path,
                           const std::string& labels_path) {
  if (set.pixels.size() != set.size() * static_cast<std::size_t>(set.rows) * set.cols) {
    throw std::invalid_argument("save_mnist_idx: pixel buffer shape mismatch");
  }
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("cannot open idx image file for writing: " + images_path);
  detail::write_u32_be(imgs, 2051);
  detail::write_u32_be(imgs, static_cast<std::uint32_t>(set.size()));
  detail::write_u32_be(imgs, static_cast<std::uint32_t>(set.rows));
  detail::write_u32_be(imgs, static_cast<std::uint32_t>(set.cols));
  imgs.write(reinterpret_cast<const char*>(set.pixels.data()),
             static_cast<std::streamsize>(set.pixels.size()));
  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error("cannot open idx label file for writing: " + labels_path);
  detail::write_u32_be(labs, 2049);
  detail::write_u32_be(labs, static_cast<std::uint32_t>(set.size()));
  labs.write(reinterpret_cast<const char*>(set.labels.data()),
             static_cast<std::streamsize>(set.labels.size()));
  if (!imgs || !labs) throw std::runtime_error("idx write failed");
}

// Two-channel colored digits task. Digit class_digits.first becomes class 0,
// class_digits.second class 1; the color (attribute) is channel 0 or 1. The
// i-th kept image of a class gets its color by proportional interleaving, so
// the assignment is deterministic without an RNG. flatten picks the feature
// layout: true gives the two 28x28 channel planes back to back, false
// interleaves the two channel values per pixel. Pixels are scaled to [0, 1].
inline Dataset make_colored_mnist(const RawImageSet& raw, std::pair<int, int> class_digits,
                                  const GroupCounts& counts, bool flatten = true) {
  if (class_digits.first == class_digits.second) {
    throw std::invalid_argument("make_colored_mnist: class digits must differ");
  }
  if (counts.size() != 2 || counts[0].size() != 2 || counts[1].size() != 2) {
    throw std::invalid_argument("make_colored_mnist: counts must be 2x2");
  }
  const int digits[2] = {class_digits.first, class_digits.second};
  for (int d : digits) {
    if (d < 0 || d > 9) throw std::invalid_argument("make_colored_mnist: digit out of range");
  }
  const std::size_t plane = static_cast<std::size_t>(raw.rows) * raw.cols;

  Dataset out;
  out.feature_dim = static_cast<int>(2 * plane);
  out.num_classes = 2;
  out.num_attributes = 2;
  for (int cls = 0; cls < 2; ++cls) {
    const long want0 = counts[cls][0];
    const long want1 = counts[cls][1];
    const long want = want0 + want1;
    long taken = 0, taken0 = 0;
    for (std::size_t i = 0; i < raw.size() && taken < want; ++i) {
      if (raw.labels[i] != digits[cls]) continue;
      // Proportional interleave: emit color 0 whenever its running share
      // would otherwise fall behind want0 / want.
      const int color = ((taken + 1) * want0 / want > taken0) ? 0 : 1;
      taken0 += (color == 0);
      ++taken;
      const auto img = raw.image(i);
      const std::size_t base = out.features.size();
      out.features.resize(base + 2 * plane, 0.0);
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = static_cast<double>(img[p]) / 255.0;
        if (flatten) {
          out.features[base + static_cast<std::size_t>(color) * plane + p] = v;
        } else {
          out.features[base + 2 * p + static_cast<std::size_t>(color)] = v;
        }
      }
      out.labels.push_back(cls);
      out.attributes.push_back(color);
    }
    if (taken < want) {
      throw std::runtime_error("make_colored_mnist: need " + std::to_string(want) +
                               " images of digit " + std::to_string(digits[cls]) +
                               ", file has " + std::to_string(taken));
    }
  }
  return out;
}

// Seeded shuffle, then floor(fraction * N) rows to the first part. Both parts
// must end up non-empty.
inline std::pair<Dataset, Dataset> split_calibration(const Dataset& d, double fraction,
                                                     std::uint64_t seed) {
  validate(d);
  if (!(fraction > 0.0) || !(fraction < 1.0)) {
    throw std::invalid_argument("split_calibration: fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(mix_seed(seed, rng_stream::kCalibSplit));
  rng.shuffle(idx);
  const std::size_t n_first =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(d.size())));
  if (n_first == 0 || n_first == d.size()) {
    throw std::invalid_argument("split_calibration: a split would be empty (N = " +
                                std::to_string(d.size()) + ", fraction = " +
                                std::to_string(fraction) + ")");
  }
  const std::vector<std::size_t> first(idx.begin(), idx.begin() + n_first);
  const std::vector<std::size_t> second(idx.begin() + n_first, idx.end());
  return {subset(d, first), subset(d, second)};
}

}  // namespace evalign
