#include "evalign/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace {

using evalign::CsvSchema;
using evalign::Dataset;
using evalign::GroupCounts;
using evalign::RawImageSet;
using evalign::SpuriousSpec;

SpuriousSpec small_spec() {
  SpuriousSpec s;
  s.counts = {{500, 50}, {50, 500}};
  s.seed = 3;
  return s;
}

double column_mean(const Dataset& d, int col, int label, int attr) {
  double acc = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if ((label < 0 || d.labels[i] == label) && (attr < 0 || d.attributes[i] == attr)) {
      acc += d.row(i)[col];
      ++n;
    }
  }
  return acc / static_cast<double>(n);
}

TEST(GenerateSynthetic, HonorsGroupCountsExactly) {
  const Dataset d = evalign::generate_synthetic(small_spec());
  EXPECT_EQ(d.size(), 1100u);
  const GroupCounts c = evalign::group_counts(d);
  EXPECT_EQ(c[0][0], 500);
  EXPECT_EQ(c[0][1], 50);
  EXPECT_EQ(c[1][0], 50);
  EXPECT_EQ(c[1][1], 500);
}

TEST(GenerateSynthetic, GroupMeansSeparate) {
  const Dataset d = evalign::generate_synthetic(small_spec());
  // Class drives axis 0 (difference 2 * core_separation), attribute axis 1.
  const double m0 = column_mean(d, 0, 0, -1);
  const double m1 = column_mean(d, 0, 1, -1);
  EXPECT_NEAR(m1 - m0, 2.0, 0.15);
  const double a0 = column_mean(d, 1, -1, 0);
  const double a1 = column_mean(d, 1, -1, 1);
  EXPECT_NEAR(a1 - a0, 3.0, 0.15);
  // t-statistic along the core axis is far from noise at default separations.
  const double pooled_se = 0.5 * std::sqrt(2.0 / 550.0);
  EXPECT_GT((m1 - m0) / pooled_se, 10.0);
}

TEST(GenerateSynthetic, SingletonGroups) {
  SpuriousSpec s = small_spec();
  s.counts = {{1, 1}, {1, 1}};
  const Dataset d = evalign::generate_synthetic(s);
  EXPECT_EQ(d.size(), 4u);
  const GroupCounts c = evalign::group_counts(d);
  for (const auto& row : c) {
    for (long n : row) EXPECT_EQ(n, 1);
  }
}

TEST(GenerateSynthetic, DeterministicPerSeed) {
  const Dataset a = evalign::generate_synthetic(small_spec());
  const Dataset b = evalign::generate_synthetic(small_spec());
  EXPECT_EQ(a.features, b.features);
  SpuriousSpec other = small_spec();
  other.seed = 4;
  EXPECT_NE(evalign::generate_synthetic(other).features, a.features);
}

TEST(GenerateSynthetic, Validation) {
  SpuriousSpec s = small_spec();
  s.dim = 1;
  EXPECT_THROW(evalign::generate_synthetic(s), std::invalid_argument);
  s = small_spec();
  s.counts = {{0, 0}, {0, 0}};
  EXPECT_THROW(evalign::generate_synthetic(s), std::invalid_argument);
  s = small_spec();
  s.counts[1][0] = -5;
  EXPECT_THROW(evalign::generate_synthetic(s), std::invalid_argument);
}

TEST(Csv, SaveLoadRoundTripExact) {
  SpuriousSpec s = small_spec();
  s.counts = {{20, 5}, {5, 20}};
  const Dataset d = evalign::generate_synthetic(s);
  const oracle::TempDir tmp;
  evalign::save_csv(d, tmp.file("data.csv"));
  const Dataset r = evalign::load_csv(tmp.file("data.csv"), evalign::default_schema(d.feature_dim));
  EXPECT_EQ(r.features, d.features);  // %.17g round-trips doubles exactly
  EXPECT_EQ(r.labels, d.labels);
  EXPECT_EQ(r.attributes, d.attributes);
  EXPECT_EQ(r.num_classes, 2);
  EXPECT_EQ(r.num_attributes, 2);
}

TEST(Csv, RoundTripWithoutAttributes) {
  Dataset d;
  d.feature_dim = 2;
  d.num_classes = 2;
  d.features = {0.25, -1.5, 3.0, 0.125};
  d.labels = {0, 1};
  const oracle::TempDir tmp;
  evalign::save_csv(d, tmp.file("na.csv"));
  const Dataset r = evalign::load_csv(tmp.file("na.csv"), evalign::default_schema(2, false));
  EXPECT_EQ(r.features, d.features);
  EXPECT_FALSE(r.has_attributes());
}

TEST(Csv, WellFormedThreeRows) {
  const oracle::TempDir tmp;
  std::ofstream(tmp.file("t.csv")) << "f0,f1,label,attribute\n"
                                      "0.5,1.0,0,0\n"
                                      "1.5,-2.0,1,1\n"
                                      "-0.25,0.75,0,1\n";
  const Dataset d = evalign::load_csv(tmp.file("t.csv"), evalign::default_schema(2));
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1, 0}));
  EXPECT_EQ(d.row(1)[1], -2.0);
}

TEST(Csv, HeaderOnlyIsError) {
  const oracle::TempDir tmp;
  std::ofstream(tmp.file("h.csv")) << "f0,f1,label,attribute\n";
  try {
    evalign::load_csv(tmp.file("h.csv"), evalign::default_schema(2));
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("no data rows"), std::string::npos);
  }
}

TEST(Csv, LabelOutOfDeclaredRangeNamesLine) {
  const oracle::TempDir tmp;
  std::ofstream(tmp.file("l.csv")) << "f0,label\n0.5,0\n0.25,7\n";
  CsvSchema schema = evalign::default_schema(1, false);
  schema.num_classes = 2;
  try {
    evalign::load_csv(tmp.file("l.csv"), schema);
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":3:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("7"), std::string::npos) << msg;
  }
}

TEST(Csv, BadFeatureNamesLineAndColumn) {
  const oracle::TempDir tmp;
  std::ofstream(tmp.file("b.csv")) << "f0,f1,label\n0.5,oops,0\n";
  try {
    evalign::load_csv(tmp.file("b.csv"), evalign::default_schema(2, false));
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("f1"), std::string::npos) << msg;
  }
}

TEST(Csv, MissingDeclaredColumn) {
  const oracle::TempDir tmp;
  std::ofstream(tmp.file("m.csv")) << "f0,label\n0.5,0\n";
  try {
    evalign::load_csv(tmp.file("m.csv"), evalign::default_schema(2, false));
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("f1"), std::string::npos);
  }
}

RawImageSet tiny_raw(int n, int rows, int cols, std::uint64_t seed) {
  RawImageSet set;
  set.rows = rows;
  set.cols = cols;
  std::mt19937_64 eng(seed);
  set.pixels.resize(static_cast<std::size_t>(n) * rows * cols);
  for (auto& p : set.pixels) p = static_cast<std::uint8_t>(eng() % 256);
  set.labels.resize(n);
  for (auto& l : set.labels) l = static_cast<std::uint8_t>(eng() % 10);
  return set;
}

TEST(Idx, SaveLoadRoundTripBytes) {
  const RawImageSet set = tiny_raw(12, 5, 4, 77);
  const oracle::TempDir tmp;
  evalign::save_mnist_idx(set, tmp.file("im"), tmp.file("lb"));
  const RawImageSet r = evalign::load_mnist_idx(tmp.file("im"), tmp.file("lb"));
  EXPECT_EQ(r.rows, 5);
  EXPECT_EQ(r.cols, 4);
  EXPECT_EQ(r.pixels, set.pixels);
  EXPECT_EQ(r.labels, set.labels);
  // Writing the loaded set back out reproduces the files byte for byte.
  evalign::save_mnist_idx(r, tmp.file("im2"), tmp.file("lb2"));
  EXPECT_EQ(oracle::read_file(tmp.file("im2")), oracle::read_file(tmp.file("im")));
  EXPECT_EQ(oracle::read_file(tmp.file("lb2")), oracle::read_file(tmp.file("lb")));
}

TEST(Idx, FormatErrors) {
  const oracle::TempDir tmp;
  const RawImageSet set = tiny_raw(3, 4, 4, 5);
  evalign::save_mnist_idx(set, tmp.file("im"), tmp.file("lb"));

  // Bad magic in the image file.
  std::string bytes = oracle::read_file(tmp.file("im"));
  bytes[3] = 0x42;
  std::ofstream(tmp.file("badmagic"), std::ios::binary) << bytes;
  EXPECT_THROW(evalign::load_mnist_idx(tmp.file("badmagic"), tmp.file("lb")),
               std::runtime_error);

  // Truncated pixel payload.
  const std::string good = oracle::read_file(tmp.file("im"));
  std::ofstream(tmp.file("trunc"), std::ios::binary) << good.substr(0, good.size() - 7);
  EXPECT_THROW(evalign::load_mnist_idx(tmp.file("trunc"), tmp.file("lb")), std::runtime_error);

  // Count mismatch between image and label files.
  const RawImageSet bigger = tiny_raw(4, 4, 4, 6);
  evalign::save_mnist_idx(bigger, tmp.file("im4"), tmp.file("lb4"));
  EXPECT_THROW(evalign::load_mnist_idx(tmp.file("im"), tmp.file("lb4")), std::runtime_error);
}

// Raw set with the requested number of images per digit 1 and 8, interleaved.
RawImageSet digit_raw(int n1, int n8, std::uint64_t seed) {
  RawImageSet set = tiny_raw(n1 + n8, 28, 28, seed);
  int have1 = 0;
  int have8 = 0;
  for (int i = 0; i < n1 + n8; ++i) {
    const bool pick1 = have1 < n1 && (have8 >= n8 || i % 2 == 0);
    set.labels[i] = pick1 ? (++have1, 1) : (++have8, 8);
  }
  return set;
}

TEST(ColoredMnist, CountsChannelsAndNormalization) {
  const RawImageSet raw = digit_raw(10, 10, 9);
  const GroupCounts counts = {{3, 1}, {2, 5}};
  const Dataset d = evalign::make_colored_mnist(raw, {1, 8}, counts, true);
  EXPECT_EQ(d.size(), 11u);
  EXPECT_EQ(d.feature_dim, 2 * 28 * 28);
  const GroupCounts got = evalign::group_counts(d);
  EXPECT_EQ(got, counts);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = d.row(i);
    const int active = d.attributes[i];
    double active_sum = 0.0;
    for (int p = 0; p < 784; ++p) {
      const double on = r[static_cast<std::size_t>(active) * 784 + p];
      const double off = r[static_cast<std::size_t>(1 - active) * 784 + p];
      EXPECT_EQ(off, 0.0);
      EXPECT_GE(on, 0.0);
      EXPECT_LE(on, 1.0);
      active_sum += on;
    }
    EXPECT_GT(active_sum, 0.0);
  }
}

TEST(ColoredMnist, InterleavedLayout) {
  const RawImageSet raw = digit_raw(4, 4, 10);
  const Dataset d = evalign::make_colored_mnist(raw, {1, 8}, {{1, 1}, {1, 1}}, false);
  EXPECT_EQ(d.size(), 4u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = d.row(i);
    const int active = d.attributes[i];
    for (int p = 0; p < 784; ++p) EXPECT_EQ(r[2 * p + (1 - active)], 0.0);
  }
}

TEST(ColoredMnist, SingletonSanity) {
  const RawImageSet raw = digit_raw(2, 2, 11);
  const Dataset d = evalign::make_colored_mnist(raw, {1, 8}, {{1, 1}, {1, 1}});
  EXPECT_EQ(d.size(), 4u);
  const GroupCounts c = evalign::group_counts(d);
  for (const auto& row : c) {
    for (long n : row) EXPECT_EQ(n, 1);
  }
}

TEST(ColoredMnist, InsufficientImagesError) {
  const RawImageSet raw = digit_raw(2, 8, 12);
  try {
    evalign::make_colored_mnist(raw, {1, 8}, {{5, 0}, {0, 5}});
    FAIL() << "expected error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("digit 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("5"), std::string::npos) << msg;
  }
  EXPECT_THROW(evalign::make_colored_mnist(raw, {1, 1}, {{1, 1}, {1, 1}}),
               std::invalid_argument);
}

TEST(SplitCalibration, SizesAndPartition) {
  SpuriousSpec s = small_spec();
  s.counts = {{30, 20}, {25, 25}};
  const Dataset d = evalign::generate_synthetic(s);
  const auto [calib, sel] = evalign::split_calibration(d, 0.5, 1);
  EXPECT_EQ(calib.size(), 50u);
  EXPECT_EQ(sel.size(), 50u);

  // Parts are disjoint and exhaustive: multiset of first-feature values matches.
  std::vector<double> all(d.features.begin(), d.features.end());
  std::vector<double> parts(calib.features.begin(), calib.features.end());
  parts.insert(parts.end(), sel.features.begin(), sel.features.end());
  std::sort(all.begin(), all.end());
  std::sort(parts.begin(), parts.end());
  EXPECT_EQ(all, parts);
}

TEST(SplitCalibration, FloorRoundingAndDeterminism) {
  SpuriousSpec s = small_spec();
  s.counts = {{26, 25}, {25, 25}};  // N = 101
  const Dataset d = evalign::generate_synthetic(s);
  const auto [calib, sel] = evalign::split_calibration(d, 0.5, 9);
  EXPECT_EQ(calib.size(), 50u);
  EXPECT_EQ(sel.size(), 51u);
  const auto [calib2, sel2] = evalign::split_calibration(d, 0.5, 9);
  EXPECT_EQ(calib.features, calib2.features);
  EXPECT_EQ(sel.labels, sel2.labels);
}

TEST(SplitCalibration, Validation) {
  SpuriousSpec s = small_spec();
  s.counts = {{1, 0}, {0, 0}};
  const Dataset one = evalign::generate_synthetic(s);
  EXPECT_THROW(evalign::split_calibration(one, 0.5, 1), std::invalid_argument);
  s.counts = {{5, 5}, {5, 5}};
  const Dataset d = evalign::generate_synthetic(s);
  EXPECT_THROW(evalign::split_calibration(d, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(evalign::split_calibration(d, 1.0, 1), std::invalid_argument);
}

TEST(DatasetValidation, CatchesCorruption) {
  SpuriousSpec s = small_spec();
  s.counts = {{3, 3}, {3, 3}};
  Dataset d = evalign::generate_synthetic(s);
  evalign::validate(d);
  Dataset bad = d;
  bad.labels[0] = 9;
  EXPECT_THROW(evalign::validate(bad), std::invalid_argument);
  bad = d;
  bad.features[1] = std::nan("");
  EXPECT_THROW(evalign::validate(bad), std::invalid_argument);
  bad = d;
  bad.features.pop_back();
  EXPECT_THROW(evalign::validate(bad), std::invalid_argument);
}

}  // namespace
