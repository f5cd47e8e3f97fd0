#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "evalign/data.hpp"
#include "evalign/model.hpp"

namespace evalign {

// Accuracy breakdown of a classifier on a labeled dataset. Group-level fields
// are only meaningful when the dataset carries attributes.
struct GroupMetrics {
  double average_acc = 0.0;
  double worst_class_acc = 0.0;
  std::map<int, double> per_class_acc;
  bool has_group_metrics = false;
  double worst_group_acc = std::numeric_limits<double>::quiet_NaN();
  double accuracy_gap = std::numeric_limits<double>::quiet_NaN();
  std::map<std::pair<int, int>, double> per_group_acc;   // (label, attribute) -> acc
  std::vector<std::pair<int, int>> skipped_groups;       // declared but empty groups
};

inline GroupMetrics evaluate(const EvidentialHead& h, const Dataset& d) {
  validate(h);
  validate(d);
  if (h.feature_dim != d.feature_dim) {
    throw std::invalid_argument("evaluate: head expects feature_dim " +
                                std::to_string(h.feature_dim) + ", dataset has " +
                                std::to_string(d.feature_dim));
  }
  if (h.num_classes != d.num_classes) {
    throw std::invalid_argument("evaluate: head expects num_classes " +
                                std::to_string(h.num_classes) + ", dataset has " +
                                std::to_string(d.num_classes));
  }
  std::vector<long> class_total(d.num_classes, 0), class_hit(d.num_classes, 0);
  std::map<std::pair<int, int>, std::pair<long, long>> group_tally;  // (total, hits)
  long hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const DirichletOutput out = forward(h, d.row(i));
    const bool correct = out.predicted_class == d.labels[i];
    hits += correct;
    ++class_total[d.labels[i]];
    class_hit[d.labels[i]] += correct;
    if (d.has_attributes()) {
      auto& t = group_tally[{d.labels[i], d.attributes[i]}];
      ++t.first;
      t.second += correct;
    }
  }
  GroupMetrics m;
  m.average_acc = static_cast<double>(hits) / static_cast<double>(d.size());
  m.worst_class_acc = 1.0;
  for (int c = 0; c < d.num_classes; ++c) {
    if (class_total[c] == 0) continue;  // declared class absent from this split
    const double acc = static_cast<double>(class_hit[c]) / static_cast<double>(class_total[c]);
    m.per_class_acc[c] = acc;
    m.worst_class_acc = std::min(m.worst_class_acc, acc);
  }
  if (d.has_attributes()) {
    m.has_group_metrics = true;
    m.worst_group_acc = 1.0;
    for (const auto& [g, t] : group_tally) {
      const double acc = static_cast<double>(t.second) / static_cast<double>(t.first);
      m.per_group_acc[g] = acc;
      m.worst_group_acc = std::min(m.worst_group_acc, acc);
    }
    for (int y = 0; y < d.num_classes; ++y) {
      for (int a = 0; a < d.num_attributes; ++a) {
        if (!group_tally.count({y, a})) m.skipped_groups.emplace_back(y, a);
      }
    }
    m.accuracy_gap = m.average_acc - m.worst_group_acc;
  }
  return m;
}

enum class ReportFormat { json, table };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "table") return ReportFormat::table;
  throw std::invalid_argument("unknown report format '" + s + "' (json, table)");
}

namespace detail {

inline std::string group_key(const std::pair<int, int>& g) {
  return std::to_string(g.first) + "," + std::to_string(g.second);
}

inline std::pair<int, int> parse_group_key(const std::string& s) {
  const std::size_t comma = s.find(',');
  if (comma == std::string::npos) throw std::runtime_error("bad group key '" + s + "'");
  return {std::stoi(s.substr(0, comma)), std::stoi(s.substr(comma + 1))};
}

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

}  // namespace detail

inline nlohmann::json metrics_to_json(const GroupMetrics& m) {
  nlohmann::json j;
  j["average_acc"] = m.average_acc;
  j["worst_class_acc"] = m.worst_class_acc;
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, acc] : m.per_class_acc) per_class[std::to_string(c)] = acc;
  j["per_class"] = per_class;
  if (m.has_group_metrics) {
    j["worst_group_acc"] = m.worst_group_acc;
    j["accuracy_gap"] = m.accuracy_gap;
    nlohmann::json per_group = nlohmann::json::object();
    for (const auto& [g, acc] : m.per_group_acc) per_group[detail::group_key(g)] = acc;
    j["per_group"] = per_group;
    nlohmann::json skipped = nlohmann::json::array();
    for (const auto& g : m.skipped_groups) skipped.push_back(detail::group_key(g));
    j["skipped_groups"] = skipped;
  } else {
    j["worst_group_acc"] = nullptr;
    j["accuracy_gap"] = nullptr;
    j["per_group"] = nullptr;
    j["skipped_groups"] = nlohmann::json::array();
  }
  return j;
}

inline GroupMetrics metrics_from_json(const nlohmann::json& j) {
  GroupMetrics m;
  m.average_acc = j.at("average_acc").get<double>();
  m.worst_class_acc = j.at("worst_class_acc").get<double>();
  for (const auto& [key, val] : j.at("per_class").items()) {
    m.per_class_acc[std::stoi(key)] = val.get<double>();
  }
  if (!j.at("worst_group_acc").is_null()) {
    m.has_group_metrics = true;
    m.worst_group_acc = j.at("worst_group_acc").get<double>();
    m.accuracy_gap = j.at("accuracy_gap").get<double>();
    for (const auto& [key, val] : j.at("per_group").items()) {
      m.per_group_acc[detail::parse_group_key(key)] = val.get<double>();
    }
    for (const auto& s : j.at("skipped_groups")) {
      m.skipped_groups.push_back(detail::parse_group_key(s.get<std::string>()));
    }
  }
  return m;
}

// json: stable machine-readable schema (keys sorted, exact doubles).
// table: human-readable percentages with one row per group.
inline std::string report(const GroupMetrics& m, ReportFormat fmt) {
  if (fmt == ReportFormat::json) return metrics_to_json(m).dump(2) + "\n";
  std::ostringstream os;
  os << "Average accuracy:      " << detail::pct(m.average_acc) << "%\n";
  os << "Worst-class accuracy:  " << detail::pct(m.worst_class_acc) << "%\n";
  if (m.has_group_metrics) {
    os << "Worst-group accuracy:  " << detail::pct(m.worst_group_acc) << "%\n";
    os << "Accuracy gap:          " << detail::pct(m.accuracy_gap) << "%\n";
    for (const auto& [g, acc] : m.per_group_acc) {
      os << "  Class " << g.first << ", Color " << g.second << ": " << detail::pct(acc)
         << "%\n";
    }
    for (const auto& g : m.skipped_groups) {
      os << "  Class " << g.first << ", Color " << g.second << ": no samples\n";
    }
  }
  return os.str();
}

}  // namespace evalign
