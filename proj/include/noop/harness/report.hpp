#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "noop/harness/runner.hpp"
#include "noop/harness/text.hpp"

namespace noop::harness {

struct MethodSummary {
  std::string method;
  std::map<std::uint64_t, double> accuracy;  // per seed
  double mean = 0;
  double std = 0;  // population standard deviation over seeds
  double train_seconds = 0;  // mean over seeds of summed train timings
  double eval_seconds = 0;
};

/// Per-image rows of metrics.csv grouped by method and seed.
struct ScoreTable {
  struct Row {
    std::string stage, method;
    std::uint64_t seed = 0;
    std::size_t t = 0, image_id = 0, true_label = 0, pred_label = 0;
    std::vector<double> d;
  };
  std::vector<Row> rows;

  /// Fraction of correct rows for (method, seed); nullopt if absent.
  std::optional<double> accuracy(const std::string& method, std::uint64_t seed) const {
    std::size_t n = 0, hit = 0;
    for (const auto& r : rows) {
      if (r.method != method || r.seed != seed) continue;
      ++n;
      hit += r.pred_label == r.true_label;
    }
    if (n == 0) return std::nullopt;
    return static_cast<double>(hit) / static_cast<double>(n);
  }

  std::map<std::uint64_t, double> accuracy_by_seed(const std::string& method) const {
    std::map<std::uint64_t, std::pair<std::size_t, std::size_t>> c;
    for (const auto& r : rows) {
      if (r.method != method) continue;
      auto& [n, hit] = c[r.seed];
      ++n;
      hit += r.pred_label == r.true_label;
    }
    std::map<std::uint64_t, double> out;
    for (const auto& [s, nh] : c) out[s] = static_cast<double>(nh.second) / static_cast<double>(nh.first);
    return out;
  }

  std::vector<std::string> methods() const {
    std::vector<std::string> m;
    for (const auto& r : rows)
      if (std::find(m.begin(), m.end(), r.method) == m.end()) m.push_back(r.method);
    return m;
  }
};

inline ScoreTable read_metrics(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifact("no " + path.string() + "; run at least one evaluation stage");
  const auto csv = read_csv(path.string());
  if (csv.empty() || csv[0].size() < 10 || csv[0][0] != "run") {
    throw std::runtime_error(path.string() + " is not a metrics table");
  }
  ScoreTable tab;
  for (std::size_t i = 1; i < csv.size(); ++i) {
    const auto& f = csv[i];
    if (f.size() != csv[0].size()) throw std::runtime_error(path.string() + ": ragged row " + std::to_string(i));
    ScoreTable::Row r;
    r.stage = f[1];
    r.method = f[2];
    r.seed = parse_number<std::uint64_t>(f[3], "seed");
    r.t = parse_number<std::size_t>(f[5], "t");
    r.image_id = parse_number<std::size_t>(f[6], "image_id");
    r.true_label = parse_number<std::size_t>(f[7], "true_label");
    r.pred_label = parse_number<std::size_t>(f[8], "pred_label");
    for (std::size_t k = 9; k < f.size(); ++k) r.d.push_back(parse_number<double>(f[k], "distance"));
    tab.rows.push_back(std::move(r));
  }
  return tab;
}

/// The compared methods first, then every other method in name order.
inline std::vector<std::string> report_order(const std::vector<std::string>& present) {
  std::vector<std::string> main{"zero-shot"};
  for (const auto& m : present)
    if (m.rfind("ensemble-", 0) == 0) main.push_back(m);
  for (const char* m : {"timestep-ensemble", "noop", "prompt", "noop+prompt", "transfer"}) main.push_back(m);
  std::vector<std::string> out, rest;
  for (const auto& m : main)
    if (std::find(present.begin(), present.end(), m) != present.end()) out.push_back(m);
  for (const auto& m : present)
    if (std::find(out.begin(), out.end(), m) == out.end()) rest.push_back(m);
  std::sort(rest.begin(), rest.end());
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

inline std::vector<MethodSummary> summarize(const RunArtifacts& a) {
  const auto tab = read_metrics(a.metrics());
  if (tab.rows.empty()) throw MissingArtifact(a.metrics().string() + " holds no score rows; run an evaluation stage");
  // method -> phase -> seed -> seconds
  std::map<std::string, std::map<std::string, std::map<std::uint64_t, double>>> times;
  if (std::filesystem::exists(a.timing())) {
    const auto csv = read_csv(a.timing().string());
    for (std::size_t i = 1; i < csv.size(); ++i) {
      const auto& f = csv[i];
      times[f.at(1)][f.at(2)][parse_number<std::uint64_t>(f.at(3), "seed")] += parse_number<double>(f.at(4), "seconds");
    }
  }
  auto mean_of = [](const std::map<std::uint64_t, double>& m) {
    double s = 0;
    for (const auto& [k, v] : m) s += v;
    return m.empty() ? 0.0 : s / static_cast<double>(m.size());
  };
  std::vector<MethodSummary> out;
  for (const auto& method : report_order(tab.methods())) {
    MethodSummary s;
    s.method = method;
    s.accuracy = tab.accuracy_by_seed(method);
    s.mean = mean_of(s.accuracy);
    {
      double v = 0;
      for (const auto& [k, acc] : s.accuracy) v += (acc - s.mean) * (acc - s.mean);
      s.std = std::sqrt(v / static_cast<double>(s.accuracy.size()));
    }
    s.train_seconds = mean_of(times[method]["train"]);
    s.eval_seconds = mean_of(times[method]["eval"]);
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes report.csv and report.txt from the assembled run tables.
inline std::vector<MethodSummary> write_report(const RunArtifacts& a) {
  const auto rows = summarize(a);
  std::string csv = "method,seeds,accuracy_mean,accuracy_std,train_seconds,eval_seconds\n";
  std::string txt;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %5s %9s %9s %10s %10s\n", "method", "seeds", "acc_mean", "acc_std",
                "train_s", "eval_s");
  txt += line;
  for (const auto& r : rows) {
    csv += r.method + "," + fmt(r.accuracy.size()) + "," + fmt(r.mean) + "," + fmt(r.std) + "," + fmt(r.train_seconds) +
           "," + fmt(r.eval_seconds) + "\n";
    std::snprintf(line, sizeof line, "%-28s %5zu %9.4f %9.4f %10.2f %10.2f\n", r.method.c_str(), r.accuracy.size(),
                  r.mean, r.std, r.train_seconds, r.eval_seconds);
    txt += line;
  }
  detail::write_text(a.report_csv(), csv);
  detail::write_text(a.report_txt(), txt);
  return rows;
}

}  // namespace noop::harness
