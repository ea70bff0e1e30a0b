// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tsdiffuse/error.hpp"
#include "tsdiffuse/records.hpp"

namespace tsdiffuse {

/// Sum of absolute element differences. Reported as "ED".
inline double ed_l1(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw ShapeError("ed_l1: lengths differ (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s;
}

/// DTW in which every step advances x by one and y by zero, one or two:
///   D(i,j) = |x_i - y_j| + min(D(i-1,j), D(i-1,j-1), D(i-1,j-2))
/// anchored at D(1,1). Unreachable cells are infinite, so the result is
/// infinite when y is too long to cover with x.size() steps.
inline double dtw_asym(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw ShapeError("dtw_asym: empty series");
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t m = y.size();
  std::vector<double> prev(m, inf), cur(m, inf);
  prev[0] = std::abs(x[0] - y[0]);
  for (std::size_t i = 1; i < x.size(); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double best = prev[j];
      if (j >= 1) best = std::min(best, prev[j - 1]);
      if (j >= 2) best = std::min(best, prev[j - 2]);
      cur[j] = best == inf ? inf : best + std::abs(x[i] - y[j]);
    }
    std::swap(prev, cur);
  }
  return prev[m - 1];
}

/// One generated series next to its ground truth. `desc_type` is the raw
/// tag so unknown values surface as errors at evaluation time.
struct EvalPair {
  std::string id;
  std::string desc_type;
  std::vector<double> generated;
  std::vector<double> truth;
};

struct ReportRow {
  std::string subset;
  double ed = 0.0;
  double dtw = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  std::vector<ReportRow> rows;  // description types in fixed order, then "all"

  const ReportRow* find(std::string_view subset) const {
    for (const auto& r : rows)
      if (r.subset == subset) return &r;
    return nullptr;
  }
};

/// Per-subset means of both distances. With `types`, pairs of other types
/// are left out and "all" covers only the selected ones. Subsets without
/// pairs get no row.
inline EvalReport evaluate(std::span<const EvalPair> pairs, const std::optional<std::set<DescType>>& types = std::nullopt) {
  if (pairs.empty()) throw ConfigError("evaluate: no pairs to evaluate");
  std::vector<double> ed_sum(kAllDescTypes.size(), 0.0), dtw_sum(kAllDescTypes.size(), 0.0);
  std::vector<std::size_t> count(kAllDescTypes.size(), 0);
  for (const auto& p : pairs) {
    const auto dt = parse_desc_type(p.desc_type);
    if (!dt) throw ConfigError("evaluate: unknown desc_type '" + p.desc_type + "' on pair '" + p.id + "'");
    if (types && !types->count(*dt)) continue;
    const auto k = static_cast<std::size_t>(*dt);
    ed_sum[k] += ed_l1(p.generated, p.truth);
    dtw_sum[k] += dtw_asym(p.generated, p.truth);
    ++count[k];
  }
  EvalReport rep;
  ReportRow all{"all", 0.0, 0.0, 0};
  for (std::size_t k = 0; k < kAllDescTypes.size(); ++k) {
    if (count[k] == 0) continue;
    const auto n = static_cast<double>(count[k]);
    rep.rows.push_back({std::string(to_string(kAllDescTypes[k])), ed_sum[k] / n, dtw_sum[k] / n, count[k]});
    all.ed += ed_sum[k];
    all.dtw += dtw_sum[k];
    all.count += count[k];
  }
  if (all.count == 0) throw ConfigError("evaluate: no pairs match the selected description types");
  all.ed /= static_cast<double>(all.count);
  all.dtw /= static_cast<double>(all.count);
  rep.rows.push_back(all);
  return rep;
}

inline std::string report_csv(const EvalReport& rep, std::string_view config_hash = {}) {
  std::string s;
  if (!config_hash.empty()) s += "# config_hash=" + std::string(config_hash) + "\n";
  s += "subset,metric,mean,count\n";
  char buf[128];
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof buf, "%s,ED,%.6f,%zu\n%s,DTW,%.6f,%zu\n", r.subset.c_str(), r.ed, r.count,
                  r.subset.c_str(), r.dtw, r.count);
    s += buf;
  }
  return s;
}

/// Fixed-width table with an ED and a DTW line per subset.
inline std::string report_table(const EvalReport& rep, std::string_view config_hash = {}) {
  std::string s;
  if (!config_hash.empty()) s += "# config_hash=" + std::string(config_hash) + "\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-10s %-6s %10s %8s\n", "subset", "metric", "mean", "pairs");
  s += buf;
  s += std::string(37, '-') + "\n";
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof buf, "%-10s %-6s %10.2f %8zu\n%-10s %-6s %10.2f\n", r.subset.c_str(), "ED", r.ed,
                  r.count, "", "DTW", r.dtw);
    s += buf;
  }
  return s;
}

}  // namespace tsdiffuse
