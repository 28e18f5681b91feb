#pragma once

// Correlating fragmentation with measured peak RSS.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "fragscope/text.hpp"

namespace fragscope::analysis {

inline constexpr double kStrongCorrelation = 0.65;

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 1-based ranks; tied values share the mean of the positions they occupy.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size())
    throw AnalysisError("spearman: length mismatch (" + std::to_string(xs.size()) + " vs " +
                        std::to_string(ys.size()) + ")");
  if (xs.size() < 2) throw AnalysisError("spearman: need at least two points");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(xs) || constant(ys)) throw AnalysisError("spearman: constant input has no ranking");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

inline constexpr double kKiBPerMiB = 1024.0;

struct RssSample {
  std::string workload;
  std::string allocator;
  std::uint64_t sample_index = 0;
  double peak_rss_kib = 0;
};

struct RssSummary {
  double mean_mib = 0;
  double stddev_mib = 0;  // sample (n - 1) deviation, 0 for a single sample
};

inline RssSummary summarize_rss(std::span<const double> peak_rss_kib) {
  if (peak_rss_kib.empty()) throw AnalysisError("summarize_rss: no samples");
  const double n = static_cast<double>(peak_rss_kib.size());
  double mean = 0;
  for (double v : peak_rss_kib) mean += v / kKiBPerMiB;
  mean /= n;
  double ss = 0;
  for (double v : peak_rss_kib) ss += (v / kKiBPerMiB - mean) * (v / kKiBPerMiB - mean);
  return {mean, peak_rss_kib.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0};
}

inline std::vector<RssSample> read_rss_samples(std::istream& in) {
  std::string line;
  if (!text::next_line(in, line) || line != "workload,allocator,sample_index,peak_rss_kib")
    throw ParseError(1, "", "bad RSS header");
  std::vector<RssSample> out;
  std::set<std::tuple<std::string, std::string, std::uint64_t>> seen;
  std::size_t lineno = 1;
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = text::split(line);
    if (cols.size() != 4) throw ParseError(lineno, "", "expected 4 fields");
    RssSample s{std::string(cols[0]), std::string(cols[1]), 0, 0};
    auto idx = text::parse_dec(cols[2]);
    auto rss = text::parse_real(cols[3]);
    if (s.workload.empty()) throw ParseError(lineno, "workload", "empty");
    if (s.allocator.empty()) throw ParseError(lineno, "allocator", "empty");
    if (!idx) throw ParseError(lineno, "sample_index", "bad index");
    if (!rss || !(*rss > 0)) throw ParseError(lineno, "peak_rss_kib", "must be a positive number");
    s.sample_index = *idx;
    s.peak_rss_kib = *rss;
    if (!seen.emplace(s.workload, s.allocator, s.sample_index).second)
      throw ParseError(lineno, "sample_index", "duplicate sample");
    out.push_back(std::move(s));
  }
  return out;
}

using PairKey = std::pair<std::string, std::string>;  // (workload, allocator)

inline std::map<PairKey, RssSummary> summarize_all(std::span<const RssSample> samples) {
  std::map<PairKey, std::vector<double>> grouped;
  for (const auto& s : samples) grouped[{s.workload, s.allocator}].push_back(s.peak_rss_kib);
  std::map<PairKey, RssSummary> out;
  for (const auto& [key, values] : grouped) out.emplace(key, summarize_rss(values));
  return out;
}

// Fragmentation of one workload-allocator pair.
struct FragEntry {
  std::string workload;
  std::string input = "N/A";
  std::string allocator;
  std::uint64_t jobs = 0;
  double frag = 0;  // F_T as a ratio
};

// Study index row: which fragmentation report belongs to which pair.
struct IndexRow {
  FragEntry entry;  // frag filled in once the report is read
  std::string report;
};

inline constexpr std::string_view kIndexHeader = "workload,input,allocator,jobs,report";

inline std::vector<IndexRow> read_study_index(std::istream& in) {
  std::string line;
  if (!text::next_line(in, line) || line != kIndexHeader) throw ParseError(1, "", "bad study index header");
  std::vector<IndexRow> out;
  std::size_t lineno = 1;
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = text::split(line);
    if (cols.size() != 5) throw ParseError(lineno, "", "expected 5 fields");
    auto jobs = text::parse_dec(cols[3]);
    if (!jobs) throw ParseError(lineno, "jobs", "bad count");
    if (cols[0].empty() || cols[2].empty() || cols[4].empty()) throw ParseError(lineno, "", "empty field");
    IndexRow row;
    row.entry.workload = std::string(cols[0]);
    row.entry.input = cols[1].empty() ? "N/A" : std::string(cols[1]);
    row.entry.allocator = std::string(cols[2]);
    row.entry.jobs = *jobs;
    row.report = std::string(cols[4]);
    out.push_back(std::move(row));
  }
  return out;
}

struct StudyRow {
  std::string workload;
  std::string input;
  std::uint64_t jobs = 0;
  double rss_min_mib = 0;
  double rss_max_mib = 0;
  double frag_min_pct = 0;
  double frag_max_pct = 0;
  double spearman = 0;
  bool strong = false;
};

// One Spearman coefficient per workload over its allocators' (F_T, mean peak
// RSS) points.  Rows come out sorted by workload; allocators are visited in
// name order, so the input order never matters.
inline std::vector<StudyRow> correlate(std::span<const FragEntry> frag,
                                       const std::map<PairKey, RssSummary>& rss,
                                       double threshold = kStrongCorrelation) {
  std::map<std::string, std::map<std::string, const FragEntry*>> by_workload;
  std::vector<std::string> missing;
  for (const auto& e : frag) {
    if (!by_workload[e.workload].emplace(e.allocator, &e).second)
      throw AnalysisError("duplicate fragmentation entry for " + e.workload + "/" + e.allocator);
    if (!rss.contains({e.workload, e.allocator})) missing.push_back(e.workload + "/" + e.allocator + " (rss)");
  }
  for (const auto& [key, summary] : rss) {
    auto w = by_workload.find(key.first);
    if (w == by_workload.end() || !w->second.contains(key.second))
      missing.push_back(key.first + "/" + key.second + " (frag)");
  }
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw AnalysisError("missing workload/allocator pairs: " + list);
  }

  std::vector<StudyRow> rows;
  for (const auto& [workload, allocators] : by_workload) {
    if (allocators.size() < 2) throw AnalysisError("workload " + workload + " needs at least two allocators");
    std::vector<double> fs, ms;
    StudyRow row;
    row.workload = workload;
    row.input = allocators.begin()->second->input;
    for (const auto& [name, entry] : allocators) {
      fs.push_back(entry->frag);
      ms.push_back(rss.at({workload, name}).mean_mib);
      row.jobs = std::max(row.jobs, entry->jobs);
    }
    row.rss_min_mib = *std::min_element(ms.begin(), ms.end());
    row.rss_max_mib = *std::max_element(ms.begin(), ms.end());
    row.frag_min_pct = *std::min_element(fs.begin(), fs.end()) * 100.0;
    row.frag_max_pct = *std::max_element(fs.begin(), fs.end()) * 100.0;
    try {
      row.spearman = spearman(fs, ms);
    } catch (const AnalysisError& e) {
      throw AnalysisError("workload " + workload + ": " + e.what());
    }
    row.strong = row.spearman > threshold;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string fixed(double v, int places) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", places, v);
  return buf;
}

inline void write_study(std::ostream& out, std::span<const StudyRow> rows) {
  out << "workload,input,jobs,rss_min_mib,rss_max_mib,frag_min_pct,frag_max_pct,spearman,strong\n";
  for (const auto& r : rows) {
    out << r.workload << ',' << r.input << ',' << r.jobs << ',' << fixed(r.rss_min_mib, 3) << ','
        << fixed(r.rss_max_mib, 3) << ',' << fixed(r.frag_min_pct, 3) << ',' << fixed(r.frag_max_pct, 3) << ','
        << fixed(r.spearman, 6) << ',' << (r.strong ? 1 : 0) << '\n';
  }
}

// Scatter data: per workload, every allocator's point divided by the
// workload's maxima.  The error value is stddev / max mean RSS.
struct ScatterPoint {
  std::string workload;
  std::string allocator;
  double frag = 0;
  double rss = 0;
  double rss_error = 0;
};

inline std::vector<ScatterPoint> scatter_points(std::span<const FragEntry> frag,
                                                const std::map<PairKey, RssSummary>& rss) {
  std::map<std::string, std::vector<const FragEntry*>> by_workload;
  for (const auto& e : frag) by_workload[e.workload].push_back(&e);
  std::vector<ScatterPoint> out;
  for (auto& [workload, entries] : by_workload) {
    std::sort(entries.begin(), entries.end(),
              [](const FragEntry* a, const FragEntry* b) { return a->allocator < b->allocator; });
    double fmax = 0, rmax = 0;
    for (const auto* e : entries) {
      fmax = std::max(fmax, e->frag);
      rmax = std::max(rmax, rss.at({workload, e->allocator}).mean_mib);
    }
    for (const auto* e : entries) {
      const auto& s = rss.at({workload, e->allocator});
      out.push_back({workload, e->allocator, fmax > 0 ? e->frag / fmax : 0.0, rmax > 0 ? s.mean_mib / rmax : 0.0,
                     rmax > 0 ? s.stddev_mib / rmax : 0.0});
    }
  }
  return out;
}

inline void emit_scatter(std::ostream& out, std::span<const ScatterPoint> points) {
  out << "workload,allocator,frag_norm,rss_norm,rss_err_norm\n";
  for (const auto& p : points)
    out << p.workload << ',' << p.allocator << ',' << fixed(p.frag, 6) << ',' << fixed(p.rss, 6) << ','
        << fixed(p.rss_error, 6) << '\n';
}

// Allocator x workload matrix, each column divided by its maximum.
struct Heatmap {
  std::vector<std::string> allocators;
  std::vector<std::string> workloads;
  std::vector<std::vector<double>> frag;  // [allocator][workload]
  std::vector<std::vector<double>> rss;

  friend bool operator==(const Heatmap&, const Heatmap&) = default;
};

inline Heatmap build_heatmap(std::span<const FragEntry> frag, const std::map<PairKey, RssSummary>& rss) {
  Heatmap h;
  std::set<std::string> allocators, workloads;
  std::map<PairKey, double> f;
  for (const auto& e : frag) {
    allocators.insert(e.allocator);
    workloads.insert(e.workload);
    f[{e.workload, e.allocator}] = e.frag;
  }
  h.allocators.assign(allocators.begin(), allocators.end());
  h.workloads.assign(workloads.begin(), workloads.end());
  h.frag.assign(h.allocators.size(), std::vector<double>(h.workloads.size(), 0.0));
  h.rss = h.frag;
  for (std::size_t w = 0; w < h.workloads.size(); ++w) {
    double fmax = 0, rmax = 0;
    for (const auto& a : h.allocators) {
      if (auto it = f.find({h.workloads[w], a}); it != f.end()) fmax = std::max(fmax, it->second);
      if (auto it = rss.find({h.workloads[w], a}); it != rss.end()) rmax = std::max(rmax, it->second.mean_mib);
    }
    for (std::size_t a = 0; a < h.allocators.size(); ++a) {
      if (auto it = f.find({h.workloads[w], h.allocators[a]}); it != f.end() && fmax > 0)
        h.frag[a][w] = it->second / fmax;
      if (auto it = rss.find({h.workloads[w], h.allocators[a]}); it != rss.end() && rmax > 0)
        h.rss[a][w] = it->second.mean_mib / rmax;
    }
  }
  return h;
}

// Rows: "<metric>,<allocator>,<value per workload>", metric in {frag, rss}.
inline void emit_heatmap(std::ostream& out, const Heatmap& h) {
  out << "metric,allocator";
  for (const auto& w : h.workloads) out << ',' << w;
  out << '\n';
  auto rows = [&](const char* metric, const std::vector<std::vector<double>>& m) {
    for (std::size_t a = 0; a < h.allocators.size(); ++a) {
      out << metric << ',' << h.allocators[a];
      for (double v : m[a]) out << ',' << fixed(v, 6);
      out << '\n';
    }
  };
  rows("frag", h.frag);
  rows("rss", h.rss);
}

inline Heatmap read_heatmap(std::istream& in) {
  Heatmap h;
  std::string line;
  if (!text::next_line(in, line)) throw ParseError(1, "", "empty heatmap");
  auto header = text::split(line);
  if (header.size() < 2 || header[0] != "metric" || header[1] != "allocator")
    throw ParseError(1, "", "bad heatmap header");
  for (std::size_t i = 2; i < header.size(); ++i) h.workloads.emplace_back(header[i]);
  std::size_t lineno = 1;
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = text::split(line);
    if (cols.size() != header.size()) throw ParseError(lineno, "", "row width differs from header");
    std::vector<double> values;
    for (std::size_t i = 2; i < cols.size(); ++i) {
      auto v = text::parse_real(cols[i]);
      if (!v) throw ParseError(lineno, std::string(header[i]), "bad value");
      values.push_back(*v);
    }
    if (cols[0] == "frag") {
      h.allocators.emplace_back(cols[1]);
      h.frag.push_back(std::move(values));
    } else if (cols[0] == "rss") {
      h.rss.push_back(std::move(values));
    } else {
      throw ParseError(lineno, "metric", "unknown metric '" + std::string(cols[0]) + "'");
    }
  }
  if (h.rss.size() != h.frag.size()) throw ParseError(lineno, "", "frag and rss row counts differ");
  return h;
}

}  // namespace fragscope::analysis
