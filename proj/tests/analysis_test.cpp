#include <cmath>
#include <random>
#include <sstream>

#include "gtest/gtest.h"
#include "fragscope/analysis.hpp"

namespace fragscope::analysis {
namespace {

// Independent route: rank = (#smaller) + (#equal + 1) / 2, then textbook
// Pearson on the ranks.
double oracle_spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r;
    for (double x : v) {
      double less = 0, equal = 0;
      for (double y : v) {
        less += y < x;
        equal += y == x;
      }
      r.push_back(less + (equal + 1) / 2);
    }
    return r;
  };
  const auto rx = rank(xs), ry = rank(ys);
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += rx[i];
    sy += ry[i];
    sxy += rx[i] * ry[i];
    sxx += rx[i] * rx[i];
    syy += ry[i] * ry[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

TEST(Spearman, MonotoneAndAntitone) {
  EXPECT_DOUBLE_EQ(spearman(std::vector{1.0, 2.0, 3.0}, std::vector{10.0, 20.0, 30.0}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(std::vector{1.0, 2.0, 3.0}, std::vector{30.0, 20.0, 10.0}), -1.0);
}

TEST(Spearman, TiesUseAverageRanks) {
  const std::vector xs{1.0, 2.0, 2.0, 4.0}, ys{1.0, 3.0, 2.0, 4.0};
  EXPECT_EQ(average_ranks(xs), (std::vector{1.0, 2.5, 2.5, 4.0}));
  // Ranks (1, 2.5, 2.5, 4) vs (1, 3, 2, 4): 4.5 / sqrt(4.5 * 5) = sqrt(0.9).
  EXPECT_NEAR(spearman(xs, ys), std::sqrt(0.9), 1e-12);
  EXPECT_NEAR(spearman(xs, ys), oracle_spearman(xs, ys), 1e-12);
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman(std::vector{1.0, 2.0}, std::vector{1.0}), AnalysisError);
  EXPECT_THROW(spearman(std::vector{1.0}, std::vector{1.0}), AnalysisError);
  EXPECT_THROW(spearman(std::vector{3.0, 3.0, 3.0}, std::vector{1.0, 2.0, 3.0}), AnalysisError);
}

TEST(SpearmanProperty, RankInvarianceSymmetryAndOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int round = 0; round < 200; ++round) {
    const std::size_t n = 2 + rng() % 30;
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse values so ties are common.
      xs.push_back(std::round(u(rng) * 2) / 2);
      ys.push_back(std::round(u(rng) * 2) / 2);
    }
    auto constant = [](const std::vector<double>& v) { return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; }); };
    if (constant(xs) || constant(ys)) continue;
    const double rho = spearman(xs, ys);
    EXPECT_NEAR(rho, oracle_spearman(xs, ys), 1e-12);
    EXPECT_GE(rho, -1.0);
    EXPECT_LE(rho, 1.0);
    EXPECT_DOUBLE_EQ(spearman(ys, xs), rho);
    EXPECT_NEAR(spearman(xs, xs), 1.0, 1e-12);
    std::vector<double> cubed, exped;
    for (double x : xs) {
      cubed.push_back(x * x * x);
      exped.push_back(std::exp(x));
    }
    EXPECT_NEAR(spearman(cubed, ys), rho, 1e-12);
    EXPECT_NEAR(spearman(exped, ys), rho, 1e-12);
  }
}

TEST(SummarizeRss, Examples) {
  const auto a = summarize_rss(std::vector{100.0, 100.0});
  EXPECT_NEAR(a.mean_mib, 100.0 / 1024.0, 1e-12);
  EXPECT_EQ(a.stddev_mib, 0.0);
  const auto b = summarize_rss(std::vector{1024.0, 2048.0});
  EXPECT_DOUBLE_EQ(b.mean_mib, 1.5);
  EXPECT_NEAR(b.stddev_mib, std::sqrt(0.5), 1e-12);
  EXPECT_EQ(summarize_rss(std::vector{4096.0}).stddev_mib, 0.0);
  EXPECT_THROW(summarize_rss(std::vector<double>{}), AnalysisError);
}

std::map<PairKey, RssSummary> rss_of(const std::string& w, const std::vector<std::pair<std::string, double>>& v) {
  std::map<PairKey, RssSummary> out;
  for (const auto& [a, mib] : v) out[{w, a}] = {mib, 0.1};
  return out;
}

TEST(Correlate, MonotoneIsStrong) {
  const std::vector<FragEntry> frag{
      {"w", "0", "a", 10, 0.1}, {"w", "0", "b", 10, 0.2}, {"w", "0", "c", 10, 0.3}, {"w", "0", "d", 10, 0.4}};
  const auto rows = correlate(frag, rss_of("w", {{"a", 10}, {"b", 20}, {"c", 30}, {"d", 40}}));
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_DOUBLE_EQ(rows[0].spearman, 1.0);
  EXPECT_TRUE(rows[0].strong);
  EXPECT_DOUBLE_EQ(rows[0].frag_min_pct, 10.0);
  EXPECT_DOUBLE_EQ(rows[0].frag_max_pct, 40.0);
  EXPECT_EQ(rows[0].rss_min_mib, 10.0);
  EXPECT_EQ(rows[0].rss_max_mib, 40.0);
}

TEST(Correlate, AntitoneNotFlagged) {
  const std::vector<FragEntry> frag{{"w", "0", "a", 1, 0.1}, {"w", "0", "b", 1, 0.2}, {"w", "0", "c", 1, 0.3}};
  const auto rows = correlate(frag, rss_of("w", {{"a", 30}, {"b", 20}, {"c", 10}}));
  EXPECT_DOUBLE_EQ(rows[0].spearman, -1.0);
  EXPECT_FALSE(rows[0].strong);
}

TEST(Correlate, MissingPairsListed) {
  const std::vector<FragEntry> frag{{"w", "0", "a", 1, 0.1}, {"w", "0", "b", 1, 0.2}};
  try {
    correlate(frag, rss_of("w", {{"a", 1}, {"c", 2}}));
    FAIL();
  } catch (const AnalysisError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("w/b (rss)"), std::string::npos);
    EXPECT_NE(what.find("w/c (frag)"), std::string::npos);
  }
}

TEST(Correlate, OrderIndependent) {
  std::vector<FragEntry> frag;
  std::map<PairKey, RssSummary> rss;
  std::mt19937_64 rng(4);
  for (std::string w : {"x", "y", "z"})
    for (std::string a : {"a", "b", "c", "d", "e"}) {
      frag.push_back({w, "1", a, 5, double(rng() % 100) / 100});
      rss[{w, a}] = {double(rng() % 1000), 0};
    }
  const auto baseline = correlate(frag, rss);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(frag.begin(), frag.end(), rng);
    const auto rows = correlate(frag, rss);
    ASSERT_EQ(rows.size(), baseline.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      EXPECT_EQ(rows[k].workload, baseline[k].workload);
      EXPECT_EQ(rows[k].spearman, baseline[k].spearman);
    }
  }
}

TEST(Scatter, SinglePointIsUnit) {
  const std::vector<FragEntry> frag{{"w", "0", "a", 1, 0.3}};
  const auto pts = scatter_points(frag, rss_of("w", {{"a", 12}}));
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_EQ(pts[0].frag, 1.0);
  EXPECT_EQ(pts[0].rss, 1.0);
}

TEST(Scatter, ErrorBarsScaleByMaxMean) {
  const std::vector<FragEntry> frag{{"w", "0", "a", 1, 0.1}, {"w", "0", "b", 1, 0.4}};
  std::map<PairKey, RssSummary> rss{{{"w", "a"}, {10, 1}}, {{"w", "b"}, {40, 2}}};
  const auto pts = scatter_points(frag, rss);
  EXPECT_DOUBLE_EQ(pts[0].rss_error, 1.0 / 40);
  EXPECT_DOUBLE_EQ(pts[1].rss_error, 2.0 / 40);
  EXPECT_DOUBLE_EQ(pts[0].frag, 0.25);
}

TEST(Heatmap, FourAllocatorsRoundTrip) {
  std::vector<FragEntry> frag;
  std::map<PairKey, RssSummary> rss;
  const std::vector<std::string> allocators{"glibc", "jemalloc", "mimalloc", "snmalloc"};
  const std::vector<std::string> workloads{"espeak", "gzip", "libxml2", "tjbench"};
  double v = 1;
  for (const auto& w : workloads)
    for (const auto& a : allocators) {
      frag.push_back({w, "2", a, 1, v / 16});
      rss[{w, a}] = {v * 2, 0};
      v += 1;
    }
  const Heatmap h = build_heatmap(frag, rss);
  EXPECT_EQ(h.allocators, allocators);
  EXPECT_EQ(h.workloads, workloads);
  for (std::size_t w = 0; w < workloads.size(); ++w) {
    double fmax = 0;
    for (std::size_t a = 0; a < allocators.size(); ++a) fmax = std::max(fmax, h.frag[a][w]);
    EXPECT_EQ(fmax, 1.0);
  }
  std::ostringstream out;
  emit_heatmap(out, h);
  std::istringstream in(out.str());
  const Heatmap back = read_heatmap(in);
  EXPECT_EQ(back.allocators, h.allocators);
  EXPECT_EQ(back.workloads, h.workloads);
  for (std::size_t a = 0; a < allocators.size(); ++a)
    for (std::size_t w = 0; w < workloads.size(); ++w) {
      EXPECT_NEAR(back.frag[a][w], h.frag[a][w], 5e-7);
      EXPECT_NEAR(back.rss[a][w], h.rss[a][w], 5e-7);
    }
}

TEST(RssFile, ParsesAndValidates) {
  std::istringstream ok("workload,allocator,sample_index,peak_rss_kib\nw,a,0,1024\nw,a,1,2048\n");
  const auto samples = read_rss_samples(ok);
  ASSERT_EQ(samples.size(), 2u);
  EXPECT_DOUBLE_EQ(summarize_all(samples).at({"w", "a"}).mean_mib, 1.5);
  std::istringstream dup("workload,allocator,sample_index,peak_rss_kib\nw,a,0,1\nw,a,0,2\n");
  EXPECT_THROW(read_rss_samples(dup), ParseError);
  std::istringstream zero("workload,allocator,sample_index,peak_rss_kib\nw,a,0,0\n");
  EXPECT_THROW(read_rss_samples(zero), ParseError);
}

TEST(StudyFile, Columns) {
  const std::vector<StudyRow> rows{{"gzip", "0", 610992, 3.0, 5.3, 22.7, 47.5, 0.77, true}};
  std::ostringstream out;
  write_study(out, rows);
  EXPECT_EQ(out.str(),
            "workload,input,jobs,rss_min_mib,rss_max_mib,frag_min_pct,frag_max_pct,spearman,strong\n"
            "gzip,0,610992,3.000,5.300,22.700,47.500,0.770000,1\n");
}

}  // namespace
}  // namespace fragscope::analysis
