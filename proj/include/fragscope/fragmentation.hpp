#pragma once

// External fragmentation of a 2DBP instance.
//
// A span is the time interval between two consecutive job events of one
// mapping.  Inside a span the live jobs are fixed, and within every page that
// holds at least one live byte, each free interval lying below some live byte
// of the same page is a gap.  Free space above the topmost live byte of a
// page is never a gap, and gaps never cross a page boundary.
//
//   F_mi = sum over spans of (gap bytes in span) * span width
//   L_mi = sum over jobs of block_size * lifetime
//   F_T  = sum(F_mi) / sum(L_mi)
//
// All areas are exact integers in byte^2, so partial sums computed by any
// number of workers reduce to the same value.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "fragscope/binpack.hpp"

namespace fragscope {

using Area = unsigned __int128;

struct FragOptions {
  Bytes page_size = kDefaultPageSize;
  // Count free space between a page base and its lowest live byte.
  bool floor_gaps = true;
  unsigned workers = 1;
};

struct MappingFrag {
  Address map_start = 0;
  Area gap_area = 0;  // F_mi
  Area job_area = 0;  // L_mi

  friend bool operator==(const MappingFrag&, const MappingFrag&) = default;
};

class FragmentationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FragmentationReport {
  std::vector<MappingFrag> per_mapping;
  Area gap_area = 0;
  Area job_area = 0;

  // F_T.  Undefined (throws) when the instance has no job area at all.
  double ratio() const {
    if (job_area == 0) throw FragmentationError("undefined fragmentation: total job area is zero");
    return static_cast<double>(static_cast<long double>(gap_area) / static_cast<long double>(job_area));
  }

  friend bool operator==(const FragmentationReport&, const FragmentationReport&) = default;
};

// ---------------------------------------------------------------------------
// Spans and the per-span gap rule, computed directly from the definition.

struct Span {
  Time t_begin = 0;
  Time t_end = 0;
  std::vector<std::size_t> live;  // indices into the mapping's jobs

  Time width() const noexcept { return t_end - t_begin; }
};

inline std::vector<Span> spans(const MappingInstance& mapping) {
  std::vector<Time> times;
  for (const Job& j : mapping.jobs) {
    if (j.t_start == j.t_end) continue;
    times.push_back(j.t_start);
    times.push_back(j.t_end);
  }
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  std::vector<Span> out;
  if (times.size() < 2) return out;
  out.reserve(times.size() - 1);
  for (std::size_t i = 0; i + 1 < times.size(); ++i) out.push_back({times[i], times[i + 1], {}});
  for (std::size_t k = 0; k < mapping.jobs.size(); ++k) {
    const Job& j = mapping.jobs[k];
    if (j.t_start == j.t_end) continue;
    auto first = std::lower_bound(times.begin(), times.end(), j.t_start) - times.begin();
    auto last = std::lower_bound(times.begin(), times.end(), j.t_end) - times.begin();
    for (auto s = first; s < last; ++s) out[static_cast<std::size_t>(s)].live.push_back(k);
  }
  return out;
}

// Gap bytes (height only) for a set of disjoint live extents.
inline Bytes gap_height(std::vector<std::pair<Address, Address>> extents, Bytes page_size,
                        bool floor_gaps = true) {
  std::erase_if(extents, [](const auto& e) { return e.first == e.second; });
  std::sort(extents.begin(), extents.end());
  // Clip every extent to the pages it touches, then walk each page bottom-up.
  std::map<Address, std::vector<std::pair<Address, Address>>> pages;
  for (auto [lo, hi] : extents) {
    for (Address page = lo / page_size * page_size; page < hi; page += page_size) {
      pages[page].push_back({std::max(lo, page), std::min(hi, page + page_size)});
      if (page + page_size < page) break;
    }
  }
  Bytes gaps = 0;
  for (const auto& [base, clipped] : pages) {
    // A free interval [cursor, lo) is closed from above by the live extent
    // starting at lo, so it counts; the space above the last extent does not.
    Address cursor = base;
    bool first = true;
    for (auto [lo, hi] : clipped) {
      if (lo > cursor && (floor_gaps || !first)) gaps += lo - cursor;
      cursor = hi;
      first = false;
    }
  }
  return gaps;
}

inline Area gaps_in_span(const Span& span, std::span<const Job> jobs, Bytes page_size,
                         bool floor_gaps = true) {
  std::vector<std::pair<Address, Address>> extents;
  extents.reserve(span.live.size());
  for (std::size_t k : span.live) extents.push_back({jobs[k].address, jobs[k].end_address()});
  return static_cast<Area>(gap_height(std::move(extents), page_size, floor_gaps)) * span.width();
}

inline Area job_area(const MappingInstance& mapping) {
  Area area = 0;
  for (const Job& j : mapping.jobs) area += static_cast<Area>(j.block_size) * j.duration();
  return area;
}

// F_mi computed span by span from the definition; quadratic in the live-set
// size, kept as a second route for cross-checking the sweep.
inline MappingFrag mapping_frag_by_spans(const MappingInstance& mapping, Bytes page_size,
                                         bool floor_gaps = true) {
  MappingFrag out{mapping.map_start, 0, job_area(mapping)};
  for (const Span& s : spans(mapping)) out.gap_area += gaps_in_span(s, mapping.jobs, page_size, floor_gaps);
  return out;
}

// ---------------------------------------------------------------------------
// Incremental sweep.

namespace detail {

// Live extents of one mapping plus the running gap height.  Only the first
// and last page of an inserted or removed extent can change their gap
// contribution: pages strictly inside it are fully covered while it lives and
// empty otherwise.
class GapTracker {
 public:
  GapTracker(Bytes page_size, bool floor_gaps) : page_(page_size), floor_(floor_gaps) {}

  void insert(const Job& j) {
    if (j.block_size == 0) return;
    const Address lo = j.address, hi = j.end_address();
    auto next = live_.lower_bound(lo);
    if ((next != live_.end() && next->first < hi) ||
        (next != live_.begin() && std::prev(next)->second > lo))
      throw std::invalid_argument("overlapping live jobs at " + text::hex(lo) + " (job " +
                                  text::dec(j.job_id) + ")");
    live_.emplace_hint(next, lo, hi);
    refresh(lo, hi);
  }

  void erase(const Job& j) {
    if (j.block_size == 0) return;
    live_.erase(j.address);
    refresh(j.address, j.end_address());
  }

  Bytes height() const noexcept { return height_; }

 private:
  void refresh(Address lo, Address hi) {
    const Address first = lo / page_ * page_;
    const Address last = (hi - 1) / page_ * page_;
    update(first);
    if (last != first) update(last);
  }

  void update(Address base) {
    const Bytes now = contribution(base);
    auto it = contrib_.find(base);
    const Bytes before = it == contrib_.end() ? 0 : it->second;
    height_ = height_ - before + now;
    if (now == 0) {
      if (it != contrib_.end()) contrib_.erase(it);
    } else if (it == contrib_.end()) {
      contrib_.emplace(base, now);
    } else {
      it->second = now;
    }
  }

  // (top - base - live) with floor gaps, (top - bottom - live) without.
  Bytes contribution(Address base) const {
    const Address limit = base + page_;
    auto it = live_.upper_bound(base);
    if (it != live_.begin() && std::prev(it)->second > base) --it;
    Bytes live = 0;
    Address bottom = 0, top = 0;
    bool any = false;
    for (; it != live_.end() && it->first < limit; ++it) {
      const Address lo = std::max(it->first, base);
      const Address hi = std::min(it->second, limit);
      if (!any) bottom = lo;
      any = true;
      live += hi - lo;
      top = hi;
    }
    if (!any) return 0;
    return (top - (floor_ ? base : bottom)) - live;
  }

  Bytes page_;
  bool floor_;
  std::map<Address, Address> live_;
  std::unordered_map<Address, Bytes> contrib_;
  Bytes height_ = 0;
};

// Precomputed event structure of one mapping, shared read-only by workers.
struct SweepPlan {
  const MappingInstance* mapping = nullptr;
  std::vector<Time> times;  // distinct event times
  struct Event {
    Time t;
    bool start;
    std::size_t job;
  };
  std::vector<Event> events;  // by time, ends before starts

  explicit SweepPlan(const MappingInstance& m) : mapping(&m) {
    for (std::size_t k = 0; k < m.jobs.size(); ++k) {
      const Job& j = m.jobs[k];
      if (j.t_start == j.t_end) continue;
      times.push_back(j.t_start);
      times.push_back(j.t_end);
      events.push_back({j.t_start, true, k});
      events.push_back({j.t_end, false, k});
    }
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
      if (a.t != b.t) return a.t < b.t;
      if (a.start != b.start) return !a.start;
      return a.job < b.job;
    });
  }

  std::size_t span_count() const { return times.empty() ? 0 : times.size() - 1; }

  // Gap area of spans [first, last).
  Area sweep(std::size_t first, std::size_t last, Bytes page_size, bool floor_gaps) const {
    if (first >= last) return 0;
    const auto& jobs = mapping->jobs;
    GapTracker tracker(page_size, floor_gaps);
    const Time t0 = times[first];
    for (const Job& j : jobs)
      if (j.t_start != j.t_end && j.t_start <= t0 && t0 < j.t_end) tracker.insert(j);
    auto ev = std::upper_bound(events.begin(), events.end(), t0,
                               [](Time t, const Event& e) { return t < e.t; });
    Area area = 0;
    for (std::size_t s = first; s < last; ++s) {
      area += static_cast<Area>(tracker.height()) * (times[s + 1] - times[s]);
      if (s + 1 == last) break;
      const Time t = times[s + 1];
      for (; ev != events.end() && ev->t == t; ++ev) {
        if (ev->start) {
          tracker.insert(jobs[ev->job]);
        } else {
          tracker.erase(jobs[ev->job]);
        }
      }
    }
    return area;
  }
};

}  // namespace detail

inline MappingFrag mapping_frag(const MappingInstance& mapping, Bytes page_size, bool floor_gaps = true) {
  const detail::SweepPlan plan(mapping);
  return {mapping.map_start, plan.sweep(0, plan.span_count(), page_size, floor_gaps), job_area(mapping)};
}

// Per-mapping and total fragmentation.  With several workers the spans of
// each mapping are cut into contiguous chunks; every chunk produces its own
// partial sum and the sums are combined once, after all workers finish.
inline FragmentationReport fragmentation(const BinPackInstance& instance, const FragOptions& options = {}) {
  if (!is_power_of_two(options.page_size))
    throw std::invalid_argument("page size " + text::dec(options.page_size) + " is not a power of two");
  std::vector<detail::SweepPlan> plans;
  plans.reserve(instance.mappings.size());
  for (const auto& m : instance.mappings) plans.emplace_back(m);

  struct Chunk {
    std::size_t plan, first, last;
  };
  std::vector<Chunk> chunks;
  const unsigned workers = std::max(1u, options.workers);
  std::size_t total_spans = 0;
  for (const auto& p : plans) total_spans += p.span_count();
  const std::size_t target =
      workers == 1 ? SIZE_MAX : std::max<std::size_t>(256, total_spans / (workers * 8) + 1);
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const std::size_t n = plans[i].span_count();
    for (std::size_t first = 0; first < n;) {
      const std::size_t last = n - first > target ? first + target : n;
      chunks.push_back({i, first, last});
      first = last;
    }
  }

  std::vector<Area> partial(chunks.size(), 0);
  auto run = [&](std::size_t c) {
    const Chunk& ch = chunks[c];
    partial[c] = plans[ch.plan].sweep(ch.first, ch.last, options.page_size, options.floor_gaps);
  };
  if (workers == 1 || chunks.size() <= 1) {
    for (std::size_t c = 0; c < chunks.size(); ++c) run(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    const unsigned n = std::min<std::size_t>(workers, chunks.size());
    for (unsigned w = 0; w < n; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < chunks.size(); c = next++) {
          try {
            run(c);
          } catch (...) {
            if (!failed.exchange(true)) failure = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  FragmentationReport report;
  for (std::size_t i = 0; i < instance.mappings.size(); ++i)
    report.per_mapping.push_back({instance.mappings[i].map_start, 0, job_area(instance.mappings[i])});
  for (std::size_t c = 0; c < chunks.size(); ++c) report.per_mapping[chunks[c].plan].gap_area += partial[c];
  for (const auto& m : report.per_mapping) {
    report.gap_area += m.gap_area;
    report.job_area += m.job_area;
  }
  return report;
}

// F_T with its per-mapping breakdown; fails when there is no job area.
inline FragmentationReport total_frag(const BinPackInstance& instance, const FragOptions& options = {}) {
  FragmentationReport report = fragmentation(instance, options);
  (void)report.ratio();
  return report;
}

// ---------------------------------------------------------------------------
// Rasterizing oracle: one cell per byte per allocated byte of time.

inline constexpr std::uint64_t kMaxOracleCells = 10'000'000;

inline FragmentationReport brute_force_frag(const BinPackInstance& instance, Bytes page_size,
                                            bool floor_gaps = true) {
  struct Grid {
    Address base;
    std::uint64_t height;
    Time t0;
    std::uint64_t width;
  };
  std::vector<Grid> grids;
  std::uint64_t cells = 0;
  for (const auto& m : instance.mappings) {
    Grid g{0, 0, 0, 0};
    if (!m.jobs.empty()) {
      Address lo = UINT64_MAX, hi = 0;
      Time t_lo = UINT64_MAX, t_hi = 0;
      for (const Job& j : m.jobs) {
        lo = std::min(lo, j.address);
        hi = std::max(hi, j.end_address());
        t_lo = std::min(t_lo, j.t_start);
        t_hi = std::max(t_hi, j.t_end);
      }
      g.base = lo / page_size * page_size;
      g.height = hi - g.base;
      g.t0 = t_lo;
      g.width = t_hi - t_lo;
    }
    if (g.height != 0 && g.width > kMaxOracleCells / g.height)
      throw std::length_error("instance too large to rasterize");
    cells += g.height * g.width;
    if (cells > kMaxOracleCells) throw std::length_error("instance too large to rasterize");
    grids.push_back(g);
  }

  FragmentationReport report;
  for (std::size_t i = 0; i < instance.mappings.size(); ++i) {
    const auto& m = instance.mappings[i];
    const Grid& g = grids[i];
    MappingFrag out{m.map_start, 0, 0};
    std::vector<std::uint8_t> cell(g.height * g.width, 0);  // [time][address]
    for (const Job& j : m.jobs)
      for (Time t = j.t_start; t < j.t_end; ++t)
        for (Address a = j.address; a < j.end_address(); ++a) cell[(t - g.t0) * g.height + (a - g.base)] = 1;

    for (std::uint64_t t = 0; t < g.width; ++t) {
      const std::uint8_t* column = &cell[t * g.height];
      for (std::uint64_t page = 0; page < g.height; page += page_size) {
        const std::uint64_t page_end = std::min<std::uint64_t>(page + page_size, g.height);
        // Walk down from the page top; free cells count once a live cell has
        // been seen above them.
        bool roofed = false;
        std::uint64_t pending = 0;  // free cells below the lowest live cell seen so far
        for (std::uint64_t a = page_end; a-- > page;) {
          if (column[a]) {
            ++out.job_area;
            roofed = true;
            out.gap_area += pending;
            pending = 0;
          } else if (roofed) {
            ++pending;
          }
        }
        if (floor_gaps) out.gap_area += pending;
      }
    }
    report.per_mapping.push_back(out);
    report.gap_area += out.gap_area;
    report.job_area += out.job_area;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report file: "map_start,F_mi,L_mi" rows and a TOTAL line.

inline std::string format_ratio(double ratio) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", ratio);
  return buf;
}

inline void write_report(std::ostream& out, const FragmentationReport& report) {
  out << "map_start,F_mi,L_mi\n";
  for (const auto& m : report.per_mapping)
    out << text::hex(m.map_start) << ',' << text::dec128(m.gap_area) << ',' << text::dec128(m.job_area) << '\n';
  out << "TOTAL," << text::dec128(report.gap_area) << ',' << text::dec128(report.job_area) << ','
      << format_ratio(report.ratio()) << '\n';
}

struct ReportSummary {
  FragmentationReport report;
  double ratio = 0;  // as printed on the TOTAL line
};

inline ReportSummary read_report(std::istream& in) {
  ReportSummary out;
  std::string line;
  std::size_t lineno = 1;
  if (!text::next_line(in, line) || line != "map_start,F_mi,L_mi") throw ParseError(1, "", "bad report header");
  bool total = false;
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = text::split(line);
    if (cols[0] == "TOTAL") {
      if (cols.size() != 4) throw ParseError(lineno, "", "TOTAL line needs 4 fields");
      auto f = text::parse_dec128(cols[1]);
      auto l = text::parse_dec128(cols[2]);
      auto r = text::parse_real(cols[3]);
      if (!f || !l || !r) throw ParseError(lineno, "TOTAL", "bad totals");
      out.report.gap_area = *f;
      out.report.job_area = *l;
      out.ratio = *r;
      total = true;
      continue;
    }
    if (cols.size() != 3) throw ParseError(lineno, "", "expected 3 fields");
    auto start = text::parse_hex(cols[0]);
    auto f = text::parse_dec128(cols[1]);
    auto l = text::parse_dec128(cols[2]);
    if (!start) throw ParseError(lineno, "map_start", "bad address");
    if (!f) throw ParseError(lineno, "F_mi", "bad area");
    if (!l) throw ParseError(lineno, "L_mi", "bad area");
    out.report.per_mapping.push_back({*start, *f, *l});
  }
  if (!total) throw ParseError(lineno, "", "missing TOTAL line");
  return out;
}

}  // namespace fragscope
