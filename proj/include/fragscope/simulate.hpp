#pragma once

// Replays an elementary request stream through a placement backend.
//
// Time is measured in allocated bytes: a Malloc stamps its job with the
// current time and then advances the clock by the *requested* size; a Free
// stamps t_end and leaves the clock alone.  Jobs still live after the last
// request are leaks and end at total_time.

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fragscope/backend.hpp"
#include "fragscope/placement.hpp"
#include "fragscope/trace.hpp"

namespace fragscope {

struct SimulateOptions {
  // Skip frees whose target is unknown instead of failing.
  bool lenient = false;
};

struct SimulationStats {
  std::size_t requests = 0;
  std::size_t jobs = 0;
  std::size_t leaks = 0;
  std::size_t skipped_frees = 0;
};

struct SimulationResult {
  Placement placement;
  SimulationStats stats;
};

// Fatal replay error.  `partial()` holds the jobs placed before the failure,
// with unfinished ones closed at the time reached.
class SimulationError : public std::runtime_error {
 public:
  SimulationError(std::size_t request_index, const std::string& what, Placement partial)
      : std::runtime_error("request " + std::to_string(request_index) + ": " + what),
        index_(request_index),
        partial_(std::move(partial)) {}

  std::size_t request_index() const noexcept { return index_; }
  const Placement& partial() const noexcept { return partial_; }

 private:
  std::size_t index_;
  Placement partial_;
};

namespace detail {

struct LiveEntry {
  std::size_t job;
  Allocation allocation;
};

inline void close_live(Placement& p, std::unordered_map<Address, LiveEntry>& live,
                       std::vector<LiveEntry>& anonymous, Time now) {
  for (auto& [origin, entry] : live) p.jobs[entry.job].t_end = now;
  for (auto& entry : anonymous) p.jobs[entry.job].t_end = now;
}

// Keeps only mappings that own at least one job, in first-use order.
inline std::vector<MappingRange> used_mappings(const std::vector<Job>& jobs,
                                               const std::vector<MappingRange>& table) {
  std::vector<MappingRange> out;
  for (const Job& j : jobs) {
    bool seen = false;
    for (const auto& m : out) seen = seen || m.start == j.map_start;
    if (seen) continue;
    for (const auto& m : table) {
      if (m.start == j.map_start) {
        out.push_back(m);
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

template <PlacementBackend Backend>
SimulationResult simulate(std::span<const ElementaryRequest> requests, Backend& backend,
                          const SimulateOptions& options = {}) {
  SimulationResult result;
  Placement& p = result.placement;
  std::unordered_map<Address, detail::LiveEntry> live;  // keyed by origin
  std::vector<detail::LiveEntry> anonymous;             // mallocs without an origin never get freed
  Time now = 0;

  auto fail = [&](std::size_t index, const std::string& what) {
    Placement partial = p;
    std::unordered_map<Address, detail::LiveEntry> live_copy = live;
    detail::close_live(partial, live_copy, anonymous, now);
    partial.total_time = now;
    partial.mappings = detail::used_mappings(partial.jobs, backend.mappings());
    throw SimulationError(index, what, std::move(partial));
  };

  for (std::size_t i = 0; i < requests.size(); ++i) {
    const ElementaryRequest& r = requests[i];
    if (r.is_malloc()) {
      if (r.origin && *r.origin != 0 && live.contains(*r.origin))
        fail(i, "malloc returned live address " + text::hex(*r.origin) + " twice");
      Allocation a;
      try {
        a = backend.allocate(r.size, r.origin);
      } catch (const BackendError& e) {
        fail(i, e.what());
      }
      if (a.extent < r.size) fail(i, "backend returned an extent below the requested size");
      const std::size_t job = p.jobs.size();
      p.jobs.push_back(Job{job, a.extent, now, now, a.address, a.map_start});
      if (now + r.size < now) fail(i, "allocated-bytes clock overflow");
      now += r.size;
      if (r.origin && *r.origin != 0) {
        live.emplace(*r.origin, detail::LiveEntry{job, a});
      } else {
        anonymous.push_back({job, a});
      }
    } else {
      auto it = live.find(r.target);
      if (it == live.end()) {
        if (options.lenient) {
          ++result.stats.skipped_frees;
          continue;
        }
        fail(i, "free of unknown or already freed address " + text::hex(r.target));
      }
      p.jobs[it->second.job].t_end = now;
      try {
        backend.release(it->second.allocation);
      } catch (const BackendError& e) {
        fail(i, e.what());
      }
      live.erase(it);
    }
  }

  result.stats.requests = requests.size();
  result.stats.jobs = p.jobs.size();
  result.stats.leaks = live.size() + anonymous.size();
  detail::close_live(p, live, anonymous, now);
  p.total_time = now;
  p.mappings = detail::used_mappings(p.jobs, backend.mappings());
  return result;
}

// Checks the placement invariants: every job inside a declared mapping,
// t_end >= t_start, and no two jobs of a mapping overlapping in both address
// and time.  Returns an empty string when the placement is consistent.
inline std::string check_placement(const Placement& p) {
  std::unordered_map<Address, MappingRange> table;
  for (const auto& m : p.mappings) table.emplace(m.start, m);
  std::unordered_map<Address, std::vector<const Job*>> by_map;
  for (const Job& j : p.jobs) {
    if (j.t_end < j.t_start) return "job " + text::dec(j.job_id) + " ends before it starts";
    if (j.t_end > p.total_time) return "job " + text::dec(j.job_id) + " ends after total_time";
    auto m = table.find(j.map_start);
    if (m == table.end()) return "job " + text::dec(j.job_id) + " has an undeclared mapping";
    if (j.address < m->second.start || j.end_address() > m->second.end())
      return "job " + text::dec(j.job_id) + " lies outside its mapping";
    by_map[j.map_start].push_back(&j);
  }
  // Sweep each mapping by time; the live set is checked for address overlap.
  for (auto& [start, jobs] : by_map) {
    struct Event {
      Time t;
      int kind;  // 0 = end, 1 = start
      const Job* job;
    };
    std::vector<Event> events;
    for (const Job* j : jobs) {
      if (j->t_start == j->t_end || j->block_size == 0) continue;
      events.push_back({j->t_start, 1, j});
      events.push_back({j->t_end, 0, j});
    }
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
      return a.t != b.t ? a.t < b.t : a.kind < b.kind;
    });
    std::map<Address, const Job*> live;
    for (const Event& e : events) {
      if (e.kind == 0) {
        live.erase(e.job->address);
        continue;
      }
      auto next = live.lower_bound(e.job->address);
      if (next != live.end() && next->first < e.job->end_address())
        return "jobs " + text::dec(e.job->job_id) + " and " + text::dec(next->second->job_id) + " overlap";
      if (next != live.begin()) {
        auto prev = std::prev(next);
        if (prev->second->end_address() > e.job->address)
          return "jobs " + text::dec(e.job->job_id) + " and " + text::dec(prev->second->job_id) + " overlap";
      }
      live.emplace(e.job->address, e.job);
    }
  }
  return {};
}

}  // namespace fragscope
