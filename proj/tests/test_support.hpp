#pragma once

// Fixtures and generators shared by the test binaries.

#include <random>
#include <vector>

#include "fragscope/fragscope.hpp"

namespace fragscope::testing {

// The six-request example: A(1), B(2), free A, C(3), free B, free C, with the
// allocator placing A at 1, B at 3 and C at 0.
inline std::vector<ElementaryRequest> worked_requests() {
  return {
      ElementaryRequest::malloc(1, 0xa0), ElementaryRequest::malloc(2, 0xb0), ElementaryRequest::free(0xa0),
      ElementaryRequest::malloc(3, 0xc0), ElementaryRequest::free(0xb0),      ElementaryRequest::free(0xc0),
  };
}

inline std::vector<RawRequest> worked_trace() {
  auto m = [](Address out, Bytes size) {
    return RawRequest{RequestType::malloc, std::nullopt, out, size, 1};
  };
  auto f = [](Address in) {
    return RawRequest{RequestType::free, in, std::nullopt, std::nullopt, std::nullopt};
  };
  return {m(0xa0, 1), m(0xb0, 2), f(0xa0), m(0xc0, 3), f(0xb0), f(0xc0)};
}

inline ScriptedBackend worked_backend() { return ScriptedBackend({1, 3, 0}, {0, 4096}); }

inline Placement worked_placement() {
  auto backend = worked_backend();
  const auto requests = worked_requests();
  return simulate(requests, backend).placement;
}

// Random mapping whose jobs never overlap in address while alive together.
// Rejection sampling against every previously accepted job.
inline MappingInstance random_mapping(std::mt19937_64& rng, std::size_t max_jobs, Address address_limit,
                                      Time time_limit, Bytes page_size, Address map_start = 0) {
  MappingInstance m;
  m.map_start = map_start;
  m.page_size = page_size;
  std::uniform_int_distribution<std::size_t> count(0, max_jobs);
  const std::size_t n = count(rng);
  std::uniform_int_distribution<Time> time(0, time_limit);
  std::uniform_int_distribution<Address> addr(0, address_limit - 1);
  std::uniform_int_distribution<int> coin(0, 9);
  for (std::size_t attempt = 0; m.jobs.size() < n && attempt < n * 40; ++attempt) {
    Job j;
    j.job_id = m.jobs.size();
    Time a = time(rng), b = time(rng);
    if (a > b) std::swap(a, b);
    if (coin(rng) == 0) b = a;  // occasional zero-duration job
    j.t_start = a;
    j.t_end = b;
    j.address = addr(rng);
    const Bytes room = address_limit - j.address;
    // Mostly small blocks, sometimes large ones crossing pages.
    const Bytes cap = coin(rng) < 2 ? room : std::min<Bytes>(room, 64);
    j.block_size = std::uniform_int_distribution<Bytes>(0, cap)(rng);
    j.map_start = map_start;
    bool clash = false;
    for (const Job& o : m.jobs) {
      const bool time_overlap = j.t_start < o.t_end && o.t_start < j.t_end;
      const bool addr_overlap = j.address < o.end_address() && o.address < j.end_address();
      if (time_overlap && addr_overlap) {
        clash = true;
        break;
      }
    }
    if (!clash) m.jobs.push_back(j);
  }
  sort_jobs(m.jobs);
  return m;
}

inline BinPackInstance random_instance(std::mt19937_64& rng, std::size_t max_mappings, std::size_t max_jobs,
                                       Address address_limit, Time time_limit, Bytes page_size) {
  BinPackInstance inst;
  inst.page_size = page_size;
  const std::size_t k = std::uniform_int_distribution<std::size_t>(1, max_mappings)(rng);
  for (std::size_t i = 0; i < k; ++i) {
    inst.mappings.push_back(random_mapping(rng, max_jobs, address_limit, time_limit, page_size, 0x1000000 * (i + 1)));
    for (const Job& j : inst.mappings.back().jobs) inst.total_time = std::max(inst.total_time, j.t_end);
  }
  return inst;
}

// Random malloc/free stream with a bounded live set.  Origins are unique.
inline std::vector<ElementaryRequest> random_requests(std::mt19937_64& rng, std::size_t mallocs,
                                                      std::size_t max_live, Bytes max_size) {
  std::vector<ElementaryRequest> out;
  std::vector<Address> live;
  Address next_origin = 0x1000;
  std::uniform_int_distribution<Bytes> size(0, max_size);
  std::size_t issued = 0;
  while (issued < mallocs) {
    const bool do_free = !live.empty() && (live.size() >= max_live || rng() % 2 == 0);
    if (do_free) {
      const std::size_t k = rng() % live.size();
      out.push_back(ElementaryRequest::free(live[k]));
      live[k] = live.back();
      live.pop_back();
    } else {
      out.push_back(ElementaryRequest::malloc(size(rng), next_origin));
      live.push_back(next_origin);
      next_origin += 16;
      ++issued;
    }
  }
  // Leave a random subset leaked.
  for (Address a : live)
    if (rng() % 3 != 0) out.push_back(ElementaryRequest::free(a));
  return out;
}

}  // namespace fragscope::testing
