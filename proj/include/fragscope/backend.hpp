#pragma once

// Placement backends: deterministic model allocators standing in for a real
// malloc so a trace can be replayed anywhere.  Every backend satisfies
// PlacementBackend; simulate() is written against that concept only.

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fragscope/placement.hpp"

namespace fragscope {

// What a backend hands back for one allocation.  `origin` is the address the
// traced program originally received; live backends key their handles by it.
struct Allocation {
  Address address = 0;
  Bytes extent = 0;
  Address map_start = 0;
  std::optional<Address> origin;
};

// Allocation failure, arena exhaustion or a broken live connection.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename B>
concept PlacementBackend = requires(B& b, Bytes size, std::optional<Address> origin,
                                    const Allocation& a) {
  { b.allocate(size, origin) } -> std::same_as<Allocation>;
  { b.release(a) } -> std::same_as<void>;
  { b.mappings() } -> std::convertible_to<std::vector<MappingRange>>;
};

inline constexpr Address kDefaultArenaBase = 0x10000000;
inline constexpr Bytes kModelPageSize = 4096;

enum class FitPolicy { first, best, next };

// Address-ordered free list over a single synthetic arena.  Adjacent free
// extents are coalesced on release.
class FreeListBackend {
 public:
  FreeListBackend(FitPolicy policy, Bytes capacity, Bytes header_bytes = 0,
                  Address base = kDefaultArenaBase)
      : policy_(policy), base_(base), capacity_(capacity), header_(header_bytes), rover_(base) {
    if (capacity_ > 0) insert_free(base_, capacity_);
  }

  Allocation allocate(Bytes size, std::optional<Address> origin = std::nullopt) {
    const Bytes extent = size + header_;
    if (extent < size) throw BackendError("request size overflow");
    if (extent == 0) {
      // Zero-extent blocks occupy nothing; park them at the first free byte.
      const Address at = free_.empty() ? base_ + capacity_ : free_.begin()->first;
      return {at, 0, base_, origin};
    }
    auto hole = find(extent);
    if (hole == free_.end())
      throw BackendError("arena exhausted: no free extent of " + text::dec(extent) + " bytes");
    const Address at = hole->first;
    const Bytes len = hole->second;
    erase_free(hole);
    if (len > extent) insert_free(at + extent, len - extent);
    rover_ = at + extent;
    return {at, extent, base_, origin};
  }

  void release(const Allocation& a) {
    if (a.extent == 0) return;
    Address start = a.address;
    Bytes len = a.extent;
    auto next = free_.lower_bound(start);
    if (next != free_.begin()) {
      auto prev = std::prev(next);
      if (prev->first + prev->second > start)
        throw BackendError("release of a block overlapping free space at " + text::hex(start));
      if (prev->first + prev->second == start) {
        start = prev->first;
        len += prev->second;
        erase_free(prev);
      }
    }
    next = free_.lower_bound(a.address);
    if (next != free_.end() && next->first < a.address + a.extent)
      throw BackendError("release of a block overlapping free space at " + text::hex(a.address));
    if (next != free_.end() && next->first == a.address + a.extent) {
      len += next->second;
      erase_free(next);
    }
    insert_free(start, len);
  }

  std::vector<MappingRange> mappings() const { return {{base_, capacity_}}; }

  std::size_t free_extent_count() const noexcept { return free_.size(); }

 private:
  using FreeMap = std::map<Address, Bytes>;

  FreeMap::iterator find(Bytes extent) {
    switch (policy_) {
      case FitPolicy::first:
        for (auto it = free_.begin(); it != free_.end(); ++it)
          if (it->second >= extent) return it;
        return free_.end();
      case FitPolicy::best: {
        auto it = by_size_.lower_bound({extent, 0});
        return it == by_size_.end() ? free_.end() : free_.find(it->second);
      }
      case FitPolicy::next: {
        if (free_.empty()) return free_.end();
        // Resume from the extent holding the rover, or the first one above it.
        auto start = free_.upper_bound(rover_);
        if (start != free_.begin()) {
          auto prev = std::prev(start);
          if (prev->first + prev->second > rover_) start = prev;
        }
        if (start == free_.end()) start = free_.begin();
        auto it = start;
        do {
          if (it->second >= extent) return it;
          if (++it == free_.end()) it = free_.begin();
        } while (it != start);
        return free_.end();
      }
    }
    return free_.end();
  }

  void insert_free(Address start, Bytes len) {
    free_.emplace(start, len);
    by_size_.emplace(len, start);
  }

  void erase_free(FreeMap::iterator it) {
    by_size_.erase({it->second, it->first});
    free_.erase(it);
  }

  FitPolicy policy_;
  Address base_;
  Bytes capacity_;
  Bytes header_;
  Address rover_;
  FreeMap free_;
  std::set<std::pair<Bytes, Address>> by_size_;  // (length, start): best fit, lowest address on ties
};

inline FreeListBackend first_fit_backend(std::uint64_t arena_page_count, Bytes header_bytes = 0) {
  return {FitPolicy::first, arena_page_count * kModelPageSize, header_bytes};
}
inline FreeListBackend best_fit_backend(std::uint64_t arena_page_count, Bytes header_bytes = 0) {
  return {FitPolicy::best, arena_page_count * kModelPageSize, header_bytes};
}
inline FreeListBackend next_fit_backend(std::uint64_t arena_page_count, Bytes header_bytes = 0) {
  return {FitPolicy::next, arena_page_count * kModelPageSize, header_bytes};
}

// Size-class allocator: each class owns one synthetic mapping carved into
// equal slots, served by bump allocation with LIFO reuse of freed slots.
// Requests above the largest class go to a page-granular first-fit mapping.
class SegregatedFitBackend {
 public:
  SegregatedFitBackend(std::vector<Bytes> size_classes, std::uint64_t pages_per_class,
                       Bytes header_bytes = 0, std::uint64_t large_pages = 0,
                       Address base = kDefaultArenaBase)
      : classes_(std::move(size_classes)), header_(header_bytes) {
    if (classes_.empty()) throw std::invalid_argument("segregated fit needs at least one size class");
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      if (classes_[i] == 0 || (i > 0 && classes_[i] <= classes_[i - 1]))
        throw std::invalid_argument("size classes must be positive and strictly ascending");
    }
    const Bytes class_bytes = pages_per_class * kModelPageSize;
    Address next = base;
    for (Bytes c : classes_) {
      bins_.push_back(Bin{next, class_bytes, c + header_, next, {}});
      next += round_up(class_bytes == 0 ? kModelPageSize : class_bytes);
    }
    const Bytes large_bytes = large_pages == 0 ? pages_per_class * kModelPageSize : large_pages * kModelPageSize;
    large_.emplace(FitPolicy::first, large_bytes, 0, next);
    large_base_ = next;
  }

  Allocation allocate(Bytes size, std::optional<Address> origin = std::nullopt) {
    const auto cls = std::lower_bound(classes_.begin(), classes_.end(), size);
    if (cls == classes_.end()) {
      const Bytes rounded = round_up(size + header_);
      Allocation a = large_->allocate(rounded, origin);
      return a;
    }
    Bin& bin = bins_[static_cast<std::size_t>(cls - classes_.begin())];
    Address at;
    if (!bin.free_slots.empty()) {
      at = bin.free_slots.back();
      bin.free_slots.pop_back();
    } else {
      if (bin.bump + bin.slot > bin.start + bin.capacity)
        throw BackendError("size class " + text::dec(*cls) + " arena exhausted");
      at = bin.bump;
      bin.bump += bin.slot;
    }
    return {at, bin.slot, bin.start, origin};
  }

  void release(const Allocation& a) {
    if (a.map_start == large_base_) {
      large_->release(a);
      return;
    }
    for (Bin& bin : bins_) {
      if (bin.start == a.map_start) {
        bin.free_slots.push_back(a.address);
        return;
      }
    }
    throw BackendError("release of unknown block " + text::hex(a.address));
  }

  std::vector<MappingRange> mappings() const {
    std::vector<MappingRange> out;
    for (const Bin& bin : bins_) out.push_back({bin.start, bin.capacity});
    for (const auto& m : large_->mappings()) out.push_back(m);
    return out;
  }

  // Extent a request of `size` bytes receives.
  Bytes extent_for(Bytes size) const {
    const auto cls = std::lower_bound(classes_.begin(), classes_.end(), size);
    return cls == classes_.end() ? round_up(size + header_) : *cls + header_;
  }

 private:
  struct Bin {
    Address start;
    Bytes capacity;
    Bytes slot;
    Address bump;
    std::vector<Address> free_slots;
  };

  static Bytes round_up(Bytes n) { return (n + kModelPageSize - 1) / kModelPageSize * kModelPageSize; }

  std::vector<Bytes> classes_;
  Bytes header_;
  std::vector<Bin> bins_;
  std::optional<FreeListBackend> large_;
  Address large_base_ = 0;
};

inline SegregatedFitBackend segregated_fit_backend(std::vector<Bytes> size_classes,
                                                   std::uint64_t pages_per_class,
                                                   Bytes header_bytes = 0) {
  return {std::move(size_classes), pages_per_class, header_bytes};
}

// Replays a fixed list of addresses, one per allocation, inside a single
// mapping.  Used to pin a placement exactly, e.g. for hand-worked examples.
class ScriptedBackend {
 public:
  ScriptedBackend(std::vector<Address> addresses, MappingRange mapping)
      : addresses_(std::move(addresses)), mapping_(mapping) {}

  Allocation allocate(Bytes size, std::optional<Address> origin = std::nullopt) {
    if (next_ >= addresses_.size()) throw BackendError("scripted backend ran out of addresses");
    const Address at = addresses_[next_++];
    if (at < mapping_.start || at + size > mapping_.end())
      throw BackendError("scripted address " + text::hex(at) + " outside its mapping");
    return {at, size, mapping_.start, origin};
  }

  void release(const Allocation&) {}

  std::vector<MappingRange> mappings() const { return {mapping_}; }

 private:
  std::vector<Address> addresses_;
  MappingRange mapping_;
  std::size_t next_ = 0;
};

static_assert(PlacementBackend<FreeListBackend>);
static_assert(PlacementBackend<SegregatedFitBackend>);
static_assert(PlacementBackend<ScriptedBackend>);

}  // namespace fragscope
