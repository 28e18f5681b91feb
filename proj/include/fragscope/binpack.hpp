#pragma once

// The 2DBP instance: a placement split into one job subset per mapping, each
// subset ordered by creation time and normalized on its own.

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fragscope/placement.hpp"

namespace fragscope {

inline constexpr Bytes kDefaultPageSize = 4096;

struct MappingInstance {
  Address map_start = 0;
  std::vector<Job> jobs;  // ascending t_start, job_id on ties
  Bytes page_size = kDefaultPageSize;

  friend bool operator==(const MappingInstance&, const MappingInstance&) = default;
};

struct BinPackInstance {
  std::vector<MappingInstance> mappings;
  Bytes page_size = kDefaultPageSize;
  Time total_time = 0;

  std::size_t job_count() const {
    std::size_t n = 0;
    for (const auto& m : mappings) n += m.jobs.size();
    return n;
  }

  friend bool operator==(const BinPackInstance&, const BinPackInstance&) = default;
};

enum class AddressShift {
  // Lowest job moved into the first page; page offsets preserved.
  page_aligned,
  // Lowest job moved to address zero exactly.
  exact,
};

inline bool is_power_of_two(Bytes n) { return std::has_single_bit(n); }

inline void sort_jobs(std::vector<Job>& jobs) {
  std::stable_sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) {
    return a.t_start != b.t_start ? a.t_start < b.t_start : a.job_id < b.job_id;
  });
}

// Shifts times so the earliest job starts at 0 and addresses down by the
// page-aligned (or exact) minimum.
inline void normalize(MappingInstance& m, AddressShift shift = AddressShift::page_aligned) {
  if (m.jobs.empty()) return;
  Time t0 = std::numeric_limits<Time>::max();
  Address a0 = std::numeric_limits<Address>::max();
  for (const Job& j : m.jobs) {
    t0 = std::min(t0, j.t_start);
    a0 = std::min(a0, j.address);
  }
  if (shift == AddressShift::page_aligned) a0 = a0 / m.page_size * m.page_size;
  for (Job& j : m.jobs) {
    j.t_start -= t0;
    j.t_end -= t0;
    j.address -= a0;
  }
}

struct BuildOptions {
  Bytes page_size = kDefaultPageSize;
  bool normalize = true;
  AddressShift shift = AddressShift::page_aligned;
};

inline BinPackInstance build_instance(const Placement& placement, const BuildOptions& options = {}) {
  if (!is_power_of_two(options.page_size))
    throw std::invalid_argument("page size " + text::dec(options.page_size) + " is not a power of two");
  std::map<Address, std::size_t> index;
  BinPackInstance out;
  out.page_size = options.page_size;
  out.total_time = placement.total_time;
  for (const auto& m : placement.mappings) index.emplace(m.start, 0);

  std::map<Address, std::vector<Job>> groups;
  for (const Job& j : placement.jobs) {
    if (!index.contains(j.map_start))
      throw std::invalid_argument("job " + text::dec(j.job_id) + " belongs to unknown mapping " +
                                  text::hex(j.map_start));
    groups[j.map_start].push_back(j);
  }
  for (auto& [start, jobs] : groups) {
    MappingInstance m{start, std::move(jobs), options.page_size};
    sort_jobs(m.jobs);
    if (options.normalize) normalize(m, options.shift);
    out.mappings.push_back(std::move(m));
  }
  return out;
}

inline BinPackInstance build_instance(const Placement& placement, Bytes page_size) {
  return build_instance(placement, BuildOptions{page_size});
}

inline constexpr const char* kManifestName = "manifest.txt";

inline std::string mapping_file_name(const MappingInstance& m) {
  return "mapping_" + text::hex(m.map_start) + ".csv";
}

// Directory layout: manifest.txt plus one placement-format CSV per mapping.
inline void write_instance(const std::filesystem::path& dir, const BinPackInstance& instance) {
  std::filesystem::create_directories(dir);
  // Drop mapping files from an earlier pack so the manifest stays exact.
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.starts_with("mapping_") && e.path().extension() == ".csv") std::filesystem::remove(e.path());
  }
  std::ofstream manifest(dir / kManifestName);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / kManifestName).string());
  manifest << "page_size=" << instance.page_size << '\n';
  manifest << "total_time=" << instance.total_time << '\n';
  for (const auto& m : instance.mappings) {
    const std::string name = mapping_file_name(m);
    manifest << "mapping=" << name << '\n';
    std::ofstream csv(dir / name);
    if (!csv) throw std::runtime_error("cannot write " + (dir / name).string());
    Placement p;
    p.jobs = m.jobs;
    write_placement(csv, p);
  }
}

inline BinPackInstance read_instance(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  std::ifstream manifest(manifest_path);
  if (!manifest) throw std::runtime_error("cannot read " + manifest_path.string());
  BinPackInstance out;
  bool have_page = false, have_time = false;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> files;
  while (text::next_line(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(manifest_path.string() + ": line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "page_size" || key == "total_time") {
      auto v = text::parse_dec(value);
      if (!v) throw std::runtime_error(manifest_path.string() + ": line " + std::to_string(lineno) + ": bad " + key);
      (key == "page_size" ? out.page_size : out.total_time) = *v;
      (key == "page_size" ? have_page : have_time) = true;
    } else if (key == "mapping") {
      files.push_back(value);
    } else {
      throw std::runtime_error(manifest_path.string() + ": line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  if (!have_page || !have_time) throw std::runtime_error(manifest_path.string() + ": missing page_size or total_time");
  if (!is_power_of_two(out.page_size)) throw std::runtime_error(manifest_path.string() + ": page_size not a power of two");

  for (const auto& name : files) {
    std::ifstream csv(dir / name);
    if (!csv) throw std::runtime_error("manifest lists missing mapping file " + (dir / name).string());
    MappingInstance m;
    m.page_size = out.page_size;
    try {
      m.jobs = read_jobs(csv);
    } catch (const ParseError& e) {
      throw std::runtime_error((dir / name).string() + ": " + e.what());
    }
    if (m.jobs.empty()) throw std::runtime_error((dir / name).string() + ": mapping has no jobs");
    m.map_start = m.jobs.front().map_start;
    for (const Job& j : m.jobs)
      if (j.map_start != m.map_start)
        throw std::runtime_error((dir / name).string() + ": job " + text::dec(j.job_id) + " belongs to another mapping");
    out.mappings.push_back(std::move(m));
  }
  // Every CSV in the directory must be accounted for by the manifest.
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".csv") continue;
    const auto name = entry.path().filename().string();
    if (std::find(files.begin(), files.end(), name) == files.end())
      throw std::runtime_error("mapping file " + name + " not listed in manifest");
  }
  return out;
}

}  // namespace fragscope
