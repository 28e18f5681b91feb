#pragma once

// The placement record produced by replaying a trace: one job per allocated
// block, stamped with its lifetime on the allocated-bytes time axis.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "fragscope/text.hpp"
#include "fragscope/trace.hpp"

namespace fragscope {

// Allocated-bytes timestamp.
using Time = std::uint64_t;

struct Job {
  std::uint64_t job_id = 0;
  Bytes block_size = 0;
  Time t_start = 0;
  Time t_end = 0;
  Address address = 0;
  Address map_start = 0;

  Address end_address() const noexcept { return address + block_size; }
  Time duration() const noexcept { return t_end - t_start; }

  friend bool operator==(const Job&, const Job&) = default;
};

struct MappingRange {
  Address start = 0;
  Bytes length = 0;

  Address end() const noexcept { return start + length; }
  bool contains(Address a) const noexcept { return a >= start && a - start < length; }

  friend bool operator==(const MappingRange&, const MappingRange&) = default;
};

struct Placement {
  std::vector<Job> jobs;
  std::vector<MappingRange> mappings;
  Time total_time = 0;

  friend bool operator==(const Placement&, const Placement&) = default;
};

inline constexpr std::string_view kPlacementHeader = "job_id,block_size,t_start,t_end,address,map_start";

inline void write_placement(std::ostream& out, const Placement& p) {
  out << kPlacementHeader << '\n';
  for (const Job& j : p.jobs) {
    out << j.job_id << ',' << j.block_size << ',' << j.t_start << ',' << j.t_end << ','
        << text::hex(j.address) << ',' << text::hex(j.map_start) << '\n';
  }
}

// Reads the job rows only; mappings and total time live in the sidecar.
inline std::vector<Job> read_jobs(std::istream& in) {
  std::vector<Job> jobs;
  std::string line;
  if (!text::next_line(in, line)) throw ParseError(1, "", "empty input, expected header");
  if (line != kPlacementHeader) throw ParseError(1, "", "bad header '" + line + "'");
  std::size_t lineno = 1;
  static constexpr const char* kFields[] = {"job_id", "block_size", "t_start",
                                            "t_end",  "address",    "map_start"};
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = text::split(line);
    if (cols.size() != 6)
      throw ParseError(lineno, "", "expected 6 fields, got " + std::to_string(cols.size()));
    std::uint64_t values[6];
    for (std::size_t i = 0; i < 6; ++i) {
      auto v = i < 4 ? text::parse_dec(cols[i]) : text::parse_hex(cols[i]);
      if (!v) throw ParseError(lineno, kFields[i], "bad value '" + std::string(cols[i]) + "'");
      values[i] = *v;
    }
    Job j{values[0], values[1], values[2], values[3], values[4], values[5]};
    if (j.t_end < j.t_start) throw ParseError(lineno, "t_end", "t_end precedes t_start");
    jobs.push_back(j);
  }
  return jobs;
}

// Sidecar: "total_time=<n>" then one "mapping=<hex start>,<length>" per line.
inline void write_placement_meta(std::ostream& out, const Placement& p) {
  out << "total_time=" << p.total_time << '\n';
  for (const auto& m : p.mappings) out << "mapping=" << text::hex(m.start) << ',' << m.length << '\n';
}

inline void read_placement_meta(std::istream& in, Placement& p) {
  std::string line;
  std::size_t lineno = 0;
  p.mappings.clear();
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "", "expected key=value");
    const std::string_view key = std::string_view(line).substr(0, eq);
    const std::string_view value = std::string_view(line).substr(eq + 1);
    if (key == "total_time") {
      auto v = text::parse_dec(value);
      if (!v) throw ParseError(lineno, "total_time", "bad value");
      p.total_time = *v;
    } else if (key == "mapping") {
      const auto parts = text::split(value);
      auto start = parts.size() == 2 ? text::parse_hex(parts[0]) : std::nullopt;
      auto length = parts.size() == 2 ? text::parse_dec(parts[1]) : std::nullopt;
      if (!start || !length) throw ParseError(lineno, "mapping", "expected <hex start>,<length>");
      p.mappings.push_back({*start, *length});
    } else {
      throw ParseError(lineno, std::string(key), "unknown key");
    }
  }
}

// Mapping table and total time recovered from the jobs alone, used when a
// placement file comes without its sidecar.  total_time becomes the latest
// t_end, which is exact whenever at least one job leaked.
inline void infer_placement_meta(Placement& p) {
  std::map<Address, Address> extent;
  p.total_time = 0;
  for (const Job& j : p.jobs) {
    auto& top = extent[j.map_start];
    top = std::max({top, j.end_address(), j.map_start});
    p.total_time = std::max(p.total_time, j.t_end);
  }
  p.mappings.clear();
  for (const auto& [start, top] : extent) p.mappings.push_back({start, top - start});
}

inline Placement read_placement(std::istream& csv, std::istream* meta = nullptr) {
  Placement p;
  p.jobs = read_jobs(csv);
  if (meta) {
    read_placement_meta(*meta, p);
  } else {
    infer_placement_meta(p);
  }
  return p;
}

inline std::filesystem::path placement_meta_path(const std::filesystem::path& csv) {
  auto meta = csv;
  meta += ".meta";
  return meta;
}

inline void save_placement(const std::filesystem::path& path, const Placement& p) {
  std::ofstream csv(path);
  if (!csv) throw std::runtime_error("cannot write " + path.string());
  write_placement(csv, p);
  std::ofstream meta(placement_meta_path(path));
  if (!meta) throw std::runtime_error("cannot write " + placement_meta_path(path).string());
  write_placement_meta(meta, p);
}

inline Placement load_placement(const std::filesystem::path& path) {
  std::ifstream csv(path);
  if (!csv) throw std::runtime_error("cannot read " + path.string());
  std::ifstream meta(placement_meta_path(path));
  try {
    return read_placement(csv, meta ? &meta : nullptr);
  } catch (const ParseError& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace fragscope
