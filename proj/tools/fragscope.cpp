// fragscope: trace -> simulate -> pack -> frag -> study.
// Every stage reads and writes files so any of them can be re-run alone.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include "CLI11.hpp"
#include "fragscope/fragscope.hpp"

namespace fs = std::filesystem;
using namespace fragscope;

namespace {

constexpr const char* kShimEnv = "FRAGSCOPE_SHIM";
constexpr const char* kTraceFileEnv = "FRAGSCOPE_TRACE_FILE";
constexpr const char* kServerEnv = "FRAGSCOPE_SIM_SERVER";

// Error already carrying its file context; printed as is.
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw StageError("cannot read " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw StageError("cannot write " + path.string());
  return out;
}

void check_page_size(Bytes page) {
  if (!is_power_of_two(page)) throw StageError("page size " + std::to_string(page) + " is not a power of two");
}

// ---------------------------------------------------------------------------
// trace

struct TraceArgs {
  std::string shim;
  std::string output = "trace.csv";
  std::vector<std::string> program;
};

int cmd_trace(const TraceArgs& a) {
#ifndef __linux__
  (void)a;
  throw StageError("tracing needs a Linux host; run `fragscope simulate` on a trace captured elsewhere");
#else
  std::string shim = a.shim;
  if (shim.empty()) {
    const char* env = std::getenv(kShimEnv);
    shim = env ? env : "";
  }
  if (shim.empty() || !fs::exists(shim)) {
    throw StageError(std::string("tracing shim not found") + (shim.empty() ? "" : " at " + shim) +
                     "; build it and point " + kShimEnv + " (or --shim) at the shared object, "
                     "or skip tracing and run `fragscope simulate` on an existing trace CSV");
  }
  if (a.program.empty()) throw StageError("no program to trace");
  const fs::path out = fs::absolute(a.output);
  const pid_t pid = ::fork();
  if (pid < 0) throw StageError("fork failed");
  if (pid == 0) {
    ::setenv("LD_PRELOAD", fs::absolute(shim).c_str(), 1);
    ::setenv(kTraceFileEnv, out.c_str(), 1);
    std::vector<char*> argv;
    for (const auto& s : a.program) argv.push_back(const_cast<char*>(s.c_str()));
    argv.push_back(nullptr);
    ::execvp(argv[0], argv.data());
    std::perror(argv[0]);
    ::_exit(127);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) == 127) throw StageError("traced program failed to run");
  std::cout << "trace written to " << out.string() << " (program exit " << WEXITSTATUS(status) << ")\n";
  return 0;
#endif
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string trace;
  std::string output = "placement.csv";
  std::string backend = "first_fit";
  std::vector<Bytes> classes;
  Bytes header_bytes = 0;
  std::uint64_t arena_pages = 0;
  bool lenient = false;
  std::string server;
};

std::vector<Bytes> default_classes() {
  std::vector<Bytes> out;
  for (Bytes c = 8; c <= 2048; c *= 2) out.push_back(c);
  return out;
}

// Arena large enough for every request to be live at once.
std::uint64_t auto_arena_pages(std::span<const ElementaryRequest> reqs, Bytes header, Bytes slack) {
  unsigned __int128 bytes = 0;
  for (const auto& r : reqs)
    if (r.is_malloc()) bytes += r.size + header + slack;
  const unsigned __int128 pages = bytes / kModelPageSize + 1;
  if (pages > (std::uint64_t(1) << 40)) throw StageError("trace too large for a model arena");
  return static_cast<std::uint64_t>(pages);
}

template <typename Backend>
SimulationResult run_backend(std::span<const ElementaryRequest> reqs, Backend& backend, const SimulateArgs& a) {
  return simulate(reqs, backend, {.lenient = a.lenient});
}

SimulationResult dispatch_simulation(std::span<const ElementaryRequest> reqs, const SimulateArgs& a) {
  if (a.backend == "first_fit" || a.backend == "best_fit" || a.backend == "next_fit") {
    const auto pages = a.arena_pages ? a.arena_pages : auto_arena_pages(reqs, a.header_bytes, 0);
    const FitPolicy policy = a.backend == "first_fit" ? FitPolicy::first
                             : a.backend == "best_fit" ? FitPolicy::best
                                                       : FitPolicy::next;
    FreeListBackend backend(policy, pages * kModelPageSize, a.header_bytes);
    return run_backend(reqs, backend, a);
  }
  if (a.backend == "segregated_fit") {
    auto classes = a.classes.empty() ? default_classes() : a.classes;
    const auto pages = a.arena_pages ? a.arena_pages : auto_arena_pages(reqs, a.header_bytes, kModelPageSize);
    SegregatedFitBackend backend(std::move(classes), pages, a.header_bytes);
    return run_backend(reqs, backend, a);
  }
  if (a.backend == "live") {
    std::string server = a.server;
    if (server.empty()) {
      const char* env = std::getenv(kServerEnv);
      server = env ? env : "";
    }
    if (server.empty()) throw StageError(std::string("live backend needs --server or ") + kServerEnv);
    live::LiveBackend backend(live::Connection::spawn({server}), a.header_bytes);
    auto result = run_backend(reqs, backend, a);
    backend.finish();
    return result;
  }
  throw StageError("unknown backend '" + a.backend + "'");
}

int cmd_simulate(const SimulateArgs& a) {
  auto in = open_in(a.trace);
  std::vector<RawRequest> raw;
  try {
    raw = parse_trace(in);
  } catch (const ParseError& e) {
    throw StageError(a.trace + ": " + e.what());
  }
  UnpackedTrace unpacked;
  try {
    unpacked = unpack_all(raw);
  } catch (const TraceError& e) {
    throw StageError(a.trace + ": " + e.what());
  }
  for (const auto& w : unpacked.warnings) std::cerr << a.trace << ":" << w.line << ": warning: " << w.message << '\n';
  try {
    const auto result = dispatch_simulation(unpacked.requests, a);
    save_placement(a.output, result.placement);
    std::cout << "requests " << raw.size() << " elementary " << result.stats.requests << " jobs "
              << result.stats.jobs << " leaks " << result.stats.leaks;
    if (a.lenient) std::cout << " skipped_frees " << result.stats.skipped_frees;
    std::cout << '\n';
    return 0;
  } catch (const SimulationError& e) {
    const std::string partial = a.output + ".partial";
    save_placement(partial, e.partial());
    throw StageError(a.trace + ": elementary " + e.what() + " (partial placement in " + partial + ")");
  } catch (const std::invalid_argument& e) {
    throw StageError(e.what());
  }
}

// ---------------------------------------------------------------------------
// pack

struct PackArgs {
  std::string placement;
  std::string output = "instance";
  Bytes page_size = kDefaultPageSize;
  bool exact_normalize = false;
};

int cmd_pack(const PackArgs& a) {
  check_page_size(a.page_size);
  const Placement p = load_placement(a.placement);
  BinPackInstance inst;
  try {
    inst = build_instance(p, {.page_size = a.page_size,
                              .shift = a.exact_normalize ? AddressShift::exact : AddressShift::page_aligned});
  } catch (const std::invalid_argument& e) {
    throw StageError(a.placement + ": " + e.what());
  }
  write_instance(a.output, inst);
  std::cout << "mappings " << inst.mappings.size() << " jobs " << inst.job_count() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// frag

struct FragArgs {
  std::string instance;
  std::string output;
  std::string rects;
  Bytes page_size = 0;
  unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  bool no_floor_gaps = false;
  bool oracle = false;
};

// Job rectangles for external plotting: x is allocated-bytes time, y address.
void write_rects(const fs::path& path, const BinPackInstance& inst) {
  auto out = open_out(path);
  out << "map_start,job_id,x0,x1,y0,y1\n";
  for (const auto& m : inst.mappings)
    for (const auto& j : m.jobs)
      out << text::hex(m.map_start) << ',' << j.job_id << ',' << j.t_start << ',' << j.t_end << ',' << j.address
          << ',' << j.end_address() << '\n';
}

int cmd_frag(const FragArgs& a) {
  BinPackInstance inst = read_instance(a.instance);
  const Bytes page = a.page_size ? a.page_size : inst.page_size;
  check_page_size(page);
  FragmentationReport report;
  try {
    report = total_frag(inst, {.page_size = page, .floor_gaps = !a.no_floor_gaps, .workers = a.workers});
  } catch (const std::invalid_argument& e) {
    throw StageError(a.instance + ": " + e.what());
  }
  if (a.oracle) {
    const auto check = brute_force_frag(inst, page, !a.no_floor_gaps);
    if (check.per_mapping != report.per_mapping)
      throw StageError(a.instance + ": sweep and rasterization oracle disagree");
    std::cerr << "oracle agrees\n";
  }
  if (!a.rects.empty()) write_rects(a.rects, inst);
  if (a.output.empty()) {
    write_report(std::cout, report);
  } else {
    auto out = open_out(a.output);
    write_report(out, report);
    std::cout << "TOTAL," << text::dec128(report.gap_area) << ',' << text::dec128(report.job_area) << ','
              << format_ratio(report.ratio()) << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// study

struct StudyArgs {
  std::string index;
  std::string rss;
  std::string output = "study";
  double threshold = analysis::kStrongCorrelation;
};

int cmd_study(const StudyArgs& a) {
  using namespace analysis;
  auto index_in = open_in(a.index);
  std::vector<IndexRow> index;
  try {
    index = read_study_index(index_in);
  } catch (const ParseError& e) {
    throw StageError(a.index + ": " + e.what());
  }
  const fs::path base = fs::path(a.index).parent_path();
  std::vector<FragEntry> frag;
  for (auto& row : index) {
    const fs::path report = fs::path(row.report).is_absolute() ? fs::path(row.report) : base / row.report;
    auto in = open_in(report);
    try {
      const auto summary = read_report(in);
      row.entry.frag = summary.report.job_area == 0 ? summary.ratio : summary.report.ratio();
    } catch (const ParseError& e) {
      throw StageError(report.string() + ": " + e.what());
    }
    frag.push_back(row.entry);
  }
  auto rss_in = open_in(a.rss);
  std::vector<RssSample> samples;
  try {
    samples = read_rss_samples(rss_in);
  } catch (const ParseError& e) {
    throw StageError(a.rss + ": " + e.what());
  }
  const auto rss = summarize_all(samples);
  const auto rows = correlate(frag, rss, a.threshold);
  const fs::path dir = a.output;
  fs::create_directories(dir);
  {
    auto out = open_out(dir / "study.csv");
    write_study(out, rows);
  }
  {
    auto out = open_out(dir / "scatter.csv");
    emit_scatter(out, scatter_points(frag, rss));
  }
  {
    auto out = open_out(dir / "heatmap.csv");
    emit_heatmap(out, build_heatmap(frag, rss));
  }
  std::size_t strong = 0;
  for (const auto& r : rows) strong += r.strong;
  std::cout << "workloads " << rows.size() << " strong " << strong << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heap fragmentation from allocation traces"};
  app.require_subcommand(1);

  TraceArgs trace;
  auto* t = app.add_subcommand("trace", "Run a program under the tracing shim");
  t->add_option("--shim", trace.shim, std::string("Shim shared object (default: $") + kShimEnv + ")");
  t->add_option("-o,--output", trace.output, "Trace CSV to write");
  t->add_option("program", trace.program, "Program and arguments")->required();
  t->prefix_command();

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Replay a trace against an allocator backend");
  s->add_option("trace", sim.trace, "Trace CSV")->required();
  s->add_option("-o,--output", sim.output, "Placement CSV to write");
  s->add_option("--backend", sim.backend, "Allocator backend")
      ->check(CLI::IsMember({"first_fit", "best_fit", "next_fit", "segregated_fit", "live"}));
  s->add_option("--classes", sim.classes, "Size classes for segregated_fit")->delimiter(',');
  s->add_option("--header-bytes", sim.header_bytes, "Per-block header in front of each allocation");
  s->add_option("--arena-pages", sim.arena_pages, "Model arena size in pages (default: enough for the trace)");
  s->add_flag("--lenient", sim.lenient, "Skip frees of unknown addresses instead of failing");
  s->add_option("--server", sim.server, std::string("Simulation server for the live backend (default: $") +
                                            kServerEnv + ")");

  PackArgs pack;
  auto* p = app.add_subcommand("pack", "Split a placement into normalized per-mapping instances");
  p->add_option("placement", pack.placement, "Placement CSV")->required();
  p->add_option("-o,--output", pack.output, "Instance directory");
  p->add_option("--page-size", pack.page_size, "Page size in bytes");
  p->add_flag("--exact-normalize", pack.exact_normalize, "Shift the lowest job to address 0 exactly");

  FragArgs frag;
  auto* f = app.add_subcommand("frag", "Compute fragmentation of a packed instance");
  f->add_option("instance", frag.instance, "Instance directory")->required();
  f->add_option("-o,--output", frag.output, "Report CSV (default: stdout)");
  f->add_option("--page-size", frag.page_size, "Override the instance page size");
  f->add_option("--workers", frag.workers, "Worker threads")->check(CLI::PositiveNumber);
  f->add_flag("--no-floor-gaps", frag.no_floor_gaps, "Do not count free space below the lowest job of a page");
  f->add_flag("--oracle", frag.oracle, "Cross-check against brute-force rasterization");
  f->add_option("--rects", frag.rects, "Also write job rectangles for plotting");

  StudyArgs study;
  auto* st = app.add_subcommand("study", "Correlate fragmentation with peak RSS");
  st->add_option("index", study.index, "Index CSV: workload,input,allocator,jobs,report")->required();
  st->add_option("--rss", study.rss, "Peak RSS samples CSV")->required();
  st->add_option("-o,--output", study.output, "Output directory");
  st->add_option("--threshold", study.threshold, "Strong-correlation threshold");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*t) return cmd_trace(trace);
    if (*s) {
      for (std::size_t i = 0; i < sim.classes.size(); ++i)
        if (sim.classes[i] == 0 || (i > 0 && sim.classes[i] <= sim.classes[i - 1]))
          throw StageError("--classes must be positive and strictly ascending");
      return cmd_simulate(sim);
    }
    if (*p) return cmd_pack(pack);
    if (*f) return cmd_frag(frag);
    if (*st) return cmd_study(study);
  } catch (const std::exception& e) {
    std::cerr << "fragscope: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
