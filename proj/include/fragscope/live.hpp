#pragma once

// Driver side of the lockstep protocol spoken with a simulation server that
// runs the real allocator under test.
//
// Request frame (17 bytes):  op u8 (0 = malloc, 1 = free, 2 = dump maps),
//                            size u64 LE, origin u64 LE.
// Response frame (16 bytes): address u64 LE, extent u64 LE.
// A dump-maps request is answered with text lines "<start> <end>" in hex,
// terminated by an empty line.

#include <array>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "fragscope/backend.hpp"
#include "fragscope/text.hpp"

namespace fragscope::live {

enum class Op : std::uint8_t { malloc = 0, free = 1, dump_maps = 2 };

inline constexpr std::size_t kRequestFrameSize = 17;
inline constexpr std::size_t kResponseFrameSize = 16;

struct RequestFrame {
  Op op = Op::malloc;
  std::uint64_t size = 0;
  std::uint64_t origin = 0;

  friend bool operator==(const RequestFrame&, const RequestFrame&) = default;
};

struct ResponseFrame {
  std::uint64_t address = 0;
  std::uint64_t extent = 0;

  friend bool operator==(const ResponseFrame&, const ResponseFrame&) = default;
};

inline void store_le(std::uint8_t* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline std::uint64_t load_le(const std::uint8_t* in) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | in[i];
  return v;
}

inline std::array<std::uint8_t, kRequestFrameSize> encode(const RequestFrame& f) {
  std::array<std::uint8_t, kRequestFrameSize> out{};
  out[0] = static_cast<std::uint8_t>(f.op);
  store_le(out.data() + 1, f.size);
  store_le(out.data() + 9, f.origin);
  return out;
}

inline std::optional<RequestFrame> decode_request(std::span<const std::uint8_t, kRequestFrameSize> in) {
  if (in[0] > static_cast<std::uint8_t>(Op::dump_maps)) return std::nullopt;
  return RequestFrame{static_cast<Op>(in[0]), load_le(in.data() + 1), load_le(in.data() + 9)};
}

inline std::array<std::uint8_t, kResponseFrameSize> encode(const ResponseFrame& f) {
  std::array<std::uint8_t, kResponseFrameSize> out{};
  store_le(out.data(), f.address);
  store_le(out.data() + 8, f.extent);
  return out;
}

inline ResponseFrame decode_response(std::span<const std::uint8_t, kResponseFrameSize> in) {
  return {load_le(in.data()), load_le(in.data() + 8)};
}

// Parses one "<start> <end>" line; accepts an optional 0x prefix and the
// "<start>-<end> ..." shape of /proc/<pid>/maps.
inline std::optional<MappingRange> parse_mapping_line(std::string_view line) {
  auto hex_field = [](std::string_view s) -> std::optional<std::uint64_t> {
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) s.remove_prefix(2);
    if (s.empty()) return std::nullopt;
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
  };
  const std::size_t sep = line.find_first_of(" -");
  if (sep == std::string_view::npos) return std::nullopt;
  std::string_view rest = line.substr(sep + 1);
  rest = rest.substr(0, rest.find(' '));
  auto start = hex_field(line.substr(0, sep));
  auto end = hex_field(rest);
  if (!start || !end || *end < *start) return std::nullopt;
  return MappingRange{*start, *end - *start};
}

inline std::string format_mapping_table(std::span<const MappingRange> table) {
  std::string out;
  for (const auto& m : table) out += text::hex(m.start) + ' ' + text::hex(m.end()) + '\n';
  out += '\n';
  return out;
}

// Owns the two pipe ends talking to a server, and the server process when
// this object spawned it.
class Connection {
 public:
  // Writes to a dead server must surface as errors, not SIGPIPE.
  Connection(int to_server, int from_server, pid_t child = -1)
      : to_(to_server), from_(from_server), child_(child) {
    ::signal(SIGPIPE, SIG_IGN);
  }

  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  Connection(Connection&& o) noexcept
      : to_(std::exchange(o.to_, -1)), from_(std::exchange(o.from_, -1)), child_(std::exchange(o.child_, -1)) {}
  Connection& operator=(Connection&& o) noexcept {
    if (this != &o) {
      close_all();
      to_ = std::exchange(o.to_, -1);
      from_ = std::exchange(o.from_, -1);
      child_ = std::exchange(o.child_, -1);
    }
    return *this;
  }
  ~Connection() { close_all(); }

  // Starts `argv[0]` with its stdin/stdout wired to the protocol pipes.
  static Connection spawn(const std::vector<std::string>& argv) {
    if (argv.empty()) throw BackendError("no simulation server given");
    int down[2], up[2];
    if (::pipe2(down, O_CLOEXEC) != 0) throw BackendError(std::string("pipe: ") + std::strerror(errno));
    if (::pipe2(up, O_CLOEXEC) != 0) {
      ::close(down[0]);
      ::close(down[1]);
      throw BackendError(std::string("pipe: ") + std::strerror(errno));
    }
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    const pid_t pid = ::fork();
    if (pid < 0) throw BackendError(std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
      ::dup2(down[0], STDIN_FILENO);
      ::dup2(up[1], STDOUT_FILENO);
      ::close(down[0]);
      ::close(down[1]);
      ::close(up[0]);
      ::close(up[1]);
      ::execv(args[0], args.data());
      ::_exit(127);
    }
    ::close(down[0]);
    ::close(up[1]);
    return Connection(down[1], up[0], pid);
  }

  void send(const RequestFrame& f) {
    const auto bytes = encode(f);
    write_all(bytes.data(), bytes.size());
  }

  ResponseFrame receive() {
    std::array<std::uint8_t, kResponseFrameSize> buf{};
    read_exact(buf.data(), buf.size());
    return decode_response(buf);
  }

  std::vector<MappingRange> fetch_mappings() {
    send({Op::dump_maps, 0, 0});
    std::vector<MappingRange> out;
    std::string line;
    for (;;) {
      char c;
      read_exact(reinterpret_cast<std::uint8_t*>(&c), 1);
      if (c != '\n') {
        line.push_back(c);
        continue;
      }
      if (line.empty()) return out;
      auto m = parse_mapping_line(line);
      if (!m) throw BackendError("protocol desync: bad mapping line '" + line + "'");
      out.push_back(*m);
      line.clear();
    }
  }

  // Closes the request pipe and reaps the server; returns its exit status.
  int finish() {
    if (to_ >= 0) ::close(std::exchange(to_, -1));
    int status = 0;
    if (child_ > 0) {
      ::waitpid(std::exchange(child_, -1), &status, 0);
    }
    if (from_ >= 0) ::close(std::exchange(from_, -1));
    return status;
  }

 private:
  void write_all(const std::uint8_t* data, std::size_t n) {
    while (n > 0) {
      const ssize_t w = ::write(to_, data, n);
      if (w < 0 && errno == EINTR) continue;
      if (w <= 0) throw BackendError("simulation server closed its request pipe");
      data += w;
      n -= static_cast<std::size_t>(w);
    }
  }

  void read_exact(std::uint8_t* data, std::size_t n) {
    while (n > 0) {
      const ssize_t r = ::read(from_, data, n);
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw BackendError(std::string("read: ") + std::strerror(errno));
      if (r == 0) throw BackendError("simulation server exited mid-protocol");
      data += r;
      n -= static_cast<std::size_t>(r);
    }
  }

  void close_all() noexcept {
    if (to_ >= 0) ::close(to_);
    if (from_ >= 0) ::close(from_);
    if (child_ > 0) {
      ::kill(child_, SIGTERM);
      int status;
      ::waitpid(child_, &status, 0);
    }
    to_ = from_ = -1;
    child_ = -1;
  }

  int to_;
  int from_;
  pid_t child_;
};

// PlacementBackend forwarding every request to a live simulation server in
// strict lockstep.  Jobs are attributed to the server mapping containing
// them; the table is re-read whenever an address falls outside it.
class LiveBackend {
 public:
  explicit LiveBackend(Connection connection, Bytes header_bytes = 0)
      : conn_(std::move(connection)), header_(header_bytes) {}

  Allocation allocate(Bytes size, std::optional<Address> origin = std::nullopt) {
    conn_.send({Op::malloc, size, origin.value_or(0)});
    const ResponseFrame r = conn_.receive();
    if (r.address == 0) throw BackendError("allocator under test failed to serve " + text::dec(size) + " bytes");
    if (r.extent < size) throw BackendError("protocol desync: extent below requested size");
    // Headers sit in front of the user pointer.
    const Address block = r.address - header_;
    const MappingRange* m = find(block);
    if (!m) {
      ++refreshes_;
      table_ = conn_.fetch_mappings();
      m = find(block);
    }
    if (!m) throw BackendError("address " + text::hex(r.address) + " outside every server mapping");
    return {block, r.extent + header_, m->start, origin};
  }

  void release(const Allocation& a) {
    conn_.send({Op::free, 0, a.origin.value_or(0)});
    conn_.receive();
  }

  std::vector<MappingRange> mappings() const { return table_; }

  std::size_t mapping_refreshes() const noexcept { return refreshes_; }

  int finish() { return conn_.finish(); }

 private:
  const MappingRange* find(Address a) const {
    for (const auto& m : table_)
      if (m.contains(a)) return &m;
    return nullptr;
  }

  Connection conn_;
  Bytes header_;
  std::vector<MappingRange> table_;
  std::size_t refreshes_ = 0;
};

static_assert(PlacementBackend<LiveBackend>);

}  // namespace fragscope::live
