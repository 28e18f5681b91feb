#pragma once

// Allocation-interface traces: the request record, its CSV encoding, and the
// reduction of every entry point to the two elementary operations.

#include <array>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fragscope/text.hpp"

namespace fragscope {

using Address = std::uint64_t;
using Bytes = std::uint64_t;

enum class RequestType : std::uint8_t {
  malloc,
  free,
  calloc,
  realloc,
  posix_memalign,
  aligned_alloc,
  valloc,
  memalign,
  pvalloc,
};

inline constexpr std::array<std::string_view, 9> kRequestTypeNames = {
    "malloc",        "free",   "calloc",   "realloc", "posix_memalign",
    "aligned_alloc", "valloc", "memalign", "pvalloc",
};

inline std::string_view to_string(RequestType type) {
  return kRequestTypeNames[static_cast<std::size_t>(type)];
}

inline std::optional<RequestType> request_type_from(std::string_view name) {
  for (std::size_t i = 0; i < kRequestTypeNames.size(); ++i)
    if (kRequestTypeNames[i] == name) return static_cast<RequestType>(i);
  return std::nullopt;
}

// True for the entry points that only ever allocate one block of el_size
// bytes (the aligned family and plain malloc).
inline constexpr bool is_plain_allocation(RequestType type) {
  switch (type) {
    case RequestType::malloc:
    case RequestType::posix_memalign:
    case RequestType::aligned_alloc:
    case RequestType::valloc:
    case RequestType::memalign:
    case RequestType::pvalloc:
      return true;
    default:
      return false;
  }
}

struct RawRequest {
  RequestType req_type = RequestType::malloc;
  std::optional<Address> in_address;
  std::optional<Address> out_address;
  std::optional<Bytes> el_size;
  std::optional<std::uint64_t> els_num;
  // 1-based line in the source file, 0 when the request was built in memory.
  std::size_t line = 0;

  friend bool operator==(const RawRequest& a, const RawRequest& b) {
    return a.req_type == b.req_type && a.in_address == b.in_address &&
           a.out_address == b.out_address && a.el_size == b.el_size &&
           a.els_num == b.els_num;
  }
};

struct ElementaryRequest {
  enum class Kind : std::uint8_t { Malloc, Free };

  Kind kind = Kind::Malloc;
  Bytes size = 0;                 // Malloc only
  Address target = 0;             // Free only
  std::optional<Address> origin;  // Malloc only: address the traced call returned

  static ElementaryRequest malloc(Bytes size, std::optional<Address> origin = std::nullopt) {
    return {Kind::Malloc, size, 0, origin};
  }
  static ElementaryRequest free(Address target) { return {Kind::Free, 0, target, std::nullopt}; }

  bool is_malloc() const noexcept { return kind == Kind::Malloc; }
  bool is_free() const noexcept { return kind == Kind::Free; }

  friend bool operator==(const ElementaryRequest&, const ElementaryRequest&) = default;
};

// A non-fatal observation about the trace, e.g. free(NULL) or a realloc that
// needed libc's null/zero special cases.
struct TraceWarning {
  std::size_t request_index = 0;
  std::size_t line = 0;
  std::string message;
};

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kTraceHeader = "req_type,in_address,out_address,el_size,els_num";

namespace detail {

inline void validate_request(const RawRequest& r, std::size_t line) {
  auto fail = [&](const char* field, const std::string& what) {
    throw ParseError(line, field, what + " for " + std::string(to_string(r.req_type)));
  };
  if (r.req_type == RequestType::calloc) {
    if (!r.el_size) fail("el_size", "missing element size");
    if (!r.els_num) fail("els_num", "missing element count");
  } else if (r.els_num && *r.els_num != 1) {
    fail("els_num", "element count must be absent or 1");
  }
  if (r.req_type == RequestType::free) {
    if (r.out_address) fail("out_address", "unexpected output address");
    if (r.el_size) fail("el_size", "unexpected size");
  } else {
    if (!r.el_size) fail("el_size", "missing size");
  }
  if ((is_plain_allocation(r.req_type) || r.req_type == RequestType::calloc) && r.in_address)
    fail("in_address", "unexpected input address");
}

}  // namespace detail

// Parses a whole trace.  Absent values are "(nil)", addresses 0x-prefixed hex,
// sizes and counts decimal.  The header row is mandatory.
inline std::vector<RawRequest> parse_trace(std::istream& in) {
  std::vector<RawRequest> out;
  std::string line;
  std::size_t lineno = 0;
  if (!text::next_line(in, line)) throw ParseError(1, "", "empty input, expected header");
  ++lineno;
  if (line != kTraceHeader) throw ParseError(1, "", "bad header '" + line + "'");

  static constexpr std::array<const char*, 5> kFields = {"req_type", "in_address", "out_address",
                                                         "el_size", "els_num"};
  while (text::next_line(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = text::split(line);
    if (cols.size() != kFields.size())
      throw ParseError(lineno, "", "expected 5 fields, got " + std::to_string(cols.size()));

    RawRequest r;
    r.line = lineno;
    const auto type = request_type_from(cols[0]);
    if (!type) throw ParseError(lineno, kFields[0], "unknown req_type '" + std::string(cols[0]) + "'");
    r.req_type = *type;

    auto address = [&](std::size_t i) -> std::optional<Address> {
      if (cols[i] == text::kNil) return std::nullopt;
      auto v = text::parse_hex(cols[i]);
      if (!v) throw ParseError(lineno, kFields[i], "bad address '" + std::string(cols[i]) + "'");
      return v;
    };
    auto number = [&](std::size_t i) -> std::optional<std::uint64_t> {
      if (cols[i] == text::kNil) return std::nullopt;
      auto v = text::parse_dec(cols[i]);
      if (!v) throw ParseError(lineno, kFields[i], "bad number '" + std::string(cols[i]) + "'");
      return v;
    };
    r.in_address = address(1);
    r.out_address = address(2);
    r.el_size = number(3);
    r.els_num = number(4);
    detail::validate_request(r, lineno);
    out.push_back(r);
  }
  return out;
}

inline void write_trace(std::ostream& out, std::span<const RawRequest> requests) {
  auto address = [](const std::optional<Address>& a) {
    return a ? text::hex(*a) : std::string(text::kNil);
  };
  auto number = [](const std::optional<std::uint64_t>& n) {
    return n ? text::dec(*n) : std::string(text::kNil);
  };
  out << kTraceHeader << '\n';
  for (const auto& r : requests) {
    out << to_string(r.req_type) << ',' << address(r.in_address) << ',' << address(r.out_address)
        << ',' << number(r.el_size) << ',' << number(r.els_num) << '\n';
  }
}

// Reduces one request to malloc/free operations.  realloc(NULL, s) behaves as
// malloc(s) and realloc(p, 0) as free(p), following libc.  A null address is
// either "(nil)" or 0x0.
inline std::vector<ElementaryRequest> unpack(const RawRequest& r,
                                             std::vector<TraceWarning>* warnings = nullptr,
                                             std::size_t index = 0) {
  auto warn = [&](std::string message) {
    if (warnings) warnings->push_back({index, r.line, std::move(message)});
  };
  auto is_null = [](const std::optional<Address>& a) { return !a || *a == 0; };
  const Bytes size = r.el_size.value_or(0);

  switch (r.req_type) {
    case RequestType::free:
      if (is_null(r.in_address)) {
        warn("free(NULL) ignored");
        return {};
      }
      return {ElementaryRequest::free(*r.in_address)};

    case RequestType::calloc: {
      const std::uint64_t count = r.els_num.value_or(1);
      if (count != 0 && size > UINT64_MAX / count)
        throw TraceError("calloc size overflow: " + text::dec(count) + " * " + text::dec(size) +
                         (r.line ? " at line " + std::to_string(r.line) : std::string()));
      if (is_null(r.out_address)) warn("calloc returned NULL in the traced program");
      return {ElementaryRequest::malloc(count * size, r.out_address)};
    }

    case RequestType::realloc: {
      const bool null_in = is_null(r.in_address);
      if (null_in) {
        warn("realloc(NULL, s) treated as malloc(s)");
        return {ElementaryRequest::malloc(size, r.out_address)};
      }
      if (size == 0) {
        warn("realloc(p, 0) treated as free(p)");
        return {ElementaryRequest::free(*r.in_address)};
      }
      return {ElementaryRequest::free(*r.in_address),
              ElementaryRequest::malloc(size, r.out_address)};
    }

    default:
      if (is_null(r.out_address))
        warn(std::string(to_string(r.req_type)) + " returned NULL in the traced program");
      return {ElementaryRequest::malloc(size, r.out_address)};
  }
}

struct UnpackedTrace {
  std::vector<ElementaryRequest> requests;
  std::vector<TraceWarning> warnings;
};

inline UnpackedTrace unpack_all(std::span<const RawRequest> raw) {
  UnpackedTrace out;
  out.requests.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    for (auto& e : unpack(raw[i], &out.warnings, i)) out.requests.push_back(e);
  }
  return out;
}

}  // namespace fragscope
