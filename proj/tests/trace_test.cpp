#include <cstdlib>
#include <malloc.h>
#include <random>
#include <sstream>

#include "gtest/gtest.h"
#include "fragscope/trace.hpp"

namespace fragscope {
namespace {

using E = ElementaryRequest;

std::vector<RawRequest> parse(const std::string& body) {
  std::istringstream in(std::string(kTraceHeader) + "\n" + body);
  return parse_trace(in);
}

TEST(ParseTrace, TableRows) {
  const auto rows = parse(
      "malloc,(nil),0x55a,12,1\n"
      "free,0x55a,(nil),(nil),(nil)\n"
      "calloc,(nil),0x63b,128,1000\n");
  ASSERT_EQ(rows.size(), 3u);

  EXPECT_EQ(rows[0].req_type, RequestType::malloc);
  EXPECT_FALSE(rows[0].in_address);
  EXPECT_EQ(rows[0].out_address, 0x55au);
  EXPECT_EQ(rows[0].el_size, 12u);
  EXPECT_EQ(rows[0].els_num, 1u);

  EXPECT_EQ(rows[1].req_type, RequestType::free);
  EXPECT_EQ(rows[1].in_address, 0x55au);
  EXPECT_FALSE(rows[1].out_address);
  EXPECT_FALSE(rows[1].el_size);
  EXPECT_FALSE(rows[1].els_num);

  EXPECT_EQ(rows[2].req_type, RequestType::calloc);
  EXPECT_EQ(rows[2].out_address, 0x63bu);
  EXPECT_EQ(rows[2].el_size, 128u);
  EXPECT_EQ(rows[2].els_num, 1000u);
  EXPECT_EQ(rows[2].line, 4u);
}

TEST(ParseTrace, MalformedRowReportsLineAndField) {
  try {
    parse("malloc,(nil),0x10,12,1\nmalloc,(nil),xyz,12,1\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_EQ(e.field(), "out_address");
  }
}

TEST(ParseTrace, UnknownTypeNamesValue) {
  try {
    parse("mmap,(nil),0x10,12,1\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.field(), "req_type");
    EXPECT_NE(std::string(e.what()).find("mmap"), std::string::npos);
  }
}

TEST(ParseTrace, RejectsShapeViolations) {
  EXPECT_THROW(parse("malloc,(nil),0x10,12\n"), ParseError);              // 4 fields
  EXPECT_THROW(parse("malloc,0x20,0x10,12,1\n"), ParseError);             // malloc with input
  EXPECT_THROW(parse("free,0x10,0x20,(nil),(nil)\n"), ParseError);        // free with output
  EXPECT_THROW(parse("calloc,(nil),0x10,12,(nil)\n"), ParseError);        // calloc without count
  EXPECT_THROW(parse("malloc,(nil),0x10,12,3\n"), ParseError);            // count on malloc
  EXPECT_THROW(parse("malloc,(nil),0x10,-1,1\n"), ParseError);            // negative size
  std::istringstream no_header("malloc,(nil),0x10,12,1\n");
  EXPECT_THROW(parse_trace(no_header), ParseError);
}

TEST(ParseTrace, HeaderOnlyIsEmpty) { EXPECT_TRUE(parse("").empty()); }

RawRequest raw(RequestType t, std::optional<Address> in, std::optional<Address> out, std::optional<Bytes> size,
               std::optional<std::uint64_t> n = 1) {
  return {t, in, out, size, n};
}

// Every row of the unpacking table.
TEST(Unpack, GoldenRules) {
  EXPECT_EQ(unpack(raw(RequestType::malloc, {}, 0x10, 12)), (std::vector{E::malloc(12, 0x10)}));
  EXPECT_EQ(unpack(raw(RequestType::free, 0x55a, {}, {}, {})), (std::vector{E::free(0x55a)}));
  EXPECT_EQ(unpack(raw(RequestType::calloc, {}, 0x63b, 128, 1000)), (std::vector{E::malloc(128000, 0x63b)}));
  EXPECT_EQ(unpack(raw(RequestType::realloc, 0x10, 0x20, 64)), (std::vector{E::free(0x10), E::malloc(64, 0x20)}));
  for (auto t : {RequestType::posix_memalign, RequestType::aligned_alloc, RequestType::valloc, RequestType::memalign,
                 RequestType::pvalloc}) {
    EXPECT_EQ(unpack(raw(t, {}, 0x40, 100)), (std::vector{E::malloc(100, 0x40)})) << to_string(t);
  }
}

TEST(Unpack, ReallocNullBehavesAsMalloc) {
  // libc: realloc(NULL, n) is one fresh allocation.
  void* p = std::realloc(nullptr, 64);
  ASSERT_NE(p, nullptr);
  EXPECT_GE(malloc_usable_size(p), 64u);
  std::free(p);

  std::vector<TraceWarning> warnings;
  EXPECT_EQ(unpack(raw(RequestType::realloc, {}, 0x30, 64), &warnings), (std::vector{E::malloc(64, 0x30)}));
  EXPECT_EQ(unpack(raw(RequestType::realloc, 0x0, 0x30, 64), &warnings), (std::vector{E::malloc(64, 0x30)}));
  EXPECT_EQ(warnings.size(), 2u);
}

TEST(Unpack, ReallocToZeroIsFree) {
  std::vector<TraceWarning> warnings;
  EXPECT_EQ(unpack(raw(RequestType::realloc, 0x10, {}, 0), &warnings), (std::vector{E::free(0x10)}));
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Unpack, FreeNullIsDroppedWithWarning) {
  std::vector<TraceWarning> warnings;
  EXPECT_TRUE(unpack(raw(RequestType::free, {}, {}, {}, {}), &warnings, 7).empty());
  EXPECT_TRUE(unpack(raw(RequestType::free, 0x0, {}, {}, {}), &warnings, 8).empty());
  ASSERT_EQ(warnings.size(), 2u);
  EXPECT_EQ(warnings[0].request_index, 7u);
}

TEST(Unpack, CallocOverflowRejected) {
  EXPECT_THROW(unpack(raw(RequestType::calloc, {}, 0x10, 1ull << 40, 1ull << 30)), TraceError);
  EXPECT_EQ(unpack(raw(RequestType::calloc, {}, 0x10, 0, UINT64_MAX)), (std::vector{E::malloc(0, 0x10)}));
}

TEST(Unpack, MallocZeroKept) {
  EXPECT_EQ(unpack(raw(RequestType::malloc, {}, 0x10, 0)), (std::vector{E::malloc(0, 0x10)}));
}

RawRequest random_request(std::mt19937_64& rng) {
  auto addr = [&]() -> std::optional<Address> {
    if (rng() % 8 == 0) return std::nullopt;
    return rng() >> (rng() % 60);
  };
  auto size = [&]() -> Bytes { return rng() % 5000; };
  const auto t = static_cast<RequestType>(rng() % kRequestTypeNames.size());
  switch (t) {
    case RequestType::free:
      return raw(t, addr(), {}, {}, {});
    case RequestType::calloc:
      return raw(t, {}, addr(), rng() % 100, rng() % 100);
    case RequestType::realloc:
      return raw(t, addr(), addr(), size(), rng() % 2 ? std::optional<std::uint64_t>(1) : std::nullopt);
    default:
      return raw(t, {}, addr(), size(), rng() % 2 ? std::optional<std::uint64_t>(1) : std::nullopt);
  }
}

TEST(TraceProperty, SerializeParseRoundTripIsByteIdentical) {
  std::mt19937_64 rng(42);
  for (int round = 0; round < 50; ++round) {
    std::vector<RawRequest> requests;
    for (int i = 0; i < 200; ++i) requests.push_back(random_request(rng));
    std::ostringstream first;
    write_trace(first, requests);
    std::istringstream in(first.str());
    const auto parsed = parse_trace(in);
    ASSERT_EQ(parsed, requests);
    std::ostringstream second;
    write_trace(second, parsed);
    ASSERT_EQ(first.str(), second.str());
  }
}

TEST(TraceProperty, UnpackArityAndOrder) {
  std::mt19937_64 rng(7);
  std::vector<RawRequest> requests;
  for (int i = 0; i < 2000; ++i) requests.push_back(random_request(rng));
  std::vector<ElementaryRequest> concatenated;
  for (const auto& r : requests) {
    const auto out = unpack(r);
    ASSERT_LE(out.size(), 2u);
    const bool null_in = !r.in_address || *r.in_address == 0;
    if (out.size() == 2) {
      EXPECT_TRUE(r.req_type == RequestType::realloc && !null_in);
    }
    if (out.empty()) {
      EXPECT_TRUE((r.req_type == RequestType::free || r.req_type == RequestType::realloc) && null_in);
    }
    concatenated.insert(concatenated.end(), out.begin(), out.end());
  }
  EXPECT_EQ(unpack_all(requests).requests, concatenated);
}

}  // namespace
}  // namespace fragscope
