#pragma once

#include <cstdint>
#include <string>

namespace rfork {

// Simulated time in integer nanoseconds. Integer arithmetic keeps event
// ordering and cost sums exact and reproducible.
using SimTime = std::int64_t;

inline constexpr SimTime kNanosecond = 1;
inline constexpr SimTime kMicrosecond = 1000;
inline constexpr SimTime kMillisecond = 1000 * kMicrosecond;
inline constexpr SimTime kSecond = 1000 * kMillisecond;

inline constexpr std::uint64_t kPageSize = 4096;

// Ceiling division used for transfer times: bytes at bytes_per_sec, in ns.
inline SimTime transfer_ns(std::uint64_t bytes, std::uint64_t bytes_per_sec) {
  // bytes up to a few GB and rates >= 1 B/s keep this in range.
  const std::uint64_t num = bytes * 1'000'000'000ull;
  return static_cast<SimTime>((num + bytes_per_sec - 1) / bytes_per_sec);
}

std::string format_duration(SimTime t);

}  // namespace rfork
