#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>

namespace sdfl {

/// Integer micro-tokens. All ledger arithmetic is exact.
using Tokens = std::int64_t;

/// Zero-based protocol round.
using Round = std::uint32_t;

/// Simulated seconds.
using SimTime = double;

struct WorkerId {
  std::uint32_t value = 0;

  constexpr WorkerId() = default;
  constexpr explicit WorkerId(std::uint32_t v) : value(v) {}
  constexpr auto operator<=>(const WorkerId&) const = default;
};

struct ClusterId {
  std::uint32_t value = 0;

  constexpr ClusterId() = default;
  constexpr explicit ClusterId(std::uint32_t v) : value(v) {}
  constexpr auto operator<=>(const ClusterId&) const = default;
};

inline std::string to_string(WorkerId w) { return "w" + std::to_string(w.value); }
inline std::string to_string(ClusterId c) { return "c" + std::to_string(c.value); }

}  // namespace sdfl

template <>
struct std::hash<sdfl::WorkerId> {
  std::size_t operator()(sdfl::WorkerId w) const noexcept { return std::hash<std::uint32_t>{}(w.value); }
};
