#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace purkinje {

/// Independent generator for a named purpose, derived from the master seed by FNV-1a hashing of the
/// name and a splitmix64 finalizer.
inline std::mt19937_64 substream(std::uint64_t master, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) h = (h ^ c) * 1099511628211ULL;
  std::uint64_t z = h ^ (master + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  z ^= z >> 31;
  std::seed_seq seq{static_cast<std::uint32_t>(z), static_cast<std::uint32_t>(z >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace purkinje
