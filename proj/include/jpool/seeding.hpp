#pragma once

// Seed derivation and content hashes for reproducible runs.

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>

#include "jpool/error.hpp"

namespace jpool {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent child seed for stream `k` of a base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t k) {
  return splitmix64(splitmix64(base) ^ (k * 0xd1b54a32d192ed03ULL));
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t base, std::string_view key) {
  return mix_seed(base, fnv1a64(key));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

/// JPOOL_SEED if set; a malformed value is an error rather than silently ignored.
inline std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("JPOOL_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0') throw ConfigError(std::string("JPOOL_SEED is not an integer: ") + s);
  return static_cast<std::uint64_t>(v);
}

}  // namespace jpool
