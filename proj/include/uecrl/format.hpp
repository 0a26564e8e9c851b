#pragma once

#include <cstdio>
#include <cstdint>
#include <string>
#include <string_view>

namespace uecrl {

/// printf-style "%.<digits>g" for a double.
inline std::string fmt_real(double x, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

/// Shortest round-trip-safe text for a double.
inline std::string fmt_exact(double x) { return fmt_real(x, 17); }

/// 64-bit FNV-1a over a byte string.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace uecrl
