#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace hiq {

// FNV-1a, 64-bit. Used for config and hierarchy digests in checkpoints.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string to_hex(std::uint64_t value);
std::string_view trim(std::string_view s);

}  // namespace hiq
