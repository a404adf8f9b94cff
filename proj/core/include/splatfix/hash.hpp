#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace splatfix {

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 1469598103934665603ull) {
  return fnv1a64(s.data(), s.size(), h);
}

std::string hex64(uint64_t h);

// Content hash of one file / of every regular file under a directory
// (traversed in sorted relative-path order, path bytes mixed in).
uint64_t hash_file(const std::string& path);
uint64_t hash_dir(const std::string& dir);

}  // namespace splatfix
