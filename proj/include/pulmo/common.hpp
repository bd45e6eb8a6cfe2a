#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pulmo {

// Axis order everywhere is (z, y, x); a slice is a fixed z plane.
using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

// Error taxonomy maps onto process exit codes: config -> 2, data -> 3, numeric -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::int64_t voxel_count(const Index3& dims) {
  return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
}

inline std::int64_t flat_index(const Index3& dims, int z, int y, int x) {
  return (static_cast<std::int64_t>(z) * dims[1] + y) * dims[2] + x;
}

inline bool in_bounds(const Index3& dims, int z, int y, int x) {
  return z >= 0 && z < dims[0] && y >= 0 && y < dims[1] && x >= 0 && x < dims[2];
}

// FNV-1a, used for config hashing and the hash-rank train/val split.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace pulmo
