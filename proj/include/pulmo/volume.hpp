#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "pulmo/common.hpp"

namespace pulmo {

enum class ValueKind { hu_int16, normalized_u8 };

std::string to_string(ValueKind k);
ValueKind value_kind_from_string(const std::string& s);

// Dense scalar grid in (z, y, x) order. Disk payloads are always int16;
// float instantiations exist for in-memory interpolation work.
template <class T>
struct VolumeT {
  Index3 dims{0, 0, 0};        // (z, y, x)
  Vec3 spacing_mm{1.0, 1.0, 1.0};
  Vec3 origin_mm{0.0, 0.0, 0.0};
  ValueKind value_kind = ValueKind::hu_int16;
  std::vector<T> data;

  std::int64_t size() const { return voxel_count(dims); }
  T& at(int z, int y, int x) { return data[flat_index(dims, z, y, x)]; }
  const T& at(int z, int y, int x) const { return data[flat_index(dims, z, y, x)]; }

  // Physical position of a voxel center.
  Vec3 position_mm(double z, double y, double x) const {
    return {origin_mm[0] + z * spacing_mm[0], origin_mm[1] + y * spacing_mm[1],
            origin_mm[2] + x * spacing_mm[2]};
  }
};

using Volume = VolumeT<std::int16_t>;

// Binary grid sharing its volume's (z, y, x) frame.
struct Mask {
  Index3 dims{0, 0, 0};
  Vec3 spacing_mm{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data;

  static Mask zeros(const Index3& dims, const Vec3& spacing) {
    return Mask{dims, spacing, std::vector<std::uint8_t>(static_cast<std::size_t>(voxel_count(dims)), 0)};
  }
  std::int64_t size() const { return voxel_count(dims); }
  std::uint8_t& at(int z, int y, int x) { return data[flat_index(dims, z, y, x)]; }
  std::uint8_t at(int z, int y, int x) const { return data[flat_index(dims, z, y, x)]; }
  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
  }
};

// `path` names the JSON header; the payload lives next to it with a .raw
// extension. Throws DataError on missing/malformed header or payload size
// mismatch, ConfigError never.
Volume load_volume(const std::string& path);
void save_volume(const Volume& v, const std::string& path);

// Masks reuse the header+raw container with value_kind "mask_u8" (payload
// still int16, values 0/1); these are diagnostic outputs, not pipeline inputs.
void save_mask(const Mask& m, const std::string& path);
Mask load_mask(const std::string& path);

// Trilinear resample onto an isotropic grid of `target_mm` spacing, edge-clamped,
// output dims = round(dims * spacing / target). Sample points are index-aligned
// (mm position of index i is origin + i * spacing, matching position_mm), so the
// mm frame is preserved and physical coordinates stay valid. Exact identity when
// the spacing already matches. Integral scalars round to nearest; trilinear
// convexity keeps values inside the input range.
template <class T>
VolumeT<T> resample_isotropic(const VolumeT<T>& v, double target_mm) {
  if (target_mm <= 0.0) throw ConfigError("resample: target spacing must be > 0, got " + std::to_string(target_mm));
  if (v.size() == 0) throw DataError("resample: empty volume");
  if (v.spacing_mm[0] == target_mm && v.spacing_mm[1] == target_mm && v.spacing_mm[2] == target_mm) {
    return v;
  }
  VolumeT<T> out;
  out.value_kind = v.value_kind;
  out.origin_mm = v.origin_mm;
  out.spacing_mm = {target_mm, target_mm, target_mm};
  for (int a = 0; a < 3; ++a) {
    const double extent = v.dims[a] * v.spacing_mm[a] / target_mm;
    out.dims[a] = std::max(1, static_cast<int>(std::llround(extent)));
  }
  out.data.resize(static_cast<std::size_t>(out.size()));

  const auto sample_axis = [](double i_out, double t, double s, int n_in, int& i0, double& w1) {
    // index-aligned mapping: out sample i*t == in sample j*s
    double j = i_out * t / s;
    j = std::clamp(j, 0.0, static_cast<double>(n_in - 1));
    i0 = std::min(static_cast<int>(j), n_in - 2 >= 0 ? n_in - 2 : 0);
    if (n_in == 1) i0 = 0;
    w1 = j - i0;
  };

  for (int z = 0; z < out.dims[0]; ++z) {
    int z0;
    double wz;
    sample_axis(z, target_mm, v.spacing_mm[0], v.dims[0], z0, wz);
    const int z1 = std::min(z0 + 1, v.dims[0] - 1);
    for (int y = 0; y < out.dims[1]; ++y) {
      int y0;
      double wy;
      sample_axis(y, target_mm, v.spacing_mm[1], v.dims[1], y0, wy);
      const int y1 = std::min(y0 + 1, v.dims[1] - 1);
      for (int x = 0; x < out.dims[2]; ++x) {
        int x0;
        double wx;
        sample_axis(x, target_mm, v.spacing_mm[2], v.dims[2], x0, wx);
        const int x1 = std::min(x0 + 1, v.dims[2] - 1);
        const double c000 = v.at(z0, y0, x0), c001 = v.at(z0, y0, x1);
        const double c010 = v.at(z0, y1, x0), c011 = v.at(z0, y1, x1);
        const double c100 = v.at(z1, y0, x0), c101 = v.at(z1, y0, x1);
        const double c110 = v.at(z1, y1, x0), c111 = v.at(z1, y1, x1);
        const double c00 = c000 + (c001 - c000) * wx;
        const double c01 = c010 + (c011 - c010) * wx;
        const double c10 = c100 + (c101 - c100) * wx;
        const double c11 = c110 + (c111 - c110) * wx;
        const double c0 = c00 + (c01 - c00) * wy;
        const double c1 = c10 + (c11 - c10) * wy;
        const double val = c0 + (c1 - c0) * wz;
        if constexpr (std::is_integral_v<T>) {
          out.at(z, y, x) = static_cast<T>(std::llround(val));
        } else {
          out.at(z, y, x) = static_cast<T>(val);
        }
      }
    }
  }
  return out;
}

}  // namespace pulmo
