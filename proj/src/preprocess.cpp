#include "pulmo/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace pulmo {

Mask binarize(const Volume& v, const PreprocessConfig& cfg) {
  if (v.size() == 0) throw DataError("binarize: empty volume");
  const int D = v.dims[0], H = v.dims[1], W = v.dims[2];
  const double px_area = v.spacing_mm[1] * v.spacing_mm[2];
  Mask out = Mask::zeros(v.dims, v.spacing_mm);
  std::vector<float> plane(static_cast<std::size_t>(H) * W), smooth(plane.size());
  std::vector<std::uint8_t> fg(plane.size());
  for (int z = 0; z < D; ++z) {
    const std::int16_t* src = &v.data[static_cast<std::size_t>(flat_index(v.dims, z, 0, 0))];
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = static_cast<float>(src[i]);
    gaussian_smooth_2d(plane.data(), smooth.data(), H, W, cfg.gaussian_sigma_px);
    for (std::size_t i = 0; i < plane.size(); ++i) fg[i] = smooth[i] < cfg.hu_threshold;
    int count = 0;
    const auto labels = label_slice(fg.data(), H, W, count);
    const auto regions = slice_regions(labels, H, W, count);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(count) + 1, 0);
    for (const auto& r : regions)
      keep[static_cast<std::size_t>(r.label)] =
          (static_cast<double>(r.area_px) * px_area >= cfg.min_area_mm2) && (r.eccentricity <= cfg.max_eccentricity);
    std::uint8_t* dst = &out.data[static_cast<std::size_t>(flat_index(v.dims, z, 0, 0))];
    for (std::size_t i = 0; i < plane.size(); ++i) dst[i] = labels[i] ? keep[static_cast<std::size_t>(labels[i])] : 0;
  }
  return out;
}

Mask strip_open_top_slices(const Mask& m) {
  const int D = m.dims[0], H = m.dims[1], W = m.dims[2];
  Mask out = m;
  for (int z = 0; z < D; ++z) {
    const std::uint8_t* slice = &m.data[static_cast<std::size_t>(flat_index(m.dims, z, 0, 0))];
    int count = 0;
    const auto labels = label_slice(slice, H, W, count);
    const auto regions = slice_regions(labels, H, W, count);
    bool open = false;
    for (const auto& r : regions) open = open || r.touches_border;
    if (!open) return out;
    std::memset(&out.data[static_cast<std::size_t>(flat_index(m.dims, z, 0, 0))], 0,
                static_cast<std::size_t>(H) * W);
  }
  throw DataError("strip: all slices removed; no enclosed foreground found");
}

namespace {

struct ComponentStats {
  std::int64_t voxels = 0;
  bool corner = false;
  // per-slice area (px) and min squared mm distance to the slice center
  std::vector<std::int64_t> slice_area;
  std::vector<double> slice_min_d2;
};

}  // namespace

Mask select_lung_component(const Mask& m, const PreprocessConfig& cfg) {
  const int D = m.dims[0], H = m.dims[1], W = m.dims[2];
  const auto lab = label_components_26(m);
  std::vector<ComponentStats> stats(static_cast<std::size_t>(lab.count));
  for (auto& s : stats) {
    s.slice_area.assign(static_cast<std::size_t>(D), 0);
    s.slice_min_d2.assign(static_cast<std::size_t>(D), 1e300);
  }
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const double sy = m.spacing_mm[1], sx = m.spacing_mm[2];
  for (int z = 0; z < D; ++z) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const std::int32_t l = lab.labels[static_cast<std::size_t>(flat_index(m.dims, z, y, x))];
        if (!l) continue;
        auto& s = stats[static_cast<std::size_t>(l - 1)];
        s.voxels += 1;
        s.slice_area[static_cast<std::size_t>(z)] += 1;
        const double dy = (y - cy) * sy, dx = (x - cx) * sx;
        s.slice_min_d2[static_cast<std::size_t>(z)] =
            std::min(s.slice_min_d2[static_cast<std::size_t>(z)], dy * dy + dx * dx);
        const bool zc = (z == 0 || z == D - 1), yc = (y == 0 || y == H - 1), xc = (x == 0 || x == W - 1);
        if (zc && yc && xc) s.corner = true;
      }
    }
  }
  const double voxel_L = m.spacing_mm[0] * sy * sx * 1e-6;
  const double px_area = sy * sx;
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(lab.count) + 1, 0);
  bool any = false;
  for (std::int32_t i = 0; i < lab.count; ++i) {
    const auto& s = stats[static_cast<std::size_t>(i)];
    if (s.corner) continue;
    const double volume_L = static_cast<double>(s.voxels) * voxel_L;
    if (volume_L < cfg.min_volume_L || volume_L > cfg.max_volume_L) continue;
    // center-distance rule over slices with enough in-component area;
    // no qualifying slice means the component never presents a lung-sized
    // cross-section, so it is dropped
    double sum = 0.0;
    int n = 0;
    for (int z = 0; z < D; ++z) {
      if (static_cast<double>(s.slice_area[static_cast<std::size_t>(z)]) * px_area > cfg.slice_area_floor_mm2) {
        sum += std::sqrt(s.slice_min_d2[static_cast<std::size_t>(z)]);
        ++n;
      }
    }
    if (n == 0 || sum / n > cfg.center_dist_cutoff_mm) continue;
    keep[static_cast<std::size_t>(i + 1)] = 1;
    any = true;
  }
  if (!any) throw DataError("no lung component found");
  Mask out = Mask::zeros(m.dims, m.spacing_mm);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = lab.labels[i] ? keep[static_cast<std::size_t>(lab.labels[i])] : 0;
  return out;
}

namespace {

// Largest-two component extraction; returns (count, seeds) with seeds[0] the larger.
std::pair<int, std::array<Mask, 2>> two_largest(const Mask& m) {
  const auto lab = label_components_26(m);
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(lab.count), 0);
  for (auto l : lab.labels)
    if (l) ++sizes[static_cast<std::size_t>(l - 1)];
  std::vector<int> order(sizes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sizes[static_cast<std::size_t>(a)] > sizes[static_cast<std::size_t>(b)];
  });
  std::array<Mask, 2> seeds{Mask::zeros(m.dims, m.spacing_mm), Mask::zeros(m.dims, m.spacing_mm)};
  for (int k = 0; k < std::min<int>(2, lab.count); ++k) {
    const std::int32_t want = order[static_cast<std::size_t>(k)] + 1;
    for (std::size_t i = 0; i < m.data.size(); ++i) seeds[static_cast<std::size_t>(k)].data[i] = lab.labels[i] == want;
  }
  return {lab.count, seeds};
}

double centroid_x(const Mask& m) {
  double sx = 0.0;
  std::int64_t n = 0;
  for (int z = 0; z < m.dims[0]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[2]; ++x)
        if (m.at(z, y, x)) {
          sx += x;
          ++n;
        }
  return n ? sx / static_cast<double>(n) : 0.0;
}

}  // namespace

std::pair<Mask, Mask> split_lungs(const Mask& m, const PreprocessConfig& cfg) {
  if (m.count() == 0) throw DataError("cannot split lungs: empty mask");
  Mask eroded = m;
  int iterations = 0;
  Mask a = Mask::zeros(m.dims, m.spacing_mm), b = a;
  for (;;) {
    auto [count, seeds] = two_largest(eroded);
    if (count >= 2) {
      const auto big = seeds[0].count(), small = seeds[1].count();
      if (static_cast<double>(big) <= cfg.split_max_ratio * static_cast<double>(small)) {
        a = std::move(seeds[0]);
        b = std::move(seeds[1]);
        break;
      }
    }
    eroded = erode(eroded, 1);
    ++iterations;
    if (eroded.count() == 0) throw DataError("cannot split lungs");
  }
  // Grow both seeds back by as many steps as were eroded, inside the original
  // mask, alternating single steps so contested voxels go to the nearer seed
  // deterministically. The union stays a subset of the input: thin necks and
  // fragments disconnected from both seeds remain unclaimed.
  for (int it = 0; it < iterations; ++it) {
    Mask ga = dilate(a, 1);
    for (std::size_t i = 0; i < ga.data.size(); ++i) a.data[i] = ga.data[i] && m.data[i] && !b.data[i];
    Mask gb = dilate(b, 1);
    for (std::size_t i = 0; i < gb.data.size(); ++i) b.data[i] = gb.data[i] && m.data[i] && !a.data[i];
  }
  if (centroid_x(a) > centroid_x(b)) std::swap(a, b);
  return {a, b};
}

HullResult hull_and_dilate(const Mask& half, const PreprocessConfig& cfg) {
  const int D = half.dims[0], H = half.dims[1], W = half.dims[2];
  HullResult r{half, Mask::zeros(half.dims, half.spacing_mm)};
  std::vector<std::uint8_t> filled(static_cast<std::size_t>(H) * W);
  for (int z = 0; z < D; ++z) {
    std::uint8_t* slice = &r.hulled.data[static_cast<std::size_t>(flat_index(half.dims, z, 0, 0))];
    std::int64_t before = 0;
    for (int i = 0; i < H * W; ++i) before += slice[i] != 0;
    if (before == 0) continue;
    const std::int64_t after = convex_hull_filled(slice, filled.data(), H, W);
    // A hull much larger than the mask means the slice is crescent-like
    // (mask wraps a concavity that is not lung); filling it would swallow
    // mediastinum, so keep the original.
    if (static_cast<double>(after) <= cfg.hull_area_ratio * static_cast<double>(before))
      std::memcpy(slice, filled.data(), static_cast<std::size_t>(H) * W);
  }
  r.dilated = dilate(r.hulled, cfg.dilation_voxels);
  return r;
}

Volume normalize(const Volume& v, const Mask& full_mask, const Mask& dilation_ring, const PreprocessConfig& cfg) {
  if (v.dims != full_mask.dims || v.dims != dilation_ring.dims)
    throw DataError("normalize: mask dims do not match volume");
  Index3 lo, hi;
  if (!mask_bbox(full_mask, lo, hi)) throw DataError("normalize: empty mask");
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, lo[a] - cfg.crop_margin_px);
    hi[a] = std::min(v.dims[a] - 1, hi[a] + cfg.crop_margin_px);
  }
  Volume out;
  out.dims = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  out.spacing_mm = v.spacing_mm;
  out.origin_mm = {v.origin_mm[0] + lo[0] * v.spacing_mm[0], v.origin_mm[1] + lo[1] * v.spacing_mm[1],
                   v.origin_mm[2] + lo[2] * v.spacing_mm[2]};
  out.value_kind = ValueKind::normalized_u8;
  out.data.resize(static_cast<std::size_t>(out.size()));
  const double scale = 255.0 / (cfg.clip_hi_hu - cfg.clip_lo_hu);
  for (int z = lo[0]; z <= hi[0]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[2]; x <= hi[2]; ++x) {
        int val = cfg.fill_value;
        if (full_mask.at(z, y, x)) {
          const double hu = std::clamp(static_cast<double>(v.at(z, y, x)), cfg.clip_lo_hu, cfg.clip_hi_hu);
          val = static_cast<int>(std::nearbyint((hu - cfg.clip_lo_hu) * scale));  // ties-to-even
          if (dilation_ring.at(z, y, x) && val > cfg.bone_threshold) val = cfg.fill_value;
        }
        out.at(z - lo[0], y - lo[1], x - lo[2]) = static_cast<std::int16_t>(val);
      }
    }
  }
  return out;
}

PreprocessResult preprocess_volume(const Volume& v, const PreprocessConfig& cfg) {
  if (v.value_kind != ValueKind::hu_int16) throw DataError("preprocess: expected an hu_int16 volume");
  const Volume iso = resample_isotropic(v, cfg.target_spacing_mm);
  PreprocessResult r;
  r.binarized = strip_open_top_slices(binarize(iso, cfg));
  r.lung = select_lung_component(r.binarized, cfg);
  std::tie(r.left, r.right) = split_lungs(r.lung, cfg);
  const HullResult hl = hull_and_dilate(r.left, cfg);
  const HullResult hr = hull_and_dilate(r.right, cfg);
  r.mask_union = Mask::zeros(iso.dims, iso.spacing_mm);
  r.full_mask = Mask::zeros(iso.dims, iso.spacing_mm);
  Mask ring = Mask::zeros(iso.dims, iso.spacing_mm);
  for (std::size_t i = 0; i < r.full_mask.data.size(); ++i) {
    r.mask_union.data[i] = hl.hulled.data[i] || hr.hulled.data[i];
    r.full_mask.data[i] = hl.dilated.data[i] || hr.dilated.data[i];
    ring.data[i] = r.full_mask.data[i] && !r.mask_union.data[i];
  }
  Index3 lo, hi;
  mask_bbox(r.full_mask, lo, hi);
  for (int a = 0; a < 3; ++a) {
    r.lung_min_mm[a] = iso.origin_mm[a] + lo[a] * iso.spacing_mm[a];
    r.lung_max_mm[a] = iso.origin_mm[a] + hi[a] * iso.spacing_mm[a];
  }
  r.prep = normalize(iso, r.full_mask, ring, cfg);
  for (int a = 0; a < 3; ++a) r.crop_lo[a] = std::max(0, lo[a] - cfg.crop_margin_px);
  return r;
}

double dice(const Mask& a, const Mask& b) {
  if (a.dims != b.dims) throw DataError("dice: mask dims differ");
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += pa && pb;
    na += pa;
    nb += pb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

bool mask_bbox(const Mask& m, Index3& lo, Index3& hi) {
  lo = {m.dims[0], m.dims[1], m.dims[2]};
  hi = {-1, -1, -1};
  for (int z = 0; z < m.dims[0]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[2]; ++x)
        if (m.at(z, y, x)) {
          lo = {std::min(lo[0], z), std::min(lo[1], y), std::min(lo[2], x)};
          hi = {std::max(hi[0], z), std::max(hi[1], y), std::max(hi[2], x)};
        }
  return hi[0] >= 0;
}

}  // namespace pulmo
