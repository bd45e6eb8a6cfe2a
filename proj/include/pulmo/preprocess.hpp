#pragma once

#include <utility>

#include "pulmo/morphology.hpp"
#include "pulmo/volume.hpp"

namespace pulmo {

// All gates are physical (mm / mm^2 / L), so behavior is spacing-independent.
struct PreprocessConfig {
  double target_spacing_mm = 1.0;     // canonical working resolution
  double gaussian_sigma_px = 1.0;     // per-slice smoothing before thresholding
  double hu_threshold = -600.0;       // foreground = smoothed value strictly below
  double min_area_mm2 = 30.0;         // 2D components smaller than this are noise
  double max_eccentricity = 0.99;     // drops radial-artifact line components
  double min_volume_L = 0.68;         // plausible lung volume band
  double max_volume_L = 7.5;
  double slice_area_floor_mm2 = 6000.0;  // slices entering the center-distance test
  double center_dist_cutoff_mm = 62.0;   // mean min-distance-to-slice-center gate
  double split_max_ratio = 4.0;          // larger/smaller volume ratio for a valid split
  double hull_area_ratio = 1.5;          // skip hull fill when hull/mask exceeds this
  int dilation_voxels = 10;              // final mask inflation (captures wall-attached lesions)
  double clip_lo_hu = -1200.0;           // intensity window mapped onto [0, 255]
  double clip_hi_hu = 600.0;
  int fill_value = 170;    // luminance outside the mask (tissue-like)
  int bone_threshold = 210;  // dilation-ring values above this reset to fill_value
  int crop_margin_px = 10;   // bounding-box margin of the final crop
};

// --- pipeline stages -------------------------------------------------------

// Per-slice: Gaussian-smooth, threshold (foreground = air), drop small or
// needle-thin 2D components.
Mask binarize(const Volume& v, const PreprocessConfig& cfg);

// Clears leading (z = 0 side) slices whose foreground touches the slice border
// until a slice without border-connected foreground appears. Breaks the
// airway-to-outside connection on scans that start above the body.
// Throws DataError when every slice would be cleared.
Mask strip_open_top_slices(const Mask& m);

// 26-connected 3D components; drops any touching a matrix corner, outside the
// volume band, or failing the center-distance rule; returns the union of
// survivors. Throws DataError("no lung component found") when none survive.
Mask select_lung_component(const Mask& m, const PreprocessConfig& cfg);

// Separates the lung field into (low-x, high-x) halves. Uses the existing
// components when the mask already has two of comparable volume; otherwise
// erodes until it splits (ratio <= split_max_ratio), then grows both seeds
// back inside the original mask by alternating competitive dilations.
// Throws DataError("cannot split lungs") when erosion exhausts the mask.
std::pair<Mask, Mask> split_lungs(const Mask& m, const PreprocessConfig& cfg);

struct HullResult {
  Mask hulled;   // per-slice convex hull fill (skipped where ratio > hull_area_ratio)
  Mask dilated;  // hulled mask dilated by dilation_voxels
};
HullResult hull_and_dilate(const Mask& half, const PreprocessConfig& cfg);

// Window [clip_lo, clip_hi] -> [0, 255] (ties-to-even), fill_value outside the
// mask, bone suppression inside the dilation ring, crop to mask bbox + margin.
// The crop shifts origin_mm so physical coordinates remain valid.
Volume normalize(const Volume& v, const Mask& full_mask, const Mask& dilation_ring, const PreprocessConfig& cfg);

// --- whole pipeline --------------------------------------------------------

struct PreprocessResult {
  Volume prep;           // normalized, cropped volume (value_kind normalized_u8)
  Mask binarized;        // post strip
  Mask lung;             // selected lung field
  Mask left, right;      // split halves (pre-hull)
  Mask mask_union;       // union of hulled halves (pre-dilation)
  Mask full_mask;        // union of dilated halves; the final mask
  Index3 crop_lo{0, 0, 0};  // crop offset in the resampled frame
  Vec3 lung_min_mm{0, 0, 0}, lung_max_mm{0, 0, 0};  // full-mask extent (physical)
};

PreprocessResult preprocess_volume(const Volume& v, const PreprocessConfig& cfg);

// Dice overlap of two same-shaped masks; 1.0 when both are empty.
double dice(const Mask& a, const Mask& b);

// Inclusive index bounds of set voxels; false when empty.
bool mask_bbox(const Mask& m, Index3& lo, Index3& hi);

}  // namespace pulmo
