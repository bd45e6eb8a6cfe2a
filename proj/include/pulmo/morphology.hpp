#pragma once

#include <cstdint>
#include <vector>

#include "pulmo/volume.hpp"

namespace pulmo {

// 2D connected-component labeling (8-connectivity), labels 1..count, 0 = background.
std::vector<std::int32_t> label_slice(const std::uint8_t* slice, int h, int w, int& count);

struct Region2D {
  std::int32_t label = 0;
  std::int64_t area_px = 0;
  double centroid_y = 0.0, centroid_x = 0.0;
  double eccentricity = 0.0;  // sqrt(1 - minor/major) of second central moments; 0 for degenerate
  bool touches_border = false;
};

std::vector<Region2D> slice_regions(const std::vector<std::int32_t>& labels, int h, int w, int count);

// 3D connected-component labeling (26-connectivity), labels 1..count, 0 = background.
struct Labeled3D {
  std::vector<std::int32_t> labels;
  std::int32_t count = 0;
};
Labeled3D label_components_26(const Mask& m);

// Morphology with a 3x3x3 cube structuring element, applied `iterations` times
// (equivalent to a Chebyshev ball of that radius; the cube decomposes exactly
// into per-axis radius-1 passes).
Mask dilate(const Mask& m, int iterations);
Mask erode(const Mask& m, int iterations);

// Separable 2D Gaussian, kernel radius ceil(3*sigma), half-sample symmetric
// ("reflect") borders.
void gaussian_smooth_2d(const float* in, float* out, int h, int w, double sigma);

// Fills the convex hull of the slice's set pixels into `out` (may alias `in`
// only if copied first by the caller); returns the filled pixel count.
// Degenerate inputs (<3 non-collinear points) reproduce the input.
std::int64_t convex_hull_filled(const std::uint8_t* in, std::uint8_t* out, int h, int w);

}  // namespace pulmo
