#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pulmo/common.hpp"

namespace pulmo {

// Axis-aligned cube: center in mm, side length r in mm.
struct Box {
  double z = 0, y = 0, x = 0;
  double r = 0;
};

struct Proposal {
  Box box;
  double confidence = 0.0;
};

double iou(const Box& a, const Box& b);

// Anchor cubes centered at ((i + 0.5) * stride) per axis, one per (cell, scale),
// ordered ((z * H + y) * W + x) * n_scales + s to match the detector output
// layout. Coordinates are in the patch frame (origin 0).
std::vector<Box> anchor_boxes(const Index3& grid_dims, double stride_mm, const std::vector<double>& scales_mm);

// +1 positive (matched_gt = argmax-IoU gt, ties to the lowest index),
// -1 negative (max IoU over all gts < iou_neg), 0 ignored.
struct AnchorLabels {
  std::vector<std::int8_t> label;
  std::vector<std::int32_t> matched_gt;  // -1 unless positive
};
AnchorLabels label_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts, double iou_pos,
                           double iou_neg);

// Offsets are in units of the anchor side; the size term is a log ratio.
// Component order matches the output head: (dz, dy, dx, dr).
std::array<double, 4> encode_target(const Box& gt, const Box& anchor);
Box decode_target(const std::array<double, 4>& t, const Box& anchor);

// Greedy NMS: highest confidence first (ties keep input order), a proposal is
// kept iff its IoU with every kept proposal is <= iou_cut. Returns kept
// proposals in descending confidence order.
std::vector<Proposal> nms(const std::vector<Proposal>& proposals, double iou_cut);

// JSON-lines {x, y, z, r, confidence}, one proposal per line.
void save_proposals(const std::vector<Proposal>& proposals, const std::string& path);
std::vector<Proposal> load_proposals(const std::string& path);

}  // namespace pulmo
