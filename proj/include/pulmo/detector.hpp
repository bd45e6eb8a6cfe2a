#pragma once

// Anchor-based nodule detection over preprocessed volumes: training patch
// sampling with augmentation, the anchor classification + regression loss
// with hard-negative mining, and overlap-tiled whole-volume inference.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pulmo/boxes.hpp"
#include "pulmo/dataset.hpp"
#include "pulmo/nnet.hpp"
#include "pulmo/ops.hpp"
#include "pulmo/rng.hpp"

namespace pulmo {

struct DetectorConfig {
  NNetConfig net;
  int patch_size = 128;                      // training cube side, voxels (== mm)
  std::vector<double> anchors_mm{10, 30, 60};
  double iou_pos = 0.5;                      // IoU above which an anchor is positive
  double iou_neg = 0.02;                     // max-IoU below which an anchor is negative
  double p_targeted = 0.7;                   // probability a patch is centered on a nodule
  int margin_px = 12;                        // nodule-to-border margin in output voxels
  double resize_lo = 0.8, resize_hi = 1.15;  // training zoom range
  double big1_mm = 30.0, big2_mm = 40.0;     // nodule-size sampling boosts
  int big1_weight = 2, big2_weight = 6;
  int hnm_pool = 800;                        // negatives drawn at random (<=0: all)
  int hnm_keep = 2;                          // hardest negatives kept (<=0: whole pool)
  int pad_value = 170;                       // fill for out-of-volume voxels
  int steps = 400;
  double lr = 0.01;
  double momentum = 0.9;
  double lr_drop_frac = 0.7;                 // lr /= 10 after this fraction of steps
  int infer_block = 208;                     // sliding-window cube side
  int infer_overlap = 32;
  double conf_threshold = 0.1;
  double nms_iou = 0.1;
};

constexpr int kGridStride = 4;  // voxels per output grid cell, fixed by the backbone

inline double normalized_unit(int stored) { return stored / 128.0 - 1.0; }

template <class T>
struct PatchSample {
  Tensor<T> input;   // (1,1,S,S,S), intensities mapped by v/128 - 1
  Tensor<T> coords;  // (1,3,S/4,S/4,S/4) normalized lung-frame locations
  std::vector<Box> gts;  // patch-frame mm (origin at patch corner)
};

namespace detail {

// Stored value at an (integer) voxel, or the pad fill outside the volume.
inline int volume_at_or_pad(const Volume& v, int z, int y, int x, int pad) {
  if (z < 0 || y < 0 || x < 0 || z >= v.dims[0] || y >= v.dims[1] || x >= v.dims[2]) return pad;
  return v.at(z, y, x);
}

// Trilinear sample at a continuous voxel position, padding outside.
inline double volume_sample_or_pad(const Volume& v, double z, double y, double x, int pad) {
  const int z0 = static_cast<int>(std::floor(z)), y0 = static_cast<int>(std::floor(y)),
            x0 = static_cast<int>(std::floor(x));
  const double fz = z - z0, fy = y - y0, fx = x - x0;
  double acc = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
        if (w != 0.0) acc += w * volume_at_or_pad(v, z0 + dz, y0 + dy, x0 + dx, pad);
      }
  return acc;
}

// Normalized lung-frame location of an mm position: [-1, 1] across the lung
// bounding extent, unclamped beyond it.
inline double lung_frame_coord(double mm, double lo, double hi) {
  const double span = hi - lo;
  return span > 0 ? 2.0 * (mm - lo) / span - 1.0 : 0.0;
}

}  // namespace detail

// Draws one training patch: with probability p_targeted (when the case has
// nodules) the crop is forced to contain a randomly chosen nodule -- larger
// nodules drawn more often -- with a safety margin to the border; otherwise
// the crop start is uniform (possibly hanging off the volume edges, padded).
// A random zoom in [resize_lo, resize_hi] and a random x-flip are applied; the
// returned ground-truth boxes live in the augmented patch frame.
template <class T>
PatchSample<T> sample_patch(const CaseRecord& rec, const DetectorConfig& cfg, Rng& rng) {
  const int S = cfg.patch_size;
  const Volume& vol = rec.prep;

  // Draw order is fixed: target choice, zoom, flip, crop start.
  int target = -1;
  if (!rec.gt_boxes.empty() && rng.uniform() < cfg.p_targeted) {
    std::vector<double> w(rec.gt_boxes.size(), 1.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (rec.gt_boxes[i].r > cfg.big2_mm) w[i] = cfg.big2_weight;
      else if (rec.gt_boxes[i].r > cfg.big1_mm) w[i] = cfg.big1_weight;
    }
    double total = 0;
    for (double v : w) total += v;
    double u = rng.uniform() * total;
    target = static_cast<int>(w.size()) - 1;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (u < w[i]) { target = static_cast<int>(i); break; }
      u -= w[i];
    }
  }
  const double zoom_req = rng.uniform(cfg.resize_lo, cfg.resize_hi);
  const bool flip_x = rng.bernoulli(0.5);

  const int Ssrc = std::max(1, static_cast<int>(std::llround(S / zoom_req)));
  const double zoom = static_cast<double>(S) / Ssrc;  // effective content scale

  Index3 start{0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    const int dim = vol.dims[static_cast<std::size_t>(a)];
    if (target >= 0) {
      const Box& g = rec.gt_boxes[static_cast<std::size_t>(target)];
      const double c[3] = {(g.z - vol.origin_mm[0]) / vol.spacing_mm[0],
                           (g.y - vol.origin_mm[1]) / vol.spacing_mm[1],
                           (g.x - vol.origin_mm[2]) / vol.spacing_mm[2]};
      double margin = cfg.margin_px / zoom;  // requested margin, in source voxels
      margin = std::min(margin, std::max(0.0, (Ssrc - g.r) / 2.0 - 1.0));  // relax for big nodules
      int lo = static_cast<int>(std::ceil(c[a] + g.r / 2.0 + margin - Ssrc));
      int hi = static_cast<int>(std::floor(c[a] - g.r / 2.0 - margin));
      if (lo > hi) {  // nodule larger than the crop: center on it
        lo = hi = static_cast<int>(std::llround(c[a] - Ssrc / 2.0));
      }
      start[static_cast<std::size_t>(a)] = static_cast<int>(rng.uniform_int(lo, hi));
    } else {
      const int lo = std::min(0, dim - Ssrc), hi = std::max(0, dim - Ssrc);
      start[static_cast<std::size_t>(a)] = static_cast<int>(rng.uniform_int(lo, hi));
    }
  }

  PatchSample<T> out;
  out.input = Tensor<T>::zeros({1, 1, S, S, S});
  const bool integer_copy = (Ssrc == S);
  for (int z = 0; z < S; ++z)
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const int xi = flip_x ? (S - 1 - x) : x;
        double v;
        if (integer_copy) {
          v = detail::volume_at_or_pad(vol, start[0] + z, start[1] + y, start[2] + xi, cfg.pad_value);
        } else {
          v = detail::volume_sample_or_pad(vol, start[0] + z / zoom, start[1] + y / zoom,
                                           start[2] + xi / zoom, cfg.pad_value);
        }
        out.input.value()[(std::int64_t(z) * S + y) * S + x] = static_cast<T>(v / 128.0 - 1.0);
      }

  // Ground truth in patch mm: scale about the crop corner, then x-flip.
  for (const Box& g : rec.gt_boxes) {
    Box p;
    p.z = ((g.z - vol.origin_mm[0]) / vol.spacing_mm[0] - start[0]) * zoom;
    p.y = ((g.y - vol.origin_mm[1]) / vol.spacing_mm[1] - start[1]) * zoom;
    p.x = ((g.x - vol.origin_mm[2]) / vol.spacing_mm[2] - start[2]) * zoom;
    p.r = g.r * zoom;
    if (flip_x) p.x = (S - 1) - p.x;
    // Keep any box whose cube intersects the patch; the labeling rules decide
    // whether its anchors are positive, negative, or ignored.
    bool inside = true;
    const double lo[3] = {p.z - p.r / 2, p.y - p.r / 2, p.x - p.r / 2};
    const double hi[3] = {p.z + p.r / 2, p.y + p.r / 2, p.x + p.r / 2};
    for (int a = 0; a < 3; ++a) inside = inside && hi[a] > 0.0 && lo[a] < S;
    if (inside) out.gts.push_back(p);
  }

  // Location channels: one value per output grid cell and axis, evaluated at
  // the cell's center mapped back through the same crop/zoom/flip transform.
  const int G = S / kGridStride;
  out.coords = Tensor<T>::zeros({1, 3, G, G, G});
  const double* lo_mm = rec.extent.lung_min_mm.data();
  const double* hi_mm = rec.extent.lung_max_mm.data();
  for (int a = 0; a < 3; ++a)
    for (int z = 0; z < G; ++z)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
          const int cell[3] = {z, y, x};
          double pos = kGridStride * cell[a] + 1.5;  // patch voxel at the cell center
          if (a == 2 && flip_x) pos = (S - 1) - pos;
          const double src = start[static_cast<std::size_t>(a)] + pos / zoom;
          const double mm = vol.origin_mm[static_cast<std::size_t>(a)] +
                            src * vol.spacing_mm[static_cast<std::size_t>(a)];
          out.coords.value()[((std::int64_t(a) * G + z) * G + y) * G + x] =
              static_cast<T>(detail::lung_frame_coord(mm, lo_mm[a], hi_mm[a]));
        }
  return out;
}

template <class T>
struct DetectorLoss {
  Tensor<T> total;  // scalar; undefined when no anchors were selected
  double cls = 0, reg = 0;
  int n_pos = 0, n_neg = 0;
};

namespace detail {

// Flat index into a (1, n_scales*5, G,G,G) output tensor for anchor `a`
// (ordered ((z*G+y)*G+x)*n_scales + s) and component q (0 logit, 1..4 offsets).
inline std::int64_t head_flat_index(std::int64_t a, int q, int G, int n_scales) {
  const std::int64_t cell = a / n_scales;
  const int s = static_cast<int>(a % n_scales);
  const std::int64_t z = cell / (std::int64_t(G) * G);
  const std::int64_t y = (cell / G) % G;
  const std::int64_t x = cell % G;
  return ((std::int64_t(s * 5 + q) * G + z) * G + y) * G + x;
}

}  // namespace detail

// Anchor loss over one patch output:
//   selected = one random positive anchor per matched nodule
//            + hard negatives (top hnm_keep by predicted confidence out of a
//              random pool of hnm_pool negatives)
//   L = [ sum BCE(logit, label) + sum_{positives} sum_q smoothL1(offset_q) ]
//       / |selected|
// With every logit at 0 and exact regression, L == ln 2.
template <class T>
DetectorLoss<T> detector_loss(Tape<T>* tape, const Tensor<T>& out, const std::vector<Box>& gts,
                              const DetectorConfig& cfg, Rng& rng) {
  const int n_scales = static_cast<int>(cfg.anchors_mm.size());
  if (out.shape().size() != 5 || out.shape(0) != 1 || out.shape(1) != n_scales * 5 ||
      out.shape(2) != out.shape(3) || out.shape(3) != out.shape(4))
    throw std::logic_error("detector_loss: unexpected output shape");
  const int G = out.shape(2);

  const std::vector<Box> anchors = anchor_boxes({G, G, G}, double(kGridStride), cfg.anchors_mm);
  const AnchorLabels labels = label_anchors(anchors, gts, cfg.iou_pos, cfg.iou_neg);

  // One positive anchor per ground-truth nodule, drawn uniformly.
  std::vector<std::vector<std::int64_t>> by_gt(gts.size());
  std::vector<std::int64_t> negatives;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (labels.label[a] > 0) by_gt[static_cast<std::size_t>(labels.matched_gt[a])].push_back(
        static_cast<std::int64_t>(a));
    else if (labels.label[a] < 0) negatives.push_back(static_cast<std::int64_t>(a));
  }
  std::vector<std::int64_t> pos;
  for (auto& cand : by_gt)
    if (!cand.empty())
      pos.push_back(cand[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cand.size()) - 1))]);

  // Hard-negative mining: random pool, then the highest-confidence members.
  // (Ranking by logit equals ranking by sigmoid(logit).)
  if (cfg.hnm_pool > 0 && static_cast<int>(negatives.size()) > cfg.hnm_pool) {
    for (int i = 0; i < cfg.hnm_pool; ++i) {
      const int j = rng.uniform_int(i, static_cast<int>(negatives.size()) - 1);
      std::swap(negatives[static_cast<std::size_t>(i)], negatives[static_cast<std::size_t>(j)]);
    }
    negatives.resize(static_cast<std::size_t>(cfg.hnm_pool));
  }
  if (cfg.hnm_keep > 0 && static_cast<int>(negatives.size()) > cfg.hnm_keep) {
    std::stable_sort(negatives.begin(), negatives.end(), [&](std::int64_t a, std::int64_t b) {
      const T la = out.value()[detail::head_flat_index(a, 0, G, n_scales)];
      const T lb = out.value()[detail::head_flat_index(b, 0, G, n_scales)];
      return la != lb ? la > lb : a < b;
    });
    negatives.resize(static_cast<std::size_t>(cfg.hnm_keep));
  }

  DetectorLoss<T> result;
  result.n_pos = static_cast<int>(pos.size());
  result.n_neg = static_cast<int>(negatives.size());
  const int M = result.n_pos + result.n_neg;
  if (M == 0) return result;  // nothing selected; caller skips the step

  std::vector<std::int64_t> logit_idx;
  std::vector<T> cls_targets;
  for (std::int64_t a : pos) {
    logit_idx.push_back(detail::head_flat_index(a, 0, G, n_scales));
    cls_targets.push_back(T(1));
  }
  for (std::int64_t a : negatives) {
    logit_idx.push_back(detail::head_flat_index(a, 0, G, n_scales));
    cls_targets.push_back(T(0));
  }
  Tensor<T> cls_sum = sum(tape, bce_with_logits(tape, gather(tape, out, logit_idx), cls_targets));

  Tensor<T> total;
  if (!pos.empty()) {
    std::vector<std::int64_t> reg_idx;
    std::vector<T> reg_targets;
    for (std::int64_t a : pos) {
      const auto enc = encode_target(gts[static_cast<std::size_t>(labels.matched_gt[a])],
                                     anchors[static_cast<std::size_t>(a)]);
      for (int q = 0; q < 4; ++q) {
        reg_idx.push_back(detail::head_flat_index(a, q + 1, G, n_scales));
        reg_targets.push_back(static_cast<T>(enc[static_cast<std::size_t>(q)]));
      }
    }
    Tensor<T> reg_sum = sum(tape, smooth_l1(tape, gather(tape, out, reg_idx), reg_targets));
    result.reg = static_cast<double>(reg_sum.item()) / M;
    total = affine(tape, add(tape, cls_sum, reg_sum), T(1) / static_cast<T>(M), T(0));
  } else {
    total = affine(tape, cls_sum, T(1) / static_cast<T>(M), T(0));
  }
  result.cls = static_cast<double>(cls_sum.item()) / M;
  result.total = total;
  return result;
}

// Block start offsets covering [0, dim) with cube side `block` and the given
// overlap; every start is a multiple of the output grid stride so the anchor
// lattice is shared across blocks, and the final block may extend past the
// volume (padded).
std::vector<int> tiling_starts(int dim, int block, int overlap);

// Half-overlap ownership cuts, in grid cells: block i owns cells
// [cuts[i], cuts[i+1]) along that axis.
std::vector<int> tiling_cell_cuts(const std::vector<int>& starts, int dim, int block, int overlap);

// Whole-volume detection: tile the volume into overlapping cubes, run the
// network on each, keep each cell's predictions from the block that owns it,
// decode anchors above the confidence threshold into volume-frame mm boxes,
// and apply NMS. The volume must be preprocessed (normalized, 1 mm isotropic).
std::vector<Proposal> sliding_window_infer(NNet<float>& net, const Volume& prep, const LungExtent& extent,
                                           const DetectorConfig& cfg);

}  // namespace pulmo
