#pragma once

// Case-level malignancy from detected nodules, treated as a multiple-instance
// problem: the top-confidence proposals are cropped, run through the shared
// backbone to a fixed-length feature each, scored by a small perceptron, and
// pooled into one case probability. Pooling choices:
//   max_p            P = max_i P_i
//   noisy_or         P = 1 - prod_i (1 - P_i)
//   leaky_noisy_or   P = 1 - (1 - P_d) * prod_i (1 - P_i), P_d = sigmoid(theta_d)
//   feature_combine  dense -> elementwise max over instances -> dense -> sigmoid
//                    (no hidden activation)
// Missing instances are padded with "blank" crops (pad-value voxels); their
// learned score enters the pooling like any other instance.

#include <array>
#include <string>
#include <vector>

#include "pulmo/detector.hpp"

namespace pulmo {

enum class Pooling { max_p, noisy_or, leaky_noisy_or, feature_combine };

Pooling pooling_from_string(const std::string& s);
std::string to_string(Pooling p);

struct ClassifierConfig {
  int crop_size = 96;  // instance cube side, voxels; multiple of 4
  int top_k = 5;
  int hidden = 64;
  std::string pooling = "leaky_noisy_or";
  int epochs_a = 4;    // stage A: plain training with augmentation
  int epochs_b = 4;    // stage B: + global gradient-norm clipping
  int epochs_e = 3;    // stage E: + pinned BN stats, alternating det/cls epochs
  double lr = 0.01;
  double momentum = 0.9;
  double clip_norm = 1.0;
  double resize_lo = 0.75, resize_hi = 1.25;
  double shift_frac = 0.15;  // of the nodule radius (half the box side)
  bool rotate = true;
  double prob_eps = 1e-7;    // probability clamp inside the case loss
  int pad_value = 170;
};

// ---------------------------------------------------------------------------
// Pooling head
// ---------------------------------------------------------------------------

template <class T>
struct MilHead {
  Pooling pooling = Pooling::leaky_noisy_or;
  DenseLayer<T> fc1, fc2;  // feature -> hidden, hidden -> 1
  Tensor<T> theta_d;       // leak logit (leaky_noisy_or only, but always stored)

  void init(int feature_dim, int hidden, Pooling p, Rng& rng) {
    pooling = p;
    fc1.init(feature_dim, hidden, rng);
    fc2.init(hidden, 1, rng);
    theta_d = Tensor<T>::zeros({1}, true);
  }
  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    fc1.params("mil.fc1", out);
    fc2.params("mil.fc2", out);
    out.push_back({"mil.theta_d", theta_d});
    return out;
  }
};

template <class T>
struct CaseOutput {
  Tensor<T> case_p;            // scalar probability
  std::vector<double> inst_p;  // per-instance scores, for reporting
  double leak_p = 0.0;         // sigmoid(theta_d) under leaky pooling, else 0
};

// features: (k, F). Whatever the pooling, the output probability is invariant
// to instance order; the product pooling reduces in sorted-value order so the
// invariance is bit-exact.
template <class T>
CaseOutput<T> mil_case_prob(Tape<T>* tape, const Tensor<T>& features, MilHead<T>& head) {
  CaseOutput<T> out;
  if (head.pooling == Pooling::feature_combine) {
    Tensor<T> h = head.fc1.forward(tape, features);         // (k, hidden), no activation
    Tensor<T> m = colwise_max(tape, h);                     // (1, hidden)
    out.case_p = sigmoid(tape, head.fc2.forward(tape, m));  // (1, 1)
    // Per-instance report: the same perceptron applied to one instance alone.
    for (int i = 0; i < features.shape(0); ++i) {
      double o = static_cast<double>(head.fc2.b.value()[0]);
      for (int hID = 0; hID < head.fc1.fout; ++hID) {
        double hv = static_cast<double>(head.fc1.b.value()[hID]);
        for (int f = 0; f < head.fc1.fin; ++f)
          hv += static_cast<double>(head.fc1.w.value()[std::int64_t(hID) * head.fc1.fin + f]) *
                static_cast<double>(features.value()[std::int64_t(i) * head.fc1.fin + f]);
        o += static_cast<double>(head.fc2.w.value()[hID]) * hv;
      }
      out.inst_p.push_back(1.0 / (1.0 + std::exp(-o)));
    }
    return out;
  }

  Tensor<T> h = relu(tape, head.fc1.forward(tape, features));
  Tensor<T> p = sigmoid(tape, head.fc2.forward(tape, h));  // (k, 1)
  for (Eigen::Index i = 0; i < p.size(); ++i) out.inst_p.push_back(static_cast<double>(p.value()[i]));

  switch (head.pooling) {
    case Pooling::max_p:
      out.case_p = colwise_max(tape, p);
      break;
    case Pooling::noisy_or:
      out.case_p = affine(tape, prod_one_minus(tape, p), T(-1), T(1));
      break;
    case Pooling::leaky_noisy_or: {
      Tensor<T> pd = sigmoid(tape, head.theta_d);
      out.leak_p = static_cast<double>(pd.value()[0]);
      Tensor<T> q = prod_one_minus(tape, p);
      Tensor<T> keep = affine(tape, pd, T(-1), T(1));  // 1 - P_d
      out.case_p = affine(tape, mul(tape, keep, q), T(-1), T(1));
      break;
    }
    default:
      throw std::logic_error("mil_case_prob: unreachable pooling");
  }
  return out;
}

// Reference pooling on plain doubles (same math, same sorted-order product).
double combine_probs(Pooling pooling, std::vector<double> inst_p, double leak_p);

// ---------------------------------------------------------------------------
// Instance selection
// ---------------------------------------------------------------------------

struct SelectedInstance {
  Proposal prop;
  bool blank = false;
};

// Training draws k proposals without replacement with probability proportional
// to confidence (renormalizing after each draw); inference takes the top k by
// confidence. Fewer than k proposals are padded with blanks.
std::vector<SelectedInstance> select_instances(const std::vector<Proposal>& proposals, int k, bool train,
                                               Rng* rng);

// ---------------------------------------------------------------------------
// Instance crops
// ---------------------------------------------------------------------------

// Composed geometric augmentation, applied in one trilinear pass:
// output voxel u maps to source voxel
//   center + shift + R * (flip * (u - (C-1)/2)) / zoom.
struct CropAugment {
  bool enabled = false;
  double zoom = 1.0;
  Vec3 shift{0, 0, 0};  // voxels
  std::array<std::array<double, 3>, 3> rot{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  std::array<int, 3> flip{1, 1, 1};
};

// Draws zoom/shift/flips/rotation; shift magnitude stays below
// shift_frac * (box_r / 2) per axis. The rotation is uniform over 3-D
// orientations (unit-quaternion sampling).
CropAugment draw_crop_augment(const ClassifierConfig& cfg, double box_r, Rng& rng);

// Writes instance `slot` of a (k,1,C,C,C) input batch and (k,3,C/4,...) location
// batch. Blanks fill with the pad value and zero location channels. Without
// augmentation the crop is a voxel-aligned copy centered at the rounded
// proposal center; with augmentation a single composed trilinear resample.
template <class T>
void fill_instance_crop(const Volume& prep, const LungExtent& extent, const SelectedInstance& inst,
                        const ClassifierConfig& cfg, const CropAugment& aug, Tensor<T>& batch_input,
                        Tensor<T>& batch_coords, int slot) {
  const int C = cfg.crop_size, G = C / kGridStride;
  const std::int64_t in_off = std::int64_t(slot) * C * C * C;
  const std::int64_t co_off = std::int64_t(slot) * 3 * G * G * G;

  if (inst.blank) {
    const T fill = static_cast<T>(normalized_unit(cfg.pad_value));
    batch_input.value().segment(in_off, std::int64_t(C) * C * C).setConstant(fill);
    batch_coords.value().segment(co_off, std::int64_t(3) * G * G * G).setConstant(T(0));
    return;
  }

  const Vec3 center_vox = {(inst.prop.box.z - prep.origin_mm[0]) / prep.spacing_mm[0],
                           (inst.prop.box.y - prep.origin_mm[1]) / prep.spacing_mm[1],
                           (inst.prop.box.x - prep.origin_mm[2]) / prep.spacing_mm[2]};

  auto source_of = [&](double uz, double uy, double ux) -> Vec3 {
    if (!aug.enabled) {
      const Vec3 start = {std::llround(center_vox[0]) - C / 2.0, std::llround(center_vox[1]) - C / 2.0,
                          std::llround(center_vox[2]) - C / 2.0};
      return {start[0] + uz, start[1] + uy, start[2] + ux};
    }
    const double half = (C - 1) / 2.0;
    const double rel[3] = {aug.flip[0] * (uz - half), aug.flip[1] * (uy - half), aug.flip[2] * (ux - half)};
    Vec3 s;
    for (int a = 0; a < 3; ++a) {
      double acc = 0;
      for (int b = 0; b < 3; ++b)
        acc += aug.rot[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] * rel[b];
      s[static_cast<std::size_t>(a)] =
          center_vox[static_cast<std::size_t>(a)] + aug.shift[static_cast<std::size_t>(a)] + acc / aug.zoom;
    }
    return s;
  };

  for (int z = 0; z < C; ++z)
    for (int y = 0; y < C; ++y)
      for (int x = 0; x < C; ++x) {
        double v;
        if (!aug.enabled) {
          const Vec3 s = source_of(z, y, x);
          v = detail::volume_at_or_pad(prep, static_cast<int>(s[0]), static_cast<int>(s[1]),
                                       static_cast<int>(s[2]), cfg.pad_value);
        } else {
          const Vec3 s = source_of(z, y, x);
          v = detail::volume_sample_or_pad(prep, s[0], s[1], s[2], cfg.pad_value);
        }
        batch_input.value()[in_off + (std::int64_t(z) * C + y) * C + x] = static_cast<T>(v / 128.0 - 1.0);
      }

  for (int a = 0; a < 3; ++a)
    for (int z = 0; z < G; ++z)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
          const Vec3 s = source_of(kGridStride * z + 1.5, kGridStride * y + 1.5, kGridStride * x + 1.5);
          const double mm = prep.origin_mm[static_cast<std::size_t>(a)] +
                            s[static_cast<std::size_t>(a)] * prep.spacing_mm[static_cast<std::size_t>(a)];
          batch_coords.value()[co_off + ((std::int64_t(a) * G + z) * G + y) * G + x] =
              static_cast<T>(detail::lung_frame_coord(mm, extent.lung_min_mm[static_cast<std::size_t>(a)],
                                                      extent.lung_max_mm[static_cast<std::size_t>(a)]));
        }
}

// Instance features from the backbone: forward to the pre-head feature map and
// take the per-channel max over the central 2x2x2 cells -> (k, F).
template <class T>
Tensor<T> instance_features(Tape<T>* tape, NNet<T>& net, const Tensor<T>& batch_input,
                            const Tensor<T>& batch_coords, bool training) {
  NNetOut<T> fwd = net.forward(tape, batch_input, batch_coords, training);
  return central_max_pool2(tape, fwd.feature);
}

// ---------------------------------------------------------------------------
// Whole-case prediction (inference path)
// ---------------------------------------------------------------------------

struct CasePrediction {
  double case_p = 0.0;
  double leak_p = 0.0;
  struct Nodule {
    Box box;
    double confidence = 0.0;
    double p_i = 0.0;
  };
  std::vector<Nodule> nodules;  // non-blank instances, descending confidence
};

CasePrediction predict_case(NNet<float>& net, MilHead<float>& head, const Volume& prep,
                            const LungExtent& extent, const DetectorConfig& dcfg,
                            const ClassifierConfig& ccfg);

// Same, reusing precomputed proposals instead of running detection.
CasePrediction predict_case_from_proposals(NNet<float>& net, MilHead<float>& head, const Volume& prep,
                                           const LungExtent& extent, const std::vector<Proposal>& proposals,
                                           const ClassifierConfig& ccfg);

}  // namespace pulmo
