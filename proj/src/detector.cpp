#include "pulmo/detector.hpp"

namespace pulmo {

std::vector<int> tiling_starts(int dim, int block, int overlap) {
  if (block % 16 != 0) throw ConfigError("infer: block side must be a multiple of 16");
  if (overlap % 8 != 0 || overlap <= 0 || overlap >= block)
    throw ConfigError("infer: overlap must be a positive multiple of 8 smaller than the block");
  std::vector<int> starts;
  if (dim <= block) {
    starts.push_back(0);
    return starts;
  }
  // Last start: the smallest stride-lattice point whose block reaches the end.
  const int last = kGridStride * ((dim - block + kGridStride - 1) / kGridStride);
  int st = 0;
  while (true) {
    starts.push_back(st);
    if (st >= last) break;
    st = std::min(st + block - overlap, last);
  }
  return starts;
}

std::vector<int> tiling_cell_cuts(const std::vector<int>& starts, int dim, int block, int overlap) {
  std::vector<int> cuts;
  cuts.push_back(0);
  for (std::size_t i = 1; i < starts.size(); ++i) cuts.push_back((starts[i] + overlap / 2) / kGridStride);
  cuts.push_back((dim + kGridStride - 1) / kGridStride);
  (void)block;
  return cuts;
}

std::vector<Proposal> sliding_window_infer(NNet<float>& net, const Volume& prep, const LungExtent& extent,
                                           const DetectorConfig& cfg) {
  if (prep.value_kind != ValueKind::normalized_u8)
    throw DataError("infer: expected a preprocessed (normalized) volume; run preprocess first");
  for (int a = 0; a < 3; ++a)
    if (std::abs(prep.spacing_mm[static_cast<std::size_t>(a)] - 1.0) > 1e-6)
      throw DataError("infer: expected 1 mm isotropic spacing; run preprocess first");

  const int B = cfg.infer_block, ov = cfg.infer_overlap;
  const int n_scales = static_cast<int>(cfg.anchors_mm.size());
  const int GB = B / kGridStride;

  std::array<std::vector<int>, 3> starts, cuts;
  for (int a = 0; a < 3; ++a) {
    starts[static_cast<std::size_t>(a)] = tiling_starts(prep.dims[static_cast<std::size_t>(a)], B, ov);
    cuts[static_cast<std::size_t>(a)] =
        tiling_cell_cuts(starts[static_cast<std::size_t>(a)], prep.dims[static_cast<std::size_t>(a)], B, ov);
  }

  std::vector<Proposal> proposals;
  Tensor<float> input = Tensor<float>::zeros({1, 1, B, B, B});
  Tensor<float> coords = Tensor<float>::zeros({1, 3, GB, GB, GB});

  for (std::size_t bz = 0; bz < starts[0].size(); ++bz)
    for (std::size_t by = 0; by < starts[1].size(); ++by)
      for (std::size_t bx = 0; bx < starts[2].size(); ++bx) {
        const int s0 = starts[0][bz], s1 = starts[1][by], s2 = starts[2][bx];
        for (int z = 0; z < B; ++z)
          for (int y = 0; y < B; ++y)
            for (int x = 0; x < B; ++x)
              input.value()[(std::int64_t(z) * B + y) * B + x] = static_cast<float>(
                  normalized_unit(detail::volume_at_or_pad(prep, s0 + z, s1 + y, s2 + x, cfg.pad_value)));
        for (int a = 0; a < 3; ++a) {
          const int s[3] = {s0, s1, s2};
          for (int z = 0; z < GB; ++z)
            for (int y = 0; y < GB; ++y)
              for (int x = 0; x < GB; ++x) {
                const int cell[3] = {z, y, x};
                const double vox = s[a] + kGridStride * cell[a] + 1.5;
                const double mm = prep.origin_mm[static_cast<std::size_t>(a)] +
                                  vox * prep.spacing_mm[static_cast<std::size_t>(a)];
                coords.value()[((std::int64_t(a) * GB + z) * GB + y) * GB + x] =
                    static_cast<float>(detail::lung_frame_coord(
                        mm, extent.lung_min_mm[static_cast<std::size_t>(a)],
                        extent.lung_max_mm[static_cast<std::size_t>(a)]));
              }
        }

        NNetOut<float> fwd = net.forward(nullptr, input, coords, /*training=*/false);
        const auto& ov_ = fwd.out.value();

        // Owned global cell range for this block along each axis.
        const int own_lo[3] = {cuts[0][bz], cuts[1][by], cuts[2][bx]};
        const int own_hi[3] = {cuts[0][bz + 1], cuts[1][by + 1], cuts[2][bx + 1]};
        const int base_cell[3] = {s0 / kGridStride, s1 / kGridStride, s2 / kGridStride};
        for (int gz = own_lo[0]; gz < own_hi[0]; ++gz)
          for (int gy = own_lo[1]; gy < own_hi[1]; ++gy)
            for (int gx = own_lo[2]; gx < own_hi[2]; ++gx) {
              const int lz = gz - base_cell[0], ly = gy - base_cell[1], lx = gx - base_cell[2];
              if (lz < 0 || ly < 0 || lx < 0 || lz >= GB || ly >= GB || lx >= GB) continue;
              for (int s = 0; s < n_scales; ++s) {
                const std::int64_t base = ((std::int64_t(s * 5) * GB + lz) * GB + ly) * GB + lx;
                const std::int64_t step = std::int64_t(GB) * GB * GB;
                const float logit = ov_[base];
                const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logit)));
                if (p < cfg.conf_threshold) continue;
                Box anchor;
                anchor.z = prep.origin_mm[0] + ((gz + 0.5) * kGridStride) * prep.spacing_mm[0];
                anchor.y = prep.origin_mm[1] + ((gy + 0.5) * kGridStride) * prep.spacing_mm[1];
                anchor.x = prep.origin_mm[2] + ((gx + 0.5) * kGridStride) * prep.spacing_mm[2];
                anchor.r = cfg.anchors_mm[static_cast<std::size_t>(s)];
                const std::array<double, 4> t = {
                    static_cast<double>(ov_[base + 1 * step]), static_cast<double>(ov_[base + 2 * step]),
                    static_cast<double>(ov_[base + 3 * step]), static_cast<double>(ov_[base + 4 * step])};
                proposals.push_back(Proposal{decode_target(t, anchor), p});
              }
            }
      }

  return nms(proposals, cfg.nms_iou);
}

}  // namespace pulmo
