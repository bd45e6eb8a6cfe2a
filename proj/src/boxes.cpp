#include "pulmo/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace pulmo {

using nlohmann::json;

double iou(const Box& a, const Box& b) {
  if (a.r <= 0 || b.r <= 0) throw DataError("iou: boxes must have positive side length");
  const double ha = a.r / 2, hb = b.r / 2;
  const double oz = std::min(a.z + ha, b.z + hb) - std::max(a.z - ha, b.z - hb);
  const double oy = std::min(a.y + ha, b.y + hb) - std::max(a.y - ha, b.y - hb);
  const double ox = std::min(a.x + ha, b.x + hb) - std::max(a.x - ha, b.x - hb);
  if (oz <= 0 || oy <= 0 || ox <= 0) return 0.0;
  const double inter = oz * oy * ox;
  const double uni = a.r * a.r * a.r + b.r * b.r * b.r - inter;
  return inter / uni;
}

std::vector<Box> anchor_boxes(const Index3& grid_dims, double stride_mm, const std::vector<double>& scales_mm) {
  if (stride_mm <= 0) throw ConfigError("anchor grid: stride must be > 0");
  for (double s : scales_mm)
    if (s <= 0) throw ConfigError("anchor grid: scales must be > 0");
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(voxel_count(grid_dims)) * scales_mm.size());
  for (int z = 0; z < grid_dims[0]; ++z)
    for (int y = 0; y < grid_dims[1]; ++y)
      for (int x = 0; x < grid_dims[2]; ++x)
        for (double s : scales_mm)
          out.push_back(Box{(z + 0.5) * stride_mm, (y + 0.5) * stride_mm, (x + 0.5) * stride_mm, s});
  return out;
}

AnchorLabels label_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts, double iou_pos,
                           double iou_neg) {
  AnchorLabels out;
  out.label.assign(anchors.size(), -1);
  out.matched_gt.assign(anchors.size(), -1);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double best = 0.0;
    std::int32_t best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      if (v > best) {  // strict: ties resolve to the lowest gt index
        best = v;
        best_gt = static_cast<std::int32_t>(g);
      }
    }
    if (best > iou_pos) {
      out.label[i] = 1;
      out.matched_gt[i] = best_gt;
    } else if (best < iou_neg) {
      out.label[i] = -1;
    } else {
      out.label[i] = 0;
    }
  }
  return out;
}

std::array<double, 4> encode_target(const Box& gt, const Box& anchor) {
  if (anchor.r <= 0 || gt.r <= 0) throw DataError("encode: boxes must have positive side length");
  return {(gt.z - anchor.z) / anchor.r, (gt.y - anchor.y) / anchor.r, (gt.x - anchor.x) / anchor.r,
          std::log(gt.r / anchor.r)};
}

Box decode_target(const std::array<double, 4>& t, const Box& anchor) {
  if (anchor.r <= 0) throw DataError("decode: anchor must have positive side length");
  return Box{anchor.z + t[0] * anchor.r, anchor.y + t[1] * anchor.r, anchor.x + t[2] * anchor.r,
             anchor.r * std::exp(t[3])};
}

std::vector<Proposal> nms(const std::vector<Proposal>& proposals, double iou_cut) {
  std::vector<std::size_t> order(proposals.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return proposals[a].confidence > proposals[b].confidence;
  });
  std::vector<Proposal> kept;
  for (const std::size_t i : order) {
    bool ok = true;
    for (const auto& k : kept)
      if (iou(proposals[i].box, k.box) > iou_cut) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(proposals[i]);
  }
  return kept;
}

void save_proposals(const std::vector<Proposal>& proposals, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_proposals: cannot open " + path);
  for (const auto& p : proposals) {
    const json j = {{"x", p.box.x}, {"y", p.box.y}, {"z", p.box.z}, {"r", p.box.r}, {"confidence", p.confidence}};
    out << j.dump() << "\n";
  }
  if (!out) throw DataError("save_proposals: write failed for " + path);
}

std::vector<Proposal> load_proposals(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_proposals: cannot open " + path);
  std::vector<Proposal> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      Proposal p;
      p.box = Box{j.at("z").get<double>(), j.at("y").get<double>(), j.at("x").get<double>(),
                  j.at("r").get<double>()};
      p.confidence = j.at("confidence").get<double>();
      out.push_back(p);
    } catch (const json::exception& e) {
      throw DataError("load_proposals: bad line " + std::to_string(line_no) + " in " + path + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pulmo
