#include "pulmo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace pulmo {

namespace {

bool hits(const Proposal& det, const Box& gt) {
  const double dz = det.box.z - gt.z, dy = det.box.y - gt.y, dx = det.box.x - gt.x;
  return std::sqrt(dz * dz + dy * dy + dx * dx) <= gt.r / 2.0;
}

struct FlatDetection {
  double conf;
  int scan;
  std::vector<int> hit_gts;  // global gt indices
};

}  // namespace

FrocResult froc(const std::vector<ScanDetections>& scans, const std::vector<double>& fp_rates) {
  if (scans.empty()) throw DataError("froc: no scans");
  std::vector<FlatDetection> dets;
  int total_gts = 0;
  std::vector<int> gt_base(scans.size());
  for (std::size_t s = 0; s < scans.size(); ++s) {
    gt_base[s] = total_gts;
    total_gts += static_cast<int>(scans[s].gts.size());
  }
  for (std::size_t s = 0; s < scans.size(); ++s) {
    for (const auto& d : scans[s].detections) {
      FlatDetection fd{d.confidence, static_cast<int>(s), {}};
      for (std::size_t g = 0; g < scans[s].gts.size(); ++g)
        if (hits(d, scans[s].gts[g])) fd.hit_gts.push_back(gt_base[s] + static_cast<int>(g));
      dets.push_back(std::move(fd));
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const FlatDetection& a, const FlatDetection& b) {
    return a.conf > b.conf;
  });

  FrocResult out;
  std::vector<std::uint8_t> gt_hit(static_cast<std::size_t>(total_gts), 0);
  int n_hit = 0;
  std::int64_t n_fp = 0;
  const double n_scans = static_cast<double>(scans.size());
  std::size_t i = 0;
  while (i < dets.size()) {
    std::size_t j = i;
    while (j < dets.size() && dets[j].conf == dets[i].conf) {  // equal confidences enter together
      if (dets[j].hit_gts.empty()) {
        ++n_fp;
      } else {
        for (int g : dets[j].hit_gts)
          if (!gt_hit[static_cast<std::size_t>(g)]) {
            gt_hit[static_cast<std::size_t>(g)] = 1;
            ++n_hit;
          }
      }
      ++j;
    }
    FrocPoint p;
    p.threshold = dets[i].conf;
    p.recall = total_gts > 0 ? static_cast<double>(n_hit) / total_gts : 0.0;
    p.fp_per_scan = static_cast<double>(n_fp) / n_scans;
    out.curve.push_back(p);
    i = j;
  }

  for (const double rate : fp_rates) {
    double r = 0.0;  // largest threshold (earliest point) wins; curve is monotone both ways
    for (const auto& p : out.curve) {
      if (p.fp_per_scan <= rate) r = p.recall;
      else break;
    }
    out.recall_at_rate.push_back(r);
  }
  if (!out.recall_at_rate.empty()) {
    double s = 0.0;
    for (double r : out.recall_at_rate) s += r;
    out.avg_recall = s / static_cast<double>(out.recall_at_rate.size());
  }
  return out;
}

double topk_recall(const std::vector<ScanDetections>& scans, int k) {
  if (k <= 0) throw ConfigError("topk_recall: k must be > 0");
  int total = 0, hit = 0;
  for (const auto& scan : scans) {
    std::vector<std::size_t> order(scan.detections.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scan.detections[a].confidence > scan.detections[b].confidence;
    });
    const std::size_t kept = std::min<std::size_t>(order.size(), static_cast<std::size_t>(k));
    for (const auto& gt : scan.gts) {
      ++total;
      for (std::size_t i = 0; i < kept; ++i)
        if (hits(scan.detections[order[i]], gt)) {
          ++hit;
          break;
        }
    }
  }
  return total > 0 ? static_cast<double>(hit) / total : 0.0;
}

RocResult roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw DataError("roc: scores/labels size mismatch");
  std::int64_t n_pos = 0, n_neg = 0;
  for (auto l : labels) (l ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) throw DataError("roc: need both classes present");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult out;
  out.curve.push_back({0.0, 0.0});
  double auc = 0.0;
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t dtp = 0, dfp = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {  // ties move diagonally as one group
      (labels[order[j]] ? dtp : dfp) += 1;
      ++j;
    }
    const double tpr0 = static_cast<double>(tp) / n_pos, fpr0 = static_cast<double>(fp) / n_neg;
    tp += dtp;
    fp += dfp;
    const double tpr1 = static_cast<double>(tp) / n_pos, fpr1 = static_cast<double>(fp) / n_neg;
    auc += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0;
    out.curve.push_back({fpr1, tpr1});
    i = j;
  }
  out.auc = auc;
  return out;
}

double accuracy_at_threshold(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                             double threshold) {
  if (scores.size() != labels.size()) throw DataError("accuracy: scores/labels size mismatch");
  if (scores.empty()) throw DataError("accuracy: empty input");
  std::int64_t ok = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ok += (scores[i] > threshold) == (labels[i] != 0);
  return static_cast<double>(ok) / static_cast<double>(scores.size());
}

void write_froc_csv(const FrocResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("write_froc_csv: cannot open " + path);
  out << "threshold,recall,fp_per_scan\n";
  for (const auto& p : r.curve) out << p.threshold << "," << p.recall << "," << p.fp_per_scan << "\n";
}

void write_roc_csv(const RocResult& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("write_roc_csv: cannot open " + path);
  out << "fpr,tpr\n";
  for (const auto& p : r.curve) out << p.fpr << "," << p.tpr << "\n";
}

}  // namespace pulmo
