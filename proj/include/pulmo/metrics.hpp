#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pulmo/boxes.hpp"

namespace pulmo {

// A detection hits a ground-truth box iff the center distance is <= gt.r / 2
// (boundary inclusive). Matched detections are never false positives.
struct ScanDetections {
  std::vector<Proposal> detections;
  std::vector<Box> gts;  // scans without gts contribute false positives only
};

struct FrocPoint {
  double threshold = 0.0;
  double recall = 0.0;
  double fp_per_scan = 0.0;
};

struct FrocResult {
  std::vector<FrocPoint> curve;        // one point per distinct confidence, descending
  std::vector<double> recall_at_rate;  // step-interpolated recall at each requested FP/scan rate
  double avg_recall = 0.0;             // mean of recall_at_rate
};

// Sweeps every distinct confidence as a threshold (detections kept at
// confidence >= threshold). recall_at_rate picks, per rate, the point with the
// largest threshold whose FP/scan does not exceed the rate (0 when even the
// first point exceeds it). With zero gts everywhere, recalls are defined as 0.
FrocResult froc(const std::vector<ScanDetections>& scans, const std::vector<double>& fp_rates);

// Recall when only the k highest-confidence detections per scan are kept.
double topk_recall(const std::vector<ScanDetections>& scans, int k);

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
};

struct RocResult {
  std::vector<RocPoint> curve;  // (0,0) .. (1,1), tied scores grouped
  double auc = 0.0;             // trapezoidal; equals the Mann-Whitney statistic
};

// Throws DataError on degenerate single-class input.
RocResult roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels);

// Fraction of (score > threshold) == label.
double accuracy_at_threshold(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels,
                             double threshold);

void write_froc_csv(const FrocResult& r, const std::string& path);
void write_roc_csv(const RocResult& r, const std::string& path);

}  // namespace pulmo
