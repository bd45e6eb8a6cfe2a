#pragma once

// Case records connect the on-disk layout to training: each case directory
// holds the raw volume, generative truth, and (after preprocessing) the
// normalized volume plus its lung-extent sidecar.

#include <string>
#include <vector>

#include "pulmo/boxes.hpp"
#include "pulmo/phantom.hpp"
#include "pulmo/volume.hpp"

namespace pulmo {

struct LungExtent {
  Vec3 lung_min_mm{0, 0, 0};
  Vec3 lung_max_mm{0, 0, 0};
};

// Sidecar path for a preprocessed volume header: foo.json -> foo.extent.json.
std::string extent_sidecar_path(const std::string& prep_path);
void save_extent(const LungExtent& e, const std::string& path);
LungExtent load_extent(const std::string& path);

struct CaseRecord {
  std::string id;
  std::string dir;      // case directory
  Volume prep;          // normalized, isotropic; shares the mm frame with truth
  LungExtent extent;
  CaseTruth truth;
  std::vector<Box> gt_boxes;  // nodule cubes in mm, derived from truth
  bool label = false;
  std::string split;
};

std::vector<Box> truth_boxes(const CaseTruth& t);

// Loads every case of `split` ("train", "val", or "" for all) from a dataset
// root containing manifest.json. Each case must already be preprocessed
// (prep.json + extent sidecar present), otherwise DataError suggests running
// the preprocess step first.
std::vector<CaseRecord> load_cases(const std::string& data_root, const std::string& split);

// Case directories inside the dataset root, in manifest order.
std::vector<std::string> case_dirs(const std::string& data_root, const std::string& split);

}  // namespace pulmo
