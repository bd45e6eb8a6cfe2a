#pragma once

#include <string>
#include <vector>

#include "pulmo/rng.hpp"
#include "pulmo/volume.hpp"

namespace pulmo {

// Case labels follow a generative noisy-or: each nodule turns malignant with a
// logistic probability in (size, spiculation, non-solidity), plus an
// independent leak term, so the classifier's pooling assumptions hold in the
// data by construction.
struct MalignancyRule {
  double intercept = -5.5;
  double size_coef = 0.38;        // per mm of box side (2 * sphere radius)
  double spiculation_coef = 1.0;
  double nonsolid_coef = 0.5;     // multiplies (1 - solidity)
};

struct PhantomConfig {
  Index3 dims{88, 96, 96};  // (z, y, x)
  double spacing_mm = 1.0;
  double hu_air = -850.0;
  double hu_tissue = 40.0;
  double hu_bone = 700.0;
  double hu_nodule_lo = -100.0;  // solidity 0
  double hu_nodule_hi = 100.0;   // solidity 1
  double noise_sigma_hu = 20.0;
  int nodule_count_lo = 0;
  int nodule_count_hi = 4;
  double radius_lo_mm = 4.0;
  double radius_hi_mm = 7.5;
  double spiculation_prob = 0.35;
  double wall_attach_prob = 0.25;
  int vessel_count = 6;           // per lung
  double leak_p = 0.08;
  MalignancyRule malignancy_rule;
  double open_top_prob = 0.5;     // air slab above the body with an open airway
  double bridge_prob = 0.7;       // airway bridge joining the two lungs
  double train_fraction = 0.75;
};

struct TruthNodule {
  Vec3 center_mm{0, 0, 0};  // (z, y, x)
  double r_mm = 0.0;        // box side = 2 * sphere radius
  double malignancy = 0.0;  // generative probability, not the drawn outcome
  bool spiculated = false;
  bool wall_attached = false;
  double solidity = 1.0;
};

struct CaseTruth {
  std::vector<TruthNodule> nodules;
  bool label = false;  // drawn from the noisy-or rule
  double leak_p = 0.0;
};

struct PhantomCase {
  Volume volume;   // hu_int16, noisy
  Mask lung_mask;  // the two lung ellipsoids (anatomy, independent of content)
  Mask air_mask;   // voxels left at air attenuation (lungs minus lesions, airways, top slab)
  CaseTruth truth;
};

// Deterministic in (cfg, seed, case_index); every case regenerable in isolation.
PhantomCase generate_case(const PhantomConfig& cfg, std::uint64_t seed, int case_index);

struct DatasetEntry {
  std::string id;
  std::string dir;    // relative to the dataset root
  bool label = false;
  std::string split;  // "train" | "val"
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<DatasetEntry> cases;
};

// Writes case_<index>/volume.json|.raw + truth.json per case and manifest.json;
// split is a deterministic hash-rank partition of case ids at train_fraction.
DatasetManifest emit_dataset(const PhantomConfig& cfg, std::uint64_t seed, int n_cases, const std::string& out_dir);

std::vector<std::string> split_train_val(const std::vector<std::string>& ids, double train_fraction);

void save_truth(const CaseTruth& t, const std::string& path);
CaseTruth load_truth(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

}  // namespace pulmo
