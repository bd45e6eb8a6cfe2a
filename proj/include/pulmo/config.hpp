#pragma once

// One JSON document configures every stage. Unspecified fields take the
// defaults of the selected scale profile: `desk_scale: true` (the default)
// chooses sizes that train end-to-end on a laptop-class machine in minutes;
// `desk_scale: false` chooses the full-size architecture.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pulmo/classifier.hpp"
#include "pulmo/detector.hpp"
#include "pulmo/phantom.hpp"
#include "pulmo/preprocess.hpp"

namespace pulmo {

struct EvalConfig {
  std::vector<double> fp_rates{0.125, 0.25, 0.5, 1, 2, 4, 8};
  double case_threshold = 0.5;  // accuracy operating point
};

struct RunConfig {
  std::uint64_t seed = 20260814;
  bool desk_scale = true;
  int workers = 1;
  PhantomConfig phantom;
  PreprocessConfig preprocess;
  DetectorConfig detector;
  ClassifierConfig classifier;
  EvalConfig eval;
};

// Scale-profile defaults; field-for-field the full-size profile keeps the
// reference architecture (patch 128, anchors 10/30/60 mm, 128-d features).
RunConfig default_config(bool desk_scale);

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);

// Reads, applies defaults, validates. ConfigError messages carry field paths.
RunConfig load_run_config(const std::string& path);

// Collects every violation (field path + reason) before throwing ConfigError.
void validate_config(const RunConfig& c);

// Hash of the canonical serialized form (keys sorted); stable across runs.
std::uint64_t config_hash(const RunConfig& c);

}  // namespace pulmo
