#include "pulmo/dataset.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace pulmo {

using nlohmann::json;
namespace fs = std::filesystem;

std::string extent_sidecar_path(const std::string& prep_path) {
  auto dot = prep_path.find_last_of('.');
  auto slash = prep_path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return prep_path + ".extent.json";
  return prep_path.substr(0, dot) + ".extent.json";
}

void save_extent(const LungExtent& e, const std::string& path) {
  json j = {
      {"lung_min_mm", {e.lung_min_mm[0], e.lung_min_mm[1], e.lung_min_mm[2]}},
      {"lung_max_mm", {e.lung_max_mm[0], e.lung_max_mm[1], e.lung_max_mm[2]}},
  };
  std::ofstream f(path);
  if (!f) throw DataError("extent: cannot write " + path);
  f << j.dump(2) << "\n";
}

LungExtent load_extent(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("extent: cannot open " + path);
  json j;
  try {
    f >> j;
    LungExtent e;
    for (int a = 0; a < 3; ++a) {
      e.lung_min_mm[static_cast<std::size_t>(a)] = j.at("lung_min_mm").at(a).get<double>();
      e.lung_max_mm[static_cast<std::size_t>(a)] = j.at("lung_max_mm").at(a).get<double>();
    }
    return e;
  } catch (const json::exception& ex) {
    throw DataError("extent: malformed " + path + ": " + ex.what());
  }
}

std::vector<Box> truth_boxes(const CaseTruth& t) {
  std::vector<Box> out;
  out.reserve(t.nodules.size());
  for (const auto& n : t.nodules) out.push_back(Box{n.center_mm[0], n.center_mm[1], n.center_mm[2], n.r_mm});
  return out;
}

std::vector<std::string> case_dirs(const std::string& data_root, const std::string& split) {
  DatasetManifest m = load_manifest((fs::path(data_root) / "manifest.json").string());
  std::vector<std::string> dirs;
  for (const auto& e : m.cases)
    if (split.empty() || e.split == split) dirs.push_back((fs::path(data_root) / e.dir).string());
  return dirs;
}

std::vector<CaseRecord> load_cases(const std::string& data_root, const std::string& split) {
  DatasetManifest m = load_manifest((fs::path(data_root) / "manifest.json").string());
  std::vector<CaseRecord> cases;
  for (const auto& e : m.cases) {
    if (!split.empty() && e.split != split) continue;
    CaseRecord rec;
    rec.id = e.id;
    rec.dir = (fs::path(data_root) / e.dir).string();
    rec.split = e.split;
    const std::string prep_path = (fs::path(rec.dir) / "prep.json").string();
    if (!fs::exists(prep_path))
      throw DataError("dataset: case '" + e.id + "' has no preprocessed volume (" + prep_path +
                      "); run preprocess first");
    rec.prep = load_volume(prep_path);
    if (rec.prep.value_kind != ValueKind::normalized_u8)
      throw DataError("dataset: case '" + e.id + "' volume is not normalized; run preprocess first");
    rec.extent = load_extent(extent_sidecar_path(prep_path));
    rec.truth = load_truth((fs::path(rec.dir) / "truth.json").string());
    rec.gt_boxes = truth_boxes(rec.truth);
    rec.label = rec.truth.label;
    cases.push_back(std::move(rec));
  }
  return cases;
}

}  // namespace pulmo
