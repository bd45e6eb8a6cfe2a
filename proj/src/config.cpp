#include "pulmo/config.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace pulmo {

using nlohmann::json;

RunConfig default_config(bool desk_scale) {
  RunConfig c;
  c.desk_scale = desk_scale;
  if (!desk_scale) {
    c.detector.net = NNetConfig{};  // 24 / {32,64,64,64} / deconv 64 / feature 128
    c.detector.patch_size = 128;
    c.detector.anchors_mm = {10, 30, 60};
    c.detector.infer_block = 208;
    c.detector.infer_overlap = 32;
    c.classifier.crop_size = 96;
    c.classifier.hidden = 64;
    return c;
  }
  // Desk profile: same topology, shrunk until a CPU trains it in minutes.
  NNetConfig n;
  n.pre_channels = 4;
  n.block_channels = {8, 16, 16, 16};
  n.units_per_block = 1;
  n.deconv_channels = 16;
  n.back3_channels = 16;
  n.feature_channels = 32;
  n.head_hidden = 16;
  n.n_anchors = 3;
  c.detector.net = n;
  c.detector.patch_size = 64;
  c.detector.anchors_mm = {8, 12, 18};
  c.detector.infer_block = 64;
  c.detector.infer_overlap = 16;
  c.detector.hnm_pool = 800;
  c.detector.hnm_keep = 2;
  c.classifier.crop_size = 32;
  c.classifier.hidden = 16;
  // Phantom bodies are ~1/6 scale, so the physical gates shrink with them.
  c.preprocess.min_volume_L = 0.02;
  c.preprocess.max_volume_L = 1.0;
  c.preprocess.slice_area_floor_mm2 = 300.0;
  c.preprocess.center_dist_cutoff_mm = 45.0;
  c.preprocess.dilation_voxels = 1;
  return c;
}

namespace {

// Overrides dst with any fields present in j; unknown keys are config errors
// (catches typos that would silently fall back to defaults).
struct Reader {
  const json& j;
  std::string prefix;
  std::vector<std::string>* errors;
  std::vector<std::string> seen;

  template <class T>
  void get(const char* key, T& dst) {
    seen.push_back(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
      dst = it->get<T>();
    } catch (const json::exception&) {
      errors->push_back(prefix + key + ": wrong type");
    }
  }
  void finish() {
    if (!j.is_object()) {
      errors->push_back(prefix.empty() ? std::string("config root: expected an object")
                                       : prefix + ": expected an object");
      return;
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool known = false;
      for (const auto& k : seen) known = known || (k == it.key());
      if (!known) errors->push_back(prefix + it.key() + ": unknown field");
    }
  }
};

void read_phantom(const json& j, PhantomConfig& c, std::vector<std::string>* errors) {
  Reader r{j, "phantom.", errors, {}};
  r.get("dims", c.dims);
  r.get("spacing_mm", c.spacing_mm);
  r.get("hu_air", c.hu_air);
  r.get("hu_tissue", c.hu_tissue);
  r.get("hu_bone", c.hu_bone);
  r.get("hu_nodule_lo", c.hu_nodule_lo);
  r.get("hu_nodule_hi", c.hu_nodule_hi);
  r.get("noise_sigma_hu", c.noise_sigma_hu);
  r.get("nodule_count_lo", c.nodule_count_lo);
  r.get("nodule_count_hi", c.nodule_count_hi);
  r.get("radius_lo_mm", c.radius_lo_mm);
  r.get("radius_hi_mm", c.radius_hi_mm);
  r.get("spiculation_prob", c.spiculation_prob);
  r.get("wall_attach_prob", c.wall_attach_prob);
  r.get("vessel_count", c.vessel_count);
  r.get("leak_p", c.leak_p);
  r.get("open_top_prob", c.open_top_prob);
  r.get("bridge_prob", c.bridge_prob);
  r.get("train_fraction", c.train_fraction);
  Reader rule{j.contains("malignancy_rule") ? j.at("malignancy_rule") : json::object(), "phantom.malignancy_rule.",
              errors, {}};
  rule.get("intercept", c.malignancy_rule.intercept);
  rule.get("size_coef", c.malignancy_rule.size_coef);
  rule.get("spiculation_coef", c.malignancy_rule.spiculation_coef);
  rule.get("nonsolid_coef", c.malignancy_rule.nonsolid_coef);
  rule.finish();
  r.seen.push_back("malignancy_rule");
  r.finish();
}

void read_preprocess(const json& j, PreprocessConfig& c, std::vector<std::string>* errors) {
  Reader r{j, "preprocess.", errors, {}};
  r.get("target_spacing_mm", c.target_spacing_mm);
  r.get("gaussian_sigma_px", c.gaussian_sigma_px);
  r.get("hu_threshold", c.hu_threshold);
  r.get("min_area_mm2", c.min_area_mm2);
  r.get("max_eccentricity", c.max_eccentricity);
  r.get("min_volume_L", c.min_volume_L);
  r.get("max_volume_L", c.max_volume_L);
  r.get("slice_area_floor_mm2", c.slice_area_floor_mm2);
  r.get("center_dist_cutoff_mm", c.center_dist_cutoff_mm);
  r.get("split_max_ratio", c.split_max_ratio);
  r.get("hull_area_ratio", c.hull_area_ratio);
  r.get("dilation_voxels", c.dilation_voxels);
  r.get("clip_lo_hu", c.clip_lo_hu);
  r.get("clip_hi_hu", c.clip_hi_hu);
  r.get("fill_value", c.fill_value);
  r.get("bone_threshold", c.bone_threshold);
  r.get("crop_margin_px", c.crop_margin_px);
  r.finish();
}

void read_net(const json& j, NNetConfig& c, std::vector<std::string>* errors) {
  Reader r{j, "detector.net.", errors, {}};
  r.get("pre_channels", c.pre_channels);
  r.get("block_channels", c.block_channels);
  r.get("units_per_block", c.units_per_block);
  r.get("deconv_channels", c.deconv_channels);
  r.get("back3_channels", c.back3_channels);
  r.get("feature_channels", c.feature_channels);
  r.get("head_hidden", c.head_hidden);
  r.get("n_anchors", c.n_anchors);
  r.finish();
}

void read_detector(const json& j, DetectorConfig& c, std::vector<std::string>* errors) {
  Reader r{j, "detector.", errors, {}};
  if (j.contains("net")) read_net(j.at("net"), c.net, errors);
  r.seen.push_back("net");
  r.get("patch_size", c.patch_size);
  r.get("anchors_mm", c.anchors_mm);
  r.get("iou_pos", c.iou_pos);
  r.get("iou_neg", c.iou_neg);
  r.get("p_targeted", c.p_targeted);
  r.get("margin_px", c.margin_px);
  r.get("resize_lo", c.resize_lo);
  r.get("resize_hi", c.resize_hi);
  r.get("big1_mm", c.big1_mm);
  r.get("big2_mm", c.big2_mm);
  r.get("big1_weight", c.big1_weight);
  r.get("big2_weight", c.big2_weight);
  r.get("hnm_pool", c.hnm_pool);
  r.get("hnm_keep", c.hnm_keep);
  r.get("pad_value", c.pad_value);
  r.get("steps", c.steps);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("lr_drop_frac", c.lr_drop_frac);
  r.get("infer_block", c.infer_block);
  r.get("infer_overlap", c.infer_overlap);
  r.get("conf_threshold", c.conf_threshold);
  r.get("nms_iou", c.nms_iou);
  r.finish();
}

void read_classifier(const json& j, ClassifierConfig& c, std::vector<std::string>* errors) {
  Reader r{j, "classifier.", errors, {}};
  r.get("crop_size", c.crop_size);
  r.get("top_k", c.top_k);
  r.get("hidden", c.hidden);
  r.get("pooling", c.pooling);
  r.get("epochs_a", c.epochs_a);
  r.get("epochs_b", c.epochs_b);
  r.get("epochs_e", c.epochs_e);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("clip_norm", c.clip_norm);
  r.get("resize_lo", c.resize_lo);
  r.get("resize_hi", c.resize_hi);
  r.get("shift_frac", c.shift_frac);
  r.get("rotate", c.rotate);
  r.get("prob_eps", c.prob_eps);
  r.get("pad_value", c.pad_value);
  r.finish();
}

void read_eval(const json& j, EvalConfig& c, std::vector<std::string>* errors) {
  Reader r{j, "eval.", errors, {}};
  r.get("fp_rates", c.fp_rates);
  r.get("case_threshold", c.case_threshold);
  r.finish();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("config root: expected a JSON object");
  bool desk = true;
  if (j.contains("desk_scale")) {
    if (j.at("desk_scale").is_boolean()) desk = j.at("desk_scale").get<bool>();
    else errors.push_back("desk_scale: wrong type");
  }
  RunConfig c = default_config(desk);
  Reader r{j, "", &errors, {}};
  r.get("seed", c.seed);
  r.get("desk_scale", c.desk_scale);
  r.get("workers", c.workers);
  if (j.contains("phantom")) read_phantom(j.at("phantom"), c.phantom, &errors);
  if (j.contains("preprocess")) read_preprocess(j.at("preprocess"), c.preprocess, &errors);
  if (j.contains("detector")) read_detector(j.at("detector"), c.detector, &errors);
  if (j.contains("classifier")) read_classifier(j.at("classifier"), c.classifier, &errors);
  if (j.contains("eval")) read_eval(j.at("eval"), c.eval, &errors);
  for (const char* k : {"phantom", "preprocess", "detector", "classifier", "eval"}) r.seen.push_back(k);
  r.finish();
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  validate_config(c);
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["desk_scale"] = c.desk_scale;
  j["workers"] = c.workers;
  j["phantom"] = {
      {"dims", c.phantom.dims},
      {"spacing_mm", c.phantom.spacing_mm},
      {"hu_air", c.phantom.hu_air},
      {"hu_tissue", c.phantom.hu_tissue},
      {"hu_bone", c.phantom.hu_bone},
      {"hu_nodule_lo", c.phantom.hu_nodule_lo},
      {"hu_nodule_hi", c.phantom.hu_nodule_hi},
      {"noise_sigma_hu", c.phantom.noise_sigma_hu},
      {"nodule_count_lo", c.phantom.nodule_count_lo},
      {"nodule_count_hi", c.phantom.nodule_count_hi},
      {"radius_lo_mm", c.phantom.radius_lo_mm},
      {"radius_hi_mm", c.phantom.radius_hi_mm},
      {"spiculation_prob", c.phantom.spiculation_prob},
      {"wall_attach_prob", c.phantom.wall_attach_prob},
      {"vessel_count", c.phantom.vessel_count},
      {"leak_p", c.phantom.leak_p},
      {"open_top_prob", c.phantom.open_top_prob},
      {"bridge_prob", c.phantom.bridge_prob},
      {"train_fraction", c.phantom.train_fraction},
      {"malignancy_rule",
       {{"intercept", c.phantom.malignancy_rule.intercept},
        {"size_coef", c.phantom.malignancy_rule.size_coef},
        {"spiculation_coef", c.phantom.malignancy_rule.spiculation_coef},
        {"nonsolid_coef", c.phantom.malignancy_rule.nonsolid_coef}}},
  };
  j["preprocess"] = {
      {"target_spacing_mm", c.preprocess.target_spacing_mm},
      {"gaussian_sigma_px", c.preprocess.gaussian_sigma_px},
      {"hu_threshold", c.preprocess.hu_threshold},
      {"min_area_mm2", c.preprocess.min_area_mm2},
      {"max_eccentricity", c.preprocess.max_eccentricity},
      {"min_volume_L", c.preprocess.min_volume_L},
      {"max_volume_L", c.preprocess.max_volume_L},
      {"slice_area_floor_mm2", c.preprocess.slice_area_floor_mm2},
      {"center_dist_cutoff_mm", c.preprocess.center_dist_cutoff_mm},
      {"split_max_ratio", c.preprocess.split_max_ratio},
      {"hull_area_ratio", c.preprocess.hull_area_ratio},
      {"dilation_voxels", c.preprocess.dilation_voxels},
      {"clip_lo_hu", c.preprocess.clip_lo_hu},
      {"clip_hi_hu", c.preprocess.clip_hi_hu},
      {"fill_value", c.preprocess.fill_value},
      {"bone_threshold", c.preprocess.bone_threshold},
      {"crop_margin_px", c.preprocess.crop_margin_px},
  };
  j["detector"] = {
      {"net",
       {{"pre_channels", c.detector.net.pre_channels},
        {"block_channels", c.detector.net.block_channels},
        {"units_per_block", c.detector.net.units_per_block},
        {"deconv_channels", c.detector.net.deconv_channels},
        {"back3_channels", c.detector.net.back3_channels},
        {"feature_channels", c.detector.net.feature_channels},
        {"head_hidden", c.detector.net.head_hidden},
        {"n_anchors", c.detector.net.n_anchors}}},
      {"patch_size", c.detector.patch_size},
      {"anchors_mm", c.detector.anchors_mm},
      {"iou_pos", c.detector.iou_pos},
      {"iou_neg", c.detector.iou_neg},
      {"p_targeted", c.detector.p_targeted},
      {"margin_px", c.detector.margin_px},
      {"resize_lo", c.detector.resize_lo},
      {"resize_hi", c.detector.resize_hi},
      {"big1_mm", c.detector.big1_mm},
      {"big2_mm", c.detector.big2_mm},
      {"big1_weight", c.detector.big1_weight},
      {"big2_weight", c.detector.big2_weight},
      {"hnm_pool", c.detector.hnm_pool},
      {"hnm_keep", c.detector.hnm_keep},
      {"pad_value", c.detector.pad_value},
      {"steps", c.detector.steps},
      {"lr", c.detector.lr},
      {"momentum", c.detector.momentum},
      {"lr_drop_frac", c.detector.lr_drop_frac},
      {"infer_block", c.detector.infer_block},
      {"infer_overlap", c.detector.infer_overlap},
      {"conf_threshold", c.detector.conf_threshold},
      {"nms_iou", c.detector.nms_iou},
  };
  j["classifier"] = {
      {"crop_size", c.classifier.crop_size},
      {"top_k", c.classifier.top_k},
      {"hidden", c.classifier.hidden},
      {"pooling", c.classifier.pooling},
      {"epochs_a", c.classifier.epochs_a},
      {"epochs_b", c.classifier.epochs_b},
      {"epochs_e", c.classifier.epochs_e},
      {"lr", c.classifier.lr},
      {"momentum", c.classifier.momentum},
      {"clip_norm", c.classifier.clip_norm},
      {"resize_lo", c.classifier.resize_lo},
      {"resize_hi", c.classifier.resize_hi},
      {"shift_frac", c.classifier.shift_frac},
      {"rotate", c.classifier.rotate},
      {"prob_eps", c.classifier.prob_eps},
      {"pad_value", c.classifier.pad_value},
  };
  j["eval"] = {
      {"fp_rates", c.eval.fp_rates},
      {"case_threshold", c.eval.case_threshold},
  };
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

void validate_config(const RunConfig& c) {
  std::vector<std::string> errors;
  auto require = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };

  require(c.workers >= 1, "workers: must be >= 1");

  require(c.phantom.dims[0] > 0 && c.phantom.dims[1] > 0 && c.phantom.dims[2] > 0,
          "phantom.dims: must be positive");
  require(c.phantom.spacing_mm > 0, "phantom.spacing_mm: must be > 0");
  require(c.phantom.nodule_count_lo >= 0 && c.phantom.nodule_count_hi >= c.phantom.nodule_count_lo,
          "phantom.nodule_count_lo/hi: need 0 <= lo <= hi");
  require(c.phantom.radius_lo_mm > 0 && c.phantom.radius_hi_mm >= c.phantom.radius_lo_mm,
          "phantom.radius_lo_mm/hi: need 0 < lo <= hi");
  require(c.phantom.leak_p >= 0 && c.phantom.leak_p < 1, "phantom.leak_p: must be in [0, 1)");
  require(c.phantom.train_fraction > 0 && c.phantom.train_fraction < 1,
          "phantom.train_fraction: must be in (0, 1)");

  require(c.preprocess.target_spacing_mm > 0, "preprocess.target_spacing_mm: must be > 0");
  require(c.preprocess.min_volume_L > 0 && c.preprocess.max_volume_L > c.preprocess.min_volume_L,
          "preprocess.min_volume_L/max_volume_L: need 0 < min < max");
  require(c.preprocess.clip_hi_hu > c.preprocess.clip_lo_hu, "preprocess.clip_lo_hu/hi: need lo < hi");
  require(c.preprocess.dilation_voxels >= 0, "preprocess.dilation_voxels: must be >= 0");
  require(c.preprocess.fill_value >= 0 && c.preprocess.fill_value <= 255,
          "preprocess.fill_value: must be in [0, 255]");

  const auto& d = c.detector;
  require(d.patch_size > 0 && d.patch_size % 16 == 0, "detector.patch_size: must be a positive multiple of 16");
  require(!d.anchors_mm.empty(), "detector.anchors_mm: need at least one scale");
  for (double a : d.anchors_mm) require(a > 0, "detector.anchors_mm: scales must be > 0");
  require(d.net.n_anchors == static_cast<int>(d.anchors_mm.size()),
          "detector.net.n_anchors: must equal the number of anchor scales");
  require(d.iou_pos > d.iou_neg && d.iou_neg >= 0 && d.iou_pos <= 1,
          "detector.iou_pos/iou_neg: need 0 <= neg < pos <= 1");
  require(d.p_targeted >= 0 && d.p_targeted <= 1, "detector.p_targeted: must be in [0, 1]");
  require(d.resize_lo > 0 && d.resize_hi >= d.resize_lo, "detector.resize_lo/hi: need 0 < lo <= hi");
  require(d.steps > 0, "detector.steps: must be > 0");
  require(d.lr > 0, "detector.lr: must be > 0");
  require(d.momentum >= 0 && d.momentum < 1, "detector.momentum: must be in [0, 1)");
  require(d.infer_block > 0 && d.infer_block % 16 == 0,
          "detector.infer_block: must be a positive multiple of 16");
  require(d.infer_overlap > 0 && d.infer_overlap % 8 == 0 && d.infer_overlap < d.infer_block,
          "detector.infer_overlap: must be a positive multiple of 8 below infer_block");
  require(d.conf_threshold > 0 && d.conf_threshold < 1, "detector.conf_threshold: must be in (0, 1)");
  require(d.nms_iou >= 0 && d.nms_iou <= 1, "detector.nms_iou: must be in [0, 1]");
  require(d.pad_value >= 0 && d.pad_value <= 255, "detector.pad_value: must be in [0, 255]");
  require(d.net.pre_channels > 0 && d.net.deconv_channels > 0 && d.net.back3_channels > 0 &&
              d.net.feature_channels > 0 && d.net.head_hidden > 0 && d.net.units_per_block >= 1,
          "detector.net: channel counts must be positive and units_per_block >= 1");
  for (int b : d.net.block_channels) require(b > 0, "detector.net.block_channels: must be positive");

  const auto& l = c.classifier;
  require(l.crop_size > 0 && l.crop_size % 16 == 0, "classifier.crop_size: must be a positive multiple of 16");
  require(l.top_k > 0, "classifier.top_k: must be > 0");
  require(l.hidden > 0, "classifier.hidden: must be > 0");
  try {
    pooling_from_string(l.pooling);
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  require(l.epochs_a >= 0 && l.epochs_b >= 0 && l.epochs_e >= 0,
          "classifier.epochs_a/b/e: must be >= 0");
  require(l.lr > 0, "classifier.lr: must be > 0");
  require(l.momentum >= 0 && l.momentum < 1, "classifier.momentum: must be in [0, 1)");
  require(l.clip_norm > 0, "classifier.clip_norm: must be > 0");
  require(l.resize_lo > 0 && l.resize_hi >= l.resize_lo, "classifier.resize_lo/hi: need 0 < lo <= hi");
  require(l.shift_frac >= 0, "classifier.shift_frac: must be >= 0");
  require(l.prob_eps > 0 && l.prob_eps < 0.5, "classifier.prob_eps: must be in (0, 0.5)");

  require(!c.eval.fp_rates.empty(), "eval.fp_rates: need at least one rate");
  for (double r : c.eval.fp_rates) require(r > 0, "eval.fp_rates: rates must be > 0");
  require(c.eval.case_threshold > 0 && c.eval.case_threshold < 1,
          "eval.case_threshold: must be in (0, 1)");

  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

std::uint64_t config_hash(const RunConfig& c) {
  // nlohmann objects iterate keys in sorted order, so dump() is canonical.
  return fnv1a64(run_config_to_json(c).dump());
}

}  // namespace pulmo
