// pulmo: phantom chest-CT pipeline driver.
//
//   make-phantom       generate a synthetic dataset
//   preprocess         normalize volumes and extract lung masks
//   train-detector     train the nodule detector
//   train-classifier   train the case classifier (staged plan)
//   infer              whole-volume nodule detection -> proposals
//   predict-case       case probability + top nodules -> case JSON
//   evaluate-detector  FROC over a directory of proposal files
//   evaluate-case      ROC/accuracy over a directory of case files
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pulmo/checkpoint.hpp"
#include "pulmo/metrics.hpp"
#include "pulmo/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pulmo;

namespace {

RunConfig load_cfg(const std::string& path) {
  return path.empty() ? default_config(true) : load_run_config(path);
}

// ---------------------------------------------------------------------------
// Checkpoint helpers
// ---------------------------------------------------------------------------

Checkpoint detector_checkpoint(NNet<float>& net, const std::vector<double>& anchors_mm) {
  Checkpoint ck;
  ck.kind = "detector";
  ck.meta()["net"] = nnet_config_to_json(net.cfg);
  ck.meta()["anchors_mm"] = anchors_mm;
  pack_net(ck, net, "net.");
  return ck;
}

void pack_head(Checkpoint& ck, MilHead<float>& head, const ClassifierConfig& ccfg) {
  ck.meta()["pooling"] = to_string(head.pooling);
  ck.meta()["hidden"] = head.fc1.fout;
  ck.meta()["top_k"] = ccfg.top_k;
  ck.meta()["crop_size"] = ccfg.crop_size;
  for (auto& p : head.named_params()) {
    CheckpointTensor t;
    t.name = p.name;
    t.shape = p.tensor.shape();
    t.data.assign(p.tensor.data(), p.tensor.data() + p.tensor.size());
    ck.tensors.push_back(std::move(t));
  }
}

void unpack_head(const Checkpoint& ck, MilHead<float>& head) {
  for (auto& p : head.named_params()) {
    const auto* t = ck.find(p.name);
    if (!t) throw DataError("checkpoint: missing tensor '" + p.name + "'");
    if (t->shape != p.tensor.shape())
      throw DataError("checkpoint: shape mismatch for tensor '" + p.name + "'");
    for (std::int64_t i = 0; i < p.tensor.size(); ++i)
      p.tensor.value()[i] = t->data[static_cast<std::size_t>(i)];
  }
}

// Loads the backbone from a detector or classifier checkpoint and aligns the
// detector config (topology + anchors) with what was trained.
NNet<float> load_backbone(const Checkpoint& ck, DetectorConfig& dcfg) {
  dcfg.net = nnet_config_from_json(ck.meta().at("net"));
  dcfg.anchors_mm = ck.meta().at("anchors_mm").get<std::vector<double>>();
  NNet<float> net;
  Rng rng(0);  // weights are overwritten immediately
  net.init(dcfg.net, rng);
  unpack_net(ck, net, "net.");
  return net;
}

MilHead<float> load_head(const Checkpoint& ck, const NNetConfig& net_cfg) {
  if (ck.kind != "classifier")
    throw DataError("checkpoint: expected a classifier checkpoint, got '" + ck.kind + "'");
  MilHead<float> head;
  Rng rng(0);
  head.init(net_cfg.feature_channels, ck.meta().at("hidden").get<int>(),
            pooling_from_string(ck.meta().at("pooling").get<std::string>()), rng);
  unpack_head(ck, head);
  return head;
}

// ---------------------------------------------------------------------------
// Shared I/O
// ---------------------------------------------------------------------------

struct PrepInput {
  Volume prep;
  LungExtent extent;
};

PrepInput load_prep_input(const std::string& path) {
  PrepInput in;
  in.prep = load_volume(path);
  if (in.prep.value_kind != ValueKind::normalized_u8)
    throw DataError("volume " + path + " is not normalized; run preprocess first");
  const std::string side = extent_sidecar_path(path);
  if (!fs::exists(side))
    throw DataError("missing lung-extent sidecar " + side + "; run preprocess first");
  in.extent = load_extent(side);
  return in;
}

void write_case_json(const CasePrediction& pred, const std::string& id, const std::string& path) {
  json nodules = json::array();
  for (const auto& n : pred.nodules)
    nodules.push_back({{"x", n.box.x}, {"y", n.box.y}, {"z", n.box.z}, {"r", n.box.r},
                       {"confidence", n.confidence}, {"p_i", n.p_i}});
  json j = {{"id", id}, {"case_p", pred.case_p}, {"leak_p", pred.leak_p}, {"nodules", nodules}};
  std::ofstream f(path);
  if (!f) throw DataError("predict-case: cannot write " + path);
  f << j.dump(2) << "\n";
}

double read_case_p(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("evaluate-case: cannot open prediction " + path);
  json j;
  try {
    f >> j;
    return j.at("case_p").get<double>();
  } catch (const json::exception& e) {
    throw DataError("evaluate-case: malformed prediction " + path + ": " + e.what());
  }
}

double bce_term(double p, double label, double eps) {
  const double pc = std::min(std::max(p, eps), 1.0 - eps);
  return -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_make_phantom(const std::string& cfg_path, const std::string& out, int cases,
                      std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_cfg(cfg_path);
  if (seed) cfg.seed = *seed;
  if (cases <= 0) throw ConfigError("make-phantom: --cases must be positive");
  emit_dataset(cfg.phantom, cfg.seed, cases, out);
  write_run_manifest(out, "make-phantom", cfg);
  std::cout << "wrote " << cases << " cases to " << out << "\n";
}

void preprocess_one(const std::string& in, const std::string& out, const PreprocessConfig& pcfg) {
  Volume raw = load_volume(in);
  PreprocessResult res = preprocess_volume(raw, pcfg);
  save_volume(res.prep, out);
  save_extent(LungExtent{res.lung_min_mm, res.lung_max_mm}, extent_sidecar_path(out));
}

void cmd_preprocess(const std::string& cfg_path, const std::string& in, const std::string& out,
                    const std::string& data) {
  RunConfig cfg = load_cfg(cfg_path);
  if (!data.empty()) {
    DatasetManifest m = load_manifest((fs::path(data) / "manifest.json").string());
    for (const auto& e : m.cases) {
      const fs::path dir = fs::path(data) / e.dir;
      preprocess_one((dir / "volume.json").string(), (dir / "prep.json").string(), cfg.preprocess);
      std::cout << "preprocessed " << e.id << "\n";
    }
    write_run_manifest(data, "preprocess", cfg);
    return;
  }
  if (in.empty() || out.empty())
    throw ConfigError("preprocess: need either --data or both --in and --out");
  preprocess_one(in, out, cfg.preprocess);
  std::cout << "wrote " << out << "\n";
}

void cmd_train_detector(const std::string& cfg_path, const std::string& data, const std::string& out,
                        std::string log_csv) {
  RunConfig cfg = load_cfg(cfg_path);
  std::vector<CaseRecord> cases = load_cases(data, "train");
  const fs::path out_dir = fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path();
  fs::create_directories(out_dir);
  if (log_csv.empty()) log_csv = (out_dir / "detector_train.csv").string();

  Rng init_rng(derive_seed(cfg.seed, "detector-init", 0));
  NNet<float> net;
  net.init(cfg.detector.net, init_rng);
  DetectorTrainStats stats = train_detector(net, cases, cfg.detector, cfg.seed, log_csv);

  save_checkpoint(out, detector_checkpoint(net, cfg.detector.anchors_mm));
  write_run_manifest(out_dir.string(), "train-detector", cfg);
  std::cout << "trained detector on " << cases.size() << " cases; tail loss " << stats.mean_tail_loss
            << "; checkpoint " << out << "\n";
}

void cmd_train_classifier(const std::string& cfg_path, const std::string& data, const std::string& det_ckpt,
                          const std::string& out, const std::string& pooling_override, std::string log_csv) {
  RunConfig cfg = load_cfg(cfg_path);
  if (!pooling_override.empty()) cfg.classifier.pooling = pooling_override;
  pooling_from_string(cfg.classifier.pooling);  // validate early

  Checkpoint det = load_checkpoint(det_ckpt);
  NNet<float> net = load_backbone(det, cfg.detector);
  std::vector<CaseRecord> cases = load_cases(data, "train");

  const fs::path out_dir = fs::path(out).parent_path().empty() ? "." : fs::path(out).parent_path();
  fs::create_directories(out_dir);
  if (log_csv.empty()) log_csv = (out_dir / "classifier_train.csv").string();

  Rng head_rng(derive_seed(cfg.seed, "classifier-init", 0));
  MilHead<float> head;
  head.init(cfg.detector.net.feature_channels, cfg.classifier.hidden,
            pooling_from_string(cfg.classifier.pooling), head_rng);

  ClassifierTrainStats stats =
      train_classifier_staged(net, head, cases, cfg.detector, cfg.classifier, cfg.seed, log_csv);
  if (stats.bn_changed_while_pinned)
    throw NumericError("train-classifier: BN statistics changed while pinned");

  // Keep the pre-generated proposals inspectable.
  const fs::path prop_dir = out_dir / "train_proposals";
  fs::create_directories(prop_dir);
  for (std::size_t i = 0; i < cases.size(); ++i)
    save_proposals(stats.proposals[i], (prop_dir / (cases[i].id + ".jsonl")).string());

  Checkpoint ck;
  ck.kind = "classifier";
  ck.meta()["net"] = nnet_config_to_json(net.cfg);
  ck.meta()["anchors_mm"] = cfg.detector.anchors_mm;
  pack_net(ck, net, "net.");
  pack_head(ck, head, cfg.classifier);
  save_checkpoint(out, ck);
  write_run_manifest(out_dir.string(), "train-classifier", cfg);

  double tail = 0;
  const std::size_t n_tail = std::max<std::size_t>(1, stats.losses.size() / 10);
  for (std::size_t i = stats.losses.size() - n_tail; i < stats.losses.size(); ++i) tail += stats.losses[i];
  std::cout << "trained classifier (" << cfg.classifier.pooling << ") on " << cases.size()
            << " cases; tail loss " << tail / static_cast<double>(n_tail) << "; checkpoint " << out << "\n";
}

void cmd_infer(const std::string& cfg_path, const std::string& ckpt_path, const std::string& in,
               const std::string& out, const std::string& data, const std::string& split) {
  RunConfig cfg = load_cfg(cfg_path);
  Checkpoint ck = load_checkpoint(ckpt_path);
  NNet<float> net = load_backbone(ck, cfg.detector);

  if (!data.empty()) {
    if (out.empty()) throw ConfigError("infer: --data mode needs --out directory");
    fs::create_directories(out);
    std::vector<CaseRecord> cases = load_cases(data, split);
    for (const auto& rec : cases) {
      std::vector<Proposal> props = sliding_window_infer(net, rec.prep, rec.extent, cfg.detector);
      save_proposals(props, (fs::path(out) / (rec.id + ".jsonl")).string());
      std::cout << rec.id << ": " << props.size() << " proposals\n";
    }
    write_run_manifest(out, "infer", cfg);
    return;
  }
  if (in.empty() || out.empty()) throw ConfigError("infer: need either --data or both --in and --out");
  PrepInput pin = load_prep_input(in);
  std::vector<Proposal> props = sliding_window_infer(net, pin.prep, pin.extent, cfg.detector);
  save_proposals(props, out);
  std::cout << props.size() << " proposals -> " << out << "\n";
}

void cmd_predict_case(const std::string& cfg_path, const std::string& ckpt_path, const std::string& in,
                      const std::string& out, const std::string& data, const std::string& split) {
  RunConfig cfg = load_cfg(cfg_path);
  Checkpoint ck = load_checkpoint(ckpt_path);
  NNet<float> net = load_backbone(ck, cfg.detector);
  MilHead<float> head = load_head(ck, net.cfg);
  cfg.classifier.crop_size = ck.meta().at("crop_size").get<int>();
  cfg.classifier.top_k = ck.meta().at("top_k").get<int>();

  if (!data.empty()) {
    if (out.empty()) throw ConfigError("predict-case: --data mode needs --out directory");
    fs::create_directories(out);
    std::vector<CaseRecord> cases = load_cases(data, split);
    for (const auto& rec : cases) {
      CasePrediction pred = predict_case(net, head, rec.prep, rec.extent, cfg.detector, cfg.classifier);
      write_case_json(pred, rec.id, (fs::path(out) / (rec.id + ".json")).string());
      std::cout << rec.id << ": case_p " << pred.case_p << "\n";
    }
    write_run_manifest(out, "predict-case", cfg);
    return;
  }
  if (in.empty() || out.empty()) throw ConfigError("predict-case: need either --data or both --in and --out");
  PrepInput pin = load_prep_input(in);
  CasePrediction pred = predict_case(net, head, pin.prep, pin.extent, cfg.detector, cfg.classifier);
  write_case_json(pred, fs::path(in).stem().string(), out);
  std::cout << "case_p " << pred.case_p << " -> " << out << "\n";
}

void cmd_evaluate_detector(const std::string& cfg_path, const std::string& pred_dir,
                           const std::string& truth_manifest, const std::string& split,
                           const std::string& out_csv) {
  RunConfig cfg = load_cfg(cfg_path);
  const fs::path root = fs::path(truth_manifest).parent_path();
  DatasetManifest m = load_manifest(truth_manifest);

  std::vector<ScanDetections> scans;
  int n_gts = 0;
  for (const auto& e : m.cases) {
    if (!split.empty() && e.split != split) continue;
    const std::string pred_path = (fs::path(pred_dir) / (e.id + ".jsonl")).string();
    if (!fs::exists(pred_path))
      throw DataError("evaluate-detector: missing predictions for case '" + e.id + "' (" + pred_path + ")");
    ScanDetections s;
    s.detections = load_proposals(pred_path);
    s.gts = truth_boxes(load_truth((root / e.dir / "truth.json").string()));
    n_gts += static_cast<int>(s.gts.size());
    scans.push_back(std::move(s));
  }
  if (scans.empty()) throw DataError("evaluate-detector: no cases matched split '" + split + "'");

  FrocResult fr = froc(scans, cfg.eval.fp_rates);
  write_froc_csv(fr, out_csv);

  json at = json::object();
  for (std::size_t i = 0; i < cfg.eval.fp_rates.size(); ++i)
    at[std::to_string(cfg.eval.fp_rates[i])] = fr.recall_at_rate[i];
  json summary = {{"avg_recall_7pt", fr.avg_recall}, {"recall_at_fp_per_scan", at},
                  {"n_scans", scans.size()}, {"n_nodules", n_gts}};
  const fs::path out_dir = fs::path(out_csv).parent_path().empty() ? "." : fs::path(out_csv).parent_path();
  std::ofstream sf(out_dir / "detector_summary.json");
  sf << summary.dump(2) << "\n";
  std::cout << "avg recall over rates: " << fr.avg_recall << " (" << scans.size() << " scans, " << n_gts
            << " nodules)\n";
}

void cmd_evaluate_case(const std::string& cfg_path, const std::string& pred_dir,
                       const std::string& truth_manifest, const std::string& split,
                       const std::string& out_csv, std::string froc_summary) {
  RunConfig cfg = load_cfg(cfg_path);
  (void)cfg;
  DatasetManifest m = load_manifest(truth_manifest);

  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  int n_train_pos = 0, n_train = 0;
  for (const auto& e : m.cases) {
    if (e.split == "train") {
      n_train += 1;
      n_train_pos += e.label ? 1 : 0;
    }
    if (!split.empty() && e.split != split) continue;
    const std::string pred_path = (fs::path(pred_dir) / (e.id + ".json")).string();
    if (!fs::exists(pred_path))
      throw DataError("evaluate-case: missing prediction for case '" + e.id + "' (" + pred_path + ")");
    scores.push_back(read_case_p(pred_path));
    labels.push_back(e.label ? 1 : 0);
  }
  if (scores.empty()) throw DataError("evaluate-case: no cases matched split '" + split + "'");

  RocResult roc = roc_auc(scores, labels);
  write_roc_csv(roc, out_csv);

  // Cross-entropy against a constant training-base-rate predictor.
  const double eps = 1e-7;
  double ce = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) ce += bce_term(scores[i], labels[i], eps);
  ce /= static_cast<double>(scores.size());
  const double base_rate =
      n_train > 0 ? std::min(0.95, std::max(0.05, static_cast<double>(n_train_pos) / n_train)) : 0.5;
  double baseline_ce = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) baseline_ce += bce_term(base_rate, labels[i], eps);
  baseline_ce /= static_cast<double>(scores.size());

  const fs::path out_dir = fs::path(out_csv).parent_path().empty() ? "." : fs::path(out_csv).parent_path();
  if (froc_summary.empty()) {
    const fs::path candidate = out_dir / "detector_summary.json";
    if (fs::exists(candidate)) froc_summary = candidate.string();
  }
  json avg_recall = nullptr;
  if (!froc_summary.empty()) {
    std::ifstream ff(froc_summary);
    if (!ff) throw DataError("evaluate-case: cannot open FROC summary " + froc_summary);
    json fj;
    try {
      ff >> fj;
      avg_recall = fj.at("avg_recall_7pt");
    } catch (const json::exception& e) {
      throw DataError("evaluate-case: malformed FROC summary " + froc_summary + ": " + e.what());
    }
  }

  json summary = {{"auc", roc.auc},
                  {"acc_at_0.5", accuracy_at_threshold(scores, labels, 0.5)},
                  {"avg_recall_7pt", avg_recall},
                  {"cross_entropy", ce},
                  {"baseline_cross_entropy", baseline_ce},
                  {"train_base_rate", base_rate},
                  {"n_cases", scores.size()}};
  std::ofstream sf(out_dir / "case_summary.json");
  sf << summary.dump(2) << "\n";
  std::cout << "auc " << roc.auc << ", ce " << ce << " (baseline " << baseline_ce << ") over "
            << scores.size() << " cases\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phantom chest-CT nodule detection and case classification"};
  app.require_subcommand(1);

  std::string cfg_path, in, out, data, split, ckpt, det_ckpt, truth, pred, pooling, log_csv, froc_summary;
  int cases = 0;
  std::optional<std::uint64_t> seed;

  auto* mk = app.add_subcommand("make-phantom", "generate a synthetic dataset");
  mk->add_option("--config", cfg_path, "config JSON");
  mk->add_option("--out", out, "dataset directory")->required();
  mk->add_option("--cases", cases, "number of cases")->required();
  mk->add_option("--seed", seed, "override config seed");

  auto* pp = app.add_subcommand("preprocess", "normalize volumes, extract lung masks");
  pp->add_option("--config", cfg_path, "config JSON");
  pp->add_option("--in", in, "input volume header (single mode)");
  pp->add_option("--out", out, "output volume header (single mode)");
  pp->add_option("--data", data, "dataset root (batch mode)");

  auto* td = app.add_subcommand("train-detector", "train the nodule detector");
  td->add_option("--config", cfg_path, "config JSON");
  td->add_option("--data", data, "dataset root")->required();
  td->add_option("--out", out, "output checkpoint path")->required();
  td->add_option("--log", log_csv, "training log CSV");

  auto* tc = app.add_subcommand("train-classifier", "train the case classifier");
  tc->add_option("--config", cfg_path, "config JSON");
  tc->add_option("--data", data, "dataset root")->required();
  tc->add_option("--detector", det_ckpt, "detector checkpoint")->required();
  tc->add_option("--out", out, "output checkpoint path")->required();
  tc->add_option("--pooling", pooling, "override pooling (max_p|noisy_or|leaky_noisy_or|feature_combine)");
  tc->add_option("--log", log_csv, "training log CSV");

  auto* inf = app.add_subcommand("infer", "whole-volume nodule detection");
  inf->add_option("--config", cfg_path, "config JSON");
  inf->add_option("--ckpt", ckpt, "detector (or classifier) checkpoint")->required();
  inf->add_option("--in", in, "preprocessed volume header (single mode)");
  inf->add_option("--out", out, "output: proposals JSONL (single) or directory (batch)");
  inf->add_option("--data", data, "dataset root (batch mode)");
  inf->add_option("--split", split, "split filter in batch mode (train|val; default all)");

  auto* pc = app.add_subcommand("predict-case", "case probability from a classifier checkpoint");
  pc->add_option("--config", cfg_path, "config JSON");
  pc->add_option("--ckpt", ckpt, "classifier checkpoint")->required();
  pc->add_option("--in", in, "preprocessed volume header (single mode)");
  pc->add_option("--out", out, "output: case JSON (single) or directory (batch)");
  pc->add_option("--data", data, "dataset root (batch mode)");
  pc->add_option("--split", split, "split filter in batch mode");

  auto* ed = app.add_subcommand("evaluate-detector", "FROC over proposal files");
  ed->add_option("--config", cfg_path, "config JSON");
  ed->add_option("--pred", pred, "directory of <case>.jsonl proposals")->required();
  ed->add_option("--truth", truth, "dataset manifest.json")->required();
  ed->add_option("--split", split, "split filter (default all)");
  ed->add_option("--out", out, "FROC curve CSV path")->required();

  auto* ec = app.add_subcommand("evaluate-case", "ROC/accuracy over case files");
  ec->add_option("--config", cfg_path, "config JSON");
  ec->add_option("--pred", pred, "directory of <case>.json predictions")->required();
  ec->add_option("--truth", truth, "dataset manifest.json")->required();
  ec->add_option("--split", split, "split filter (default all)");
  ec->add_option("--out", out, "ROC curve CSV path")->required();
  ec->add_option("--froc-summary", froc_summary, "detector summary JSON to merge avg_recall_7pt from");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (mk->parsed()) cmd_make_phantom(cfg_path, out, cases, seed);
    else if (pp->parsed()) cmd_preprocess(cfg_path, in, out, data);
    else if (td->parsed()) cmd_train_detector(cfg_path, data, out, log_csv);
    else if (tc->parsed()) cmd_train_classifier(cfg_path, data, det_ckpt, out, pooling, log_csv);
    else if (inf->parsed()) cmd_infer(cfg_path, ckpt, in, out, data, split);
    else if (pc->parsed()) cmd_predict_case(cfg_path, ckpt, in, out, data, split);
    else if (ed->parsed()) cmd_evaluate_detector(cfg_path, pred, truth, split, out);
    else if (ec->parsed()) cmd_evaluate_case(cfg_path, pred, truth, split, out, froc_summary);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
