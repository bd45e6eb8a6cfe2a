#include "pulmo/pipeline.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pulmo/optim.hpp"

namespace pulmo {

namespace fs = std::filesystem;

DetectorTrainStats train_detector(NNet<float>& net, const std::vector<CaseRecord>& cases,
                                  const DetectorConfig& cfg, std::uint64_t seed, const std::string& log_csv) {
  if (cases.empty()) throw DataError("train-detector: no training cases");
  Rng rng(derive_seed(seed, "detector-train", 0));
  Sgd<float> opt(net.named_params(), static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum));

  std::ofstream csv;
  if (!log_csv.empty()) {
    csv.open(log_csv);
    if (!csv) throw DataError("train-detector: cannot write " + log_csv);
    csv << "step,loss,cls,reg\n";
  }

  DetectorTrainStats stats;
  const int drop_at = static_cast<int>(cfg.lr_drop_frac * cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    if (step == drop_at) opt.set_lr(static_cast<float>(cfg.lr * 0.1));
    const auto& rec = cases[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cases.size()) - 1))];
    PatchSample<float> patch = sample_patch<float>(rec, cfg, rng);

    Tape<float> tape;
    opt.zero_grad();
    NNetOut<float> fwd = net.forward(&tape, patch.input, patch.coords, /*training=*/true);
    DetectorLoss<float> loss = detector_loss(&tape, fwd.out, patch.gts, cfg, rng);
    if (!loss.total.defined()) continue;  // no anchors selected in this patch
    const double lv = static_cast<double>(loss.total.item());
    if (!std::isfinite(lv))
      throw NumericError("train-detector: non-finite loss at step " + std::to_string(step));
    tape.backward(loss.total);
    opt.step();

    stats.rows.push_back({step, lv, loss.cls, loss.reg});
    if (csv.is_open())
      csv << step << "," << lv << "," << loss.cls << "," << loss.reg << "\n";
  }

  const std::size_t tail = std::max<std::size_t>(1, stats.rows.size() / 10);
  double acc = 0;
  for (std::size_t i = stats.rows.size() - tail; i < stats.rows.size(); ++i) acc += stats.rows[i].loss;
  stats.mean_tail_loss = acc / static_cast<double>(tail);
  return stats;
}

namespace {

// Flat snapshot of every BN running statistic, for the pinned-stats check.
std::vector<float> bn_snapshot(NNet<float>& net) {
  std::vector<float> out;
  for (auto& b : net.named_buffers()) out.insert(out.end(), b.data->data(), b.data->data() + b.data->size());
  return out;
}

}  // namespace

ClassifierTrainStats train_classifier_staged(NNet<float>& net, MilHead<float>& head,
                                             const std::vector<CaseRecord>& cases, const DetectorConfig& dcfg,
                                             const ClassifierConfig& ccfg, std::uint64_t seed,
                                             const std::string& log_csv) {
  if (cases.empty()) throw DataError("train-classifier: no training cases");
  ClassifierTrainStats stats;

  // Instance proposals come from the incoming detector weights, once.
  for (const auto& rec : cases)
    stats.proposals.push_back(sliding_window_infer(net, rec.prep, rec.extent, dcfg));

  std::vector<NamedParam<float>> params = net.named_params();
  for (auto& p : head.named_params()) params.push_back(p);
  Sgd<float> opt(std::move(params), static_cast<float>(ccfg.lr), static_cast<float>(ccfg.momentum));

  std::ofstream csv;
  if (!log_csv.empty()) {
    csv.open(log_csv);
    if (!csv) throw DataError("train-classifier: cannot write " + log_csv);
    csv << "step,stage,kind,loss\n";
  }

  Rng rng(derive_seed(seed, "classifier-train", 0));
  int step = 0;
  const int C = ccfg.crop_size, G = C / kGridStride, k = ccfg.top_k;

  auto cls_epoch = [&](char stage, bool clip) {
    std::vector<int> order(cases.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    for (int ci : order) {
      const CaseRecord& rec = cases[static_cast<std::size_t>(ci)];
      std::vector<SelectedInstance> picked =
          select_instances(stats.proposals[static_cast<std::size_t>(ci)], k, /*train=*/true, &rng);
      Tensor<float> input = Tensor<float>::zeros({k, 1, C, C, C});
      Tensor<float> coords = Tensor<float>::zeros({k, 3, G, G, G});
      for (int i = 0; i < k; ++i) {
        const auto& inst = picked[static_cast<std::size_t>(i)];
        CropAugment aug;
        if (!inst.blank) aug = draw_crop_augment(ccfg, inst.prop.box.r, rng);
        fill_instance_crop(rec.prep, rec.extent, inst, ccfg, aug, input, coords, i);
      }

      Tape<float> tape;
      opt.zero_grad();
      Tensor<float> features = instance_features(&tape, net, input, coords, /*training=*/true);
      CaseOutput<float> out = mil_case_prob(&tape, features, head);
      Tensor<float> loss = bce_on_prob(&tape, out.case_p, rec.label ? 1.0f : 0.0f,
                                       static_cast<float>(ccfg.prob_eps));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("train-classifier: non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
      if (clip) {
        stats.preclip_norms.push_back(
            static_cast<double>(opt.clip_global_norm(static_cast<float>(ccfg.clip_norm))));
        stats.postclip_norms.push_back(static_cast<double>(opt.grad_norm()));
      }
      opt.step();
      stats.losses.push_back(lv);
      if (csv.is_open()) csv << step << "," << stage << ",cls," << lv << "\n";
      ++step;
    }
    stats.journal.push_back({stage, "cls-epoch"});
  };

  auto det_epoch = [&](char stage, bool clip) {
    std::vector<int> order(cases.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    for (int ci : order) {
      const CaseRecord& rec = cases[static_cast<std::size_t>(ci)];
      PatchSample<float> patch = sample_patch<float>(rec, dcfg, rng);
      Tape<float> tape;
      opt.zero_grad();
      NNetOut<float> fwd = net.forward(&tape, patch.input, patch.coords, /*training=*/true);
      DetectorLoss<float> loss = detector_loss(&tape, fwd.out, patch.gts, dcfg, rng);
      if (!loss.total.defined()) continue;
      const double lv = static_cast<double>(loss.total.item());
      if (!std::isfinite(lv))
        throw NumericError("train-classifier: non-finite detection loss at step " + std::to_string(step));
      tape.backward(loss.total);
      if (clip) {
        stats.preclip_norms.push_back(
            static_cast<double>(opt.clip_global_norm(static_cast<float>(ccfg.clip_norm))));
        stats.postclip_norms.push_back(static_cast<double>(opt.grad_norm()));
      }
      opt.step();
      stats.losses.push_back(lv);
      if (csv.is_open()) csv << step << "," << stage << ",det," << lv << "\n";
      ++step;
    }
    stats.journal.push_back({stage, "det-epoch"});
  };

  for (int e = 0; e < ccfg.epochs_a; ++e) cls_epoch('A', /*clip=*/false);
  for (int e = 0; e < ccfg.epochs_b; ++e) cls_epoch('B', /*clip=*/true);

  net.bn_frozen = true;
  const std::vector<float> pinned = bn_snapshot(net);
  for (int e = 0; e < ccfg.epochs_e; ++e) {
    det_epoch('E', /*clip=*/true);
    cls_epoch('E', /*clip=*/true);
  }
  if (bn_snapshot(net) != pinned) stats.bn_changed_while_pinned = true;
  net.bn_frozen = false;

  return stats;
}

void write_run_manifest(const std::string& dir, const std::string& command, const RunConfig& cfg) {
  fs::create_directories(dir);
  nlohmann::json j = {
      {"command", command},
      {"seed", cfg.seed},
      {"config_hash", config_hash(cfg)},
      {"config", run_config_to_json(cfg)},
  };
  const std::string path = (fs::path(dir) / ("run_" + command + ".json")).string();
  std::ofstream f(path);
  if (!f) throw DataError("run manifest: cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace pulmo
