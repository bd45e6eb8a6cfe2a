#pragma once

// Training loops and run bookkeeping on top of the model components. Both
// loops are single-threaded and fully deterministic in (config, seed, data).

#include <string>
#include <vector>

#include "pulmo/classifier.hpp"
#include "pulmo/config.hpp"
#include "pulmo/dataset.hpp"
#include "pulmo/detector.hpp"

namespace pulmo {

struct DetectorTrainRow {
  int step = 0;
  double loss = 0, cls = 0, reg = 0;
};

struct DetectorTrainStats {
  std::vector<DetectorTrainRow> rows;
  double mean_tail_loss = 0;  // mean loss over the final 10% of steps
};

// SGD with momentum over randomly drawn training patches; case choice, patch
// sampling, anchor selection, and initialization all derive from `seed`. The
// learning rate drops 10x after lr_drop_frac of the steps. A non-finite loss
// throws NumericError. When log_csv is non-empty, writes "step,loss,cls,reg".
DetectorTrainStats train_detector(NNet<float>& net, const std::vector<CaseRecord>& cases,
                                  const DetectorConfig& cfg, std::uint64_t seed, const std::string& log_csv);

struct StageEvent {
  char stage = 'A';       // 'A', 'B', or 'E'
  std::string kind;       // "cls-epoch" or "det-epoch"
};

struct ClassifierTrainStats {
  std::vector<double> losses;          // one per optimization step, in order
  std::vector<StageEvent> journal;     // epoch sequence actually executed
  std::vector<double> preclip_norms;   // gradient norms before clipping (stages B/E)
  std::vector<double> postclip_norms;  // and after
  bool bn_changed_while_pinned = false;  // self-check; must remain false
  std::vector<std::vector<Proposal>> proposals;  // pre-generated, per case index
};

// Staged case-classifier training:
//   stage A: augmented instance crops, plain SGD;
//   stage B: adds global gradient-norm clipping at clip_norm;
//   stage E: pins BN running statistics and alternates one detection epoch
//            with one classification epoch, epochs_e times each.
// Instance proposals are generated once, before stage A, with the incoming
// detector weights. When log_csv is non-empty, writes "step,stage,kind,loss".
ClassifierTrainStats train_classifier_staged(NNet<float>& net, MilHead<float>& head,
                                             const std::vector<CaseRecord>& cases, const DetectorConfig& dcfg,
                                             const ClassifierConfig& ccfg, std::uint64_t seed,
                                             const std::string& log_csv);

// Writes run_manifest.json: the command, config hash, seed, and the full
// effective config, so any artifact directory is self-describing.
void write_run_manifest(const std::string& dir, const std::string& command, const RunConfig& cfg);

}  // namespace pulmo
