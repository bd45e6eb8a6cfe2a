// End-to-end CLI contract, driven through the real binary: dataset generation
// determinism, run manifests, exit codes for config/data errors, checkpointed
// inference and case prediction, and the evaluation commands.

#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulmo/checkpoint.hpp"
#include "pulmo/classifier.hpp"
#include "pulmo/config.hpp"
#include "pulmo/phantom.hpp"

using namespace pulmo;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

// Runs the CLI with the given arguments, capturing stdout+stderr.
RunResult run_cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "pulmo_cli_out.txt";
  const std::string cmd = std::string(PULMO_BIN) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  std::ifstream f(log);
  std::stringstream ss;
  ss << f.rdbuf();
  r.output = ss.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Shared fixture: a small generated dataset, preprocessed once through the CLI.
const fs::path& fixture_dataset() {
  static fs::path dir = [] {
    const fs::path p = scratch("pulmo_cli_fixture");
    RunResult gen = run_cli("make-phantom --out " + p.string() + " --cases 3 --seed 41");
    REQUIRE(gen.code == 0);
    RunResult prep = run_cli("preprocess --data " + p.string());
    REQUIRE(prep.code == 0);
    return p;
  }();
  return dir;
}

NNetConfig small_net_config() {
  NNetConfig c;
  c.pre_channels = 2;
  c.block_channels = {2, 3, 3, 3};
  c.units_per_block = 1;
  c.deconv_channels = 2;
  c.back3_channels = 2;
  c.feature_channels = 4;
  c.head_hidden = 2;
  c.n_anchors = 3;
  return c;
}

// A silent detector: zero weights except a strongly negative logit bias, so
// whole-volume inference runs the full path but proposes nothing.
void write_quiet_checkpoint(const fs::path& path, bool with_head) {
  const NNetConfig ncfg = small_net_config();
  Rng rng(1);
  NNet<float> net;
  net.init(ncfg, rng);
  for (auto& p : net.named_params()) p.tensor.value().setZero();
  for (int s = 0; s < ncfg.n_anchors; ++s) net.head2.b.value()[s * 5] = -5.0f;

  Checkpoint ck;
  ck.kind = with_head ? "classifier" : "detector";
  ck.meta()["net"] = nnet_config_to_json(ncfg);
  ck.meta()["anchors_mm"] = std::vector<double>{8, 12, 18};
  pack_net(ck, net, "net.");
  if (with_head) {
    MilHead<float> head;
    head.init(ncfg.feature_channels, 4, Pooling::leaky_noisy_or, rng);
    for (auto& p : head.named_params()) p.tensor.value().setZero();
    ck.meta()["pooling"] = to_string(head.pooling);
    ck.meta()["hidden"] = 4;
    ck.meta()["top_k"] = 5;
    ck.meta()["crop_size"] = 16;
    for (auto& p : head.named_params()) {
      CheckpointTensor t;
      t.name = p.name;
      t.shape = p.tensor.shape();
      t.data.assign(p.tensor.data(), p.tensor.data() + p.tensor.size());
      ck.tensors.push_back(std::move(t));
    }
  }
  save_checkpoint(path.string(), ck);
}

}  // namespace

TEST_CASE("dataset generation is byte-deterministic in the seed") {
  const fs::path a = scratch("pulmo_cli_det_a");
  const fs::path b = scratch("pulmo_cli_det_b");
  CHECK(run_cli("make-phantom --out " + a.string() + " --cases 2 --seed 777").code == 0);
  CHECK(run_cli("make-phantom --out " + b.string() + " --cases 2 --seed 777").code == 0);

  int n_files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    ++n_files;
    const fs::path rel = fs::relative(entry.path(), a);
    CAPTURE(rel.string());
    REQUIRE(fs::exists(b / rel));
    CHECK(read_bytes(entry.path()) == read_bytes(b / rel));
  }
  CHECK(n_files > 2 * 3);  // volume + payload + truth per case, plus manifests

  // A different seed changes the data.
  const fs::path c = scratch("pulmo_cli_det_c");
  CHECK(run_cli("make-phantom --out " + c.string() + " --cases 2 --seed 778").code == 0);
  CHECK(read_bytes(a / "case_0000" / "volume.raw") != read_bytes(c / "case_0000" / "volume.raw"));
}

TEST_CASE("every command writes a reproducible run manifest") {
  const fs::path& data = fixture_dataset();
  const fs::path mk = data / "run_make-phantom.json";
  const fs::path pp = data / "run_preprocess.json";
  REQUIRE(fs::exists(mk));
  REQUIRE(fs::exists(pp));

  json j;
  std::ifstream(mk) >> j;
  CHECK(j.at("command") == "make-phantom");
  CHECK(j.at("seed").get<std::uint64_t>() == 41);
  // The embedded config re-hashes to the recorded hash (canonical form).
  const RunConfig c = run_config_from_json(j.at("config"));
  CHECK(config_hash(c) == j.at("config_hash").get<std::uint64_t>());
}

TEST_CASE("argument and config mistakes exit with the config code") {
  CHECK(run_cli("").code == 2);                                     // missing subcommand
  CHECK(run_cli("make-phantom --bogus 1 --out x --cases 1").code == 2);  // unknown flag
  const fs::path out = scratch("pulmo_cli_cfgerr");
  CHECK(run_cli("make-phantom --out " + (out / "d").string() + " --cases 0").code == 2);

  const fs::path bad_cfg = out / "bad.json";
  std::ofstream(bad_cfg) << R"({"detector": {"lrr": 0.1}})";
  const RunResult r =
      run_cli("make-phantom --config " + bad_cfg.string() + " --out " + (out / "d").string() + " --cases 1");
  CHECK(r.code == 2);
  CHECK(r.output.find("detector.lrr") != std::string::npos);
}

TEST_CASE("missing inputs exit with the data code") {
  const fs::path out = scratch("pulmo_cli_dataerr");
  CHECK(run_cli("preprocess --in " + (out / "nope.json").string() + " --out " + (out / "prep.json").string())
            .code == 3);
  CHECK(run_cli("train-detector --data " + (out / "empty").string() + " --out " + (out / "ck.json").string())
            .code == 3);
}

TEST_CASE("preprocessing a single volume writes the prep pair") {
  const fs::path& data = fixture_dataset();
  const fs::path out = scratch("pulmo_cli_prep1");
  const RunResult r = run_cli("preprocess --in " + (data / "case_0000" / "volume.json").string() + " --out " +
                              (out / "prep.json").string());
  CHECK(r.code == 0);
  CHECK(fs::exists(out / "prep.json"));
  CHECK(fs::exists(out / "prep.raw"));
  CHECK(fs::exists(out / "prep.extent.json"));
  const Volume prep = load_volume((out / "prep.json").string());
  CHECK(prep.value_kind == ValueKind::normalized_u8);
  for (const double s : prep.spacing_mm) CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("checkpointed inference and case prediction run end to end") {
  const fs::path& data = fixture_dataset();
  const fs::path out = scratch("pulmo_cli_infer");
  const fs::path det_ck = out / "det.json";
  const fs::path cls_ck = out / "cls.json";
  write_quiet_checkpoint(det_ck, /*with_head=*/false);
  write_quiet_checkpoint(cls_ck, /*with_head=*/true);

  // Batch inference over the dataset: one (empty) proposal file per case.
  const fs::path props = out / "proposals";
  const RunResult ri = run_cli("infer --ckpt " + det_ck.string() + " --data " + data.string() + " --out " +
                               props.string());
  CHECK(ri.code == 0);
  const DatasetManifest m = load_manifest((data / "manifest.json").string());
  REQUIRE(m.cases.size() == 3);
  for (const auto& e : m.cases) {
    const fs::path p = props / (e.id + ".jsonl");
    REQUIRE(fs::exists(p));
    CHECK(load_proposals(p.string()).empty());  // the quiet detector proposes nothing
  }
  CHECK(fs::exists(props / "run_infer.json"));

  // Single-volume case prediction from the classifier checkpoint.
  const fs::path case_json = out / "case_0000.json";
  const RunResult rp = run_cli("predict-case --ckpt " + cls_ck.string() + " --in " +
                               (data / "case_0000" / "prep.json").string() + " --out " + case_json.string());
  CHECK(rp.code == 0);
  json cj;
  std::ifstream(case_json) >> cj;
  CHECK(cj.at("id") == "prep");
  const double case_p = cj.at("case_p").get<double>();
  CHECK(case_p > 0.0);
  CHECK(case_p < 1.0);
  CHECK(cj.at("leak_p").get<double>() == doctest::Approx(0.5));  // zeroed leak logit
  CHECK(cj.at("nodules").is_array());
  CHECK(cj.at("nodules").empty());  // blanks are not reported

  // A detector checkpoint cannot drive case prediction.
  const RunResult bad = run_cli("predict-case --ckpt " + det_ck.string() + " --in " +
                                (data / "case_0000" / "prep.json").string() + " --out " +
                                (out / "x.json").string());
  CHECK(bad.code == 3);
}

TEST_CASE("evaluation commands score prediction directories") {
  const fs::path& data = fixture_dataset();
  const DatasetManifest m = load_manifest((data / "manifest.json").string());

  // Perfect detections: echo the truth boxes at high confidence.
  const fs::path out = scratch("pulmo_cli_eval");
  const fs::path props = out / "props";
  fs::create_directories(props);
  int n_nodules = 0;
  bool any_pos = false, any_neg = false;
  for (const auto& e : m.cases) {
    const CaseTruth t = load_truth((data / e.dir / "truth.json").string());
    std::vector<Proposal> ps;
    for (const Box& b : truth_boxes(t)) ps.push_back({b, 0.9});
    n_nodules += static_cast<int>(ps.size());
    save_proposals(ps, (props / (e.id + ".jsonl")).string());
    (e.label ? any_pos : any_neg) = true;
  }
  REQUIRE(n_nodules > 0);  // fixture seed must place at least one nodule
  REQUIRE(any_pos);
  REQUIRE(any_neg);

  const RunResult rd = run_cli("evaluate-detector --pred " + props.string() + " --truth " +
                               (data / "manifest.json").string() + " --out " + (out / "froc.csv").string());
  CHECK(rd.code == 0);
  json dsum;
  std::ifstream(out / "detector_summary.json") >> dsum;
  CHECK(dsum.at("avg_recall_7pt").get<double>() == doctest::Approx(1.0));
  CHECK(dsum.at("n_nodules").get<int>() == n_nodules);
  CHECK(fs::exists(out / "froc.csv"));

  // Confident, correct case scores: accuracy 1 and a flat per-case CE.
  const fs::path cases_dir = out / "cases";
  fs::create_directories(cases_dir);
  for (const auto& e : m.cases) {
    const json cj = {{"id", e.id}, {"case_p", e.label ? 0.9 : 0.1}, {"leak_p", 0.0},
                     {"nodules", json::array()}};
    std::ofstream((cases_dir / (e.id + ".json")).string()) << cj.dump(2) << "\n";
  }
  const RunResult rc = run_cli("evaluate-case --pred " + cases_dir.string() + " --truth " +
                               (data / "manifest.json").string() + " --out " + (out / "roc.csv").string());
  CHECK(rc.code == 0);
  json csum;
  std::ifstream(out / "case_summary.json") >> csum;
  CHECK(csum.at("acc_at_0.5").get<double>() == doctest::Approx(1.0));
  CHECK(csum.at("auc").get<double>() == doctest::Approx(1.0));
  CHECK(csum.at("cross_entropy").get<double>() == doctest::Approx(-std::log(0.9)).epsilon(1e-9));
  CHECK(csum.at("cross_entropy").get<double>() < csum.at("baseline_cross_entropy").get<double>());
  // The detector summary sitting next to the ROC CSV is folded in.
  CHECK(csum.at("avg_recall_7pt").get<double>() == doctest::Approx(1.0));

  // Missing predictions are data errors.
  const fs::path empty = out / "none";
  fs::create_directories(empty);
  CHECK(run_cli("evaluate-case --pred " + empty.string() + " --truth " + (data / "manifest.json").string() +
                " --out " + (out / "roc2.csv").string())
            .code == 3);
}
