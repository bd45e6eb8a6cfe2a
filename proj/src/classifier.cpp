#include "pulmo/classifier.hpp"

#include <algorithm>
#include <cmath>

namespace pulmo {

Pooling pooling_from_string(const std::string& s) {
  if (s == "max_p") return Pooling::max_p;
  if (s == "noisy_or") return Pooling::noisy_or;
  if (s == "leaky_noisy_or") return Pooling::leaky_noisy_or;
  if (s == "feature_combine") return Pooling::feature_combine;
  throw ConfigError("classifier.pooling: unknown pooling '" + s +
                    "' (expected max_p, noisy_or, leaky_noisy_or, or feature_combine)");
}

std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::max_p: return "max_p";
    case Pooling::noisy_or: return "noisy_or";
    case Pooling::leaky_noisy_or: return "leaky_noisy_or";
    case Pooling::feature_combine: return "feature_combine";
  }
  return "?";
}

double combine_probs(Pooling pooling, std::vector<double> inst_p, double leak_p) {
  if (pooling == Pooling::feature_combine)
    throw std::logic_error("combine_probs: feature_combine pools features, not probabilities");
  if (inst_p.empty()) throw std::logic_error("combine_probs: no instances");
  if (pooling == Pooling::max_p) return *std::max_element(inst_p.begin(), inst_p.end());
  std::sort(inst_p.begin(), inst_p.end());
  double q = 1.0;
  for (double p : inst_p) q *= (1.0 - p);
  if (pooling == Pooling::noisy_or) return 1.0 - q;
  return 1.0 - (1.0 - leak_p) * q;
}

std::vector<SelectedInstance> select_instances(const std::vector<Proposal>& proposals, int k, bool train,
                                               Rng* rng) {
  if (k <= 0) throw ConfigError("classifier.top_k must be positive");
  std::vector<SelectedInstance> out;
  if (train) {
    if (!rng) throw std::logic_error("select_instances: training selection needs an rng");
    std::vector<Proposal> pool = proposals;
    while (static_cast<int>(out.size()) < k && !pool.empty()) {
      double total = 0;
      for (const auto& p : pool) total += p.confidence;
      std::size_t pick = 0;
      if (total > 0) {
        double u = rng->uniform() * total;
        for (; pick + 1 < pool.size(); ++pick) {
          if (u < pool[pick].confidence) break;
          u -= pool[pick].confidence;
        }
      } else {
        pick = static_cast<std::size_t>(rng->uniform_int(0, static_cast<int>(pool.size()) - 1));
      }
      out.push_back({pool[pick], false});
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    }
  } else {
    std::vector<Proposal> sorted = proposals;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Proposal& a, const Proposal& b) { return a.confidence > b.confidence; });
    for (const auto& p : sorted) {
      if (static_cast<int>(out.size()) >= k) break;
      out.push_back({p, false});
    }
  }
  while (static_cast<int>(out.size()) < k) out.push_back({Proposal{}, true});
  return out;
}

CropAugment draw_crop_augment(const ClassifierConfig& cfg, double box_r, Rng& rng) {
  CropAugment a;
  a.enabled = true;
  a.zoom = rng.uniform(cfg.resize_lo, cfg.resize_hi);
  for (int i = 0; i < 3; ++i)
    a.shift[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0) * cfg.shift_frac * (box_r / 2.0);
  for (int i = 0; i < 3; ++i) a.flip[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? -1 : 1;
  if (cfg.rotate) {
    // Uniform random rotation from a uniform unit quaternion.
    const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
    const double two_pi = 2.0 * 3.14159265358979323846;
    const double qw = std::sqrt(1.0 - u1) * std::sin(two_pi * u2);
    const double qx = std::sqrt(1.0 - u1) * std::cos(two_pi * u2);
    const double qy = std::sqrt(u1) * std::sin(two_pi * u3);
    const double qz = std::sqrt(u1) * std::cos(two_pi * u3);
    a.rot = {{{1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)},
              {2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)},
              {2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)}}};
  }
  return a;
}

namespace {

CasePrediction run_case(NNet<float>& net, MilHead<float>& head, const Volume& prep, const LungExtent& extent,
                        const std::vector<Proposal>& proposals, const ClassifierConfig& ccfg) {
  const int k = ccfg.top_k, C = ccfg.crop_size, G = C / kGridStride;
  if (C % kGridStride != 0) throw ConfigError("classifier.crop_size must be a multiple of 4");
  std::vector<SelectedInstance> picked = select_instances(proposals, k, /*train=*/false, nullptr);

  Tensor<float> input = Tensor<float>::zeros({k, 1, C, C, C});
  Tensor<float> coords = Tensor<float>::zeros({k, 3, G, G, G});
  CropAugment none;
  for (int i = 0; i < k; ++i)
    fill_instance_crop(prep, extent, picked[static_cast<std::size_t>(i)], ccfg, none, input, coords, i);

  Tensor<float> features = instance_features<float>(nullptr, net, input, coords, /*training=*/false);
  CaseOutput<float> out = mil_case_prob<float>(nullptr, features, head);

  CasePrediction pred;
  pred.case_p = static_cast<double>(out.case_p.item());
  pred.leak_p = out.leak_p;
  for (int i = 0; i < k; ++i) {
    if (picked[static_cast<std::size_t>(i)].blank) continue;
    pred.nodules.push_back({picked[static_cast<std::size_t>(i)].prop.box,
                            picked[static_cast<std::size_t>(i)].prop.confidence,
                            out.inst_p[static_cast<std::size_t>(i)]});
  }
  return pred;
}

}  // namespace

CasePrediction predict_case(NNet<float>& net, MilHead<float>& head, const Volume& prep,
                            const LungExtent& extent, const DetectorConfig& dcfg,
                            const ClassifierConfig& ccfg) {
  std::vector<Proposal> proposals = sliding_window_infer(net, prep, extent, dcfg);
  return run_case(net, head, prep, extent, proposals, ccfg);
}

CasePrediction predict_case_from_proposals(NNet<float>& net, MilHead<float>& head, const Volume& prep,
                                           const LungExtent& extent, const std::vector<Proposal>& proposals,
                                           const ClassifierConfig& ccfg) {
  return run_case(net, head, prep, extent, proposals, ccfg);
}

}  // namespace pulmo
