// Case-classification units: probability pooling algebra (max / noisy-or /
// leaky noisy-or / feature pooling), instance selection, crop augmentation
// geometry, instance crops and features, and the whole-case prediction path.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pulmo/classifier.hpp"
#include "pulmo/dataset.hpp"
#include "pulmo/ops.hpp"
#include "pulmo/rng.hpp"

using namespace pulmo;

namespace {

using Td = double;
using Tf = float;
Tape<Td>* const no_tape_d = nullptr;
Tape<Tf>* const no_tape_f = nullptr;

Tensor<Td> uniform_tensor(const std::vector<int>& shape, Rng& rng, Td lo, Td hi, bool rg = true) {
  Tensor<Td> t = Tensor<Td>::zeros(shape, rg);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.value()[i] = rng.uniform(lo, hi);
  return t;
}

// Central-difference gradient verification against the recorded tape, with the
// same pinned tolerances as the op-level suite.
template <class BuildFn>
void check_grads(BuildFn&& build, const std::vector<Tensor<Td>*>& params, double h = 1e-4) {
  for (Tensor<Td>* p : params) {
    p->ensure_grad();
    p->grad().setZero();
  }
  Tape<Td> tape;
  Tensor<Td> loss = build(&tape);
  REQUIRE(loss.size() == 1);
  tape.backward(loss);
  auto loss_of = [&]() { return build(static_cast<Tape<Td>*>(nullptr)).item(); };
  for (Tensor<Td>* p : params) {
    REQUIRE(p->grad().size() == p->size());
    const ArrX<Td> analytic = p->grad();
    std::string report;
    const bool ok = gradcheck_param(loss_of, *p, analytic, h, 1e-4, 1e-2, &report);
    CAPTURE(report);
    CHECK(ok);
  }
}

// Small preprocessed volume with a distinct-value ramp.
CaseRecord make_case(const Index3& dims, const Vec3& origin) {
  CaseRecord rec;
  rec.id = "synthetic";
  rec.prep.dims = dims;
  rec.prep.spacing_mm = {1.0, 1.0, 1.0};
  rec.prep.origin_mm = origin;
  rec.prep.value_kind = ValueKind::normalized_u8;
  rec.prep.data.resize(static_cast<std::size_t>(voxel_count(dims)));
  for (int z = 0; z < dims[0]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[2]; ++x)
        rec.prep.data[static_cast<std::size_t>(flat_index(dims, z, y, x))] =
            static_cast<std::int16_t>((41 * z + 17 * y + 7 * x) % 251);
  for (int a = 0; a < 3; ++a) {
    rec.extent.lung_min_mm[static_cast<std::size_t>(a)] = origin[static_cast<std::size_t>(a)];
    rec.extent.lung_max_mm[static_cast<std::size_t>(a)] =
        origin[static_cast<std::size_t>(a)] + (dims[static_cast<std::size_t>(a)] - 1);
  }
  return rec;
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

}  // namespace

TEST_CASE("pooling names round-trip and unknown names are config errors") {
  for (const auto p : {Pooling::max_p, Pooling::noisy_or, Pooling::leaky_noisy_or, Pooling::feature_combine})
    CHECK(pooling_from_string(to_string(p)) == p);
  CHECK_THROWS_AS(pooling_from_string("mean_p"), ConfigError);
}

TEST_CASE("probability pooling matches hand algebra") {
  const std::vector<double> p = {0.2, 0.5, 0.1};
  CHECK(combine_probs(Pooling::max_p, p, 0.0) == 0.5);
  CHECK(combine_probs(Pooling::noisy_or, p, 0.0) == doctest::Approx(0.64).epsilon(1e-12));
  CHECK(combine_probs(Pooling::leaky_noisy_or, p, 0.3) == doctest::Approx(1.0 - 0.7 * 0.36).epsilon(1e-12));
  CHECK_THROWS_AS(combine_probs(Pooling::feature_combine, p, 0.0), std::logic_error);
  CHECK_THROWS_AS(combine_probs(Pooling::noisy_or, {}, 0.0), std::logic_error);
}

TEST_CASE("pooling algebra holds over random instance sets") {
  Rng rng(2026);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(1, 6));
    std::vector<double> p(static_cast<std::size_t>(k));
    for (double& v : p) v = rng.uniform();
    const double leak = rng.uniform();

    const double pm = combine_probs(Pooling::max_p, p, 0.0);
    const double po = combine_probs(Pooling::noisy_or, p, 0.0);
    const double pl = combine_probs(Pooling::leaky_noisy_or, p, leak);

    // Probabilities, ordered: adding independent evidence only raises the
    // case probability, and a leak raises it further.
    CHECK(pm >= 0.0);
    CHECK(pl <= 1.0);
    CHECK(po >= pm - 1e-15);
    CHECK(pl >= po - 1e-15);

    // A zero leak reduces the leaky pool to the plain noisy-or exactly.
    CHECK(combine_probs(Pooling::leaky_noisy_or, p, 0.0) == po);

    // Permutation invariance is bit-exact (sorted-order product).
    std::vector<double> shuffled = p;
    for (int s = 0; s < 8; ++s) {
      rng.shuffle(shuffled);
      CHECK(combine_probs(Pooling::noisy_or, shuffled, 0.0) == po);
      CHECK(combine_probs(Pooling::leaky_noisy_or, shuffled, leak) == pl);
      CHECK(combine_probs(Pooling::max_p, shuffled, 0.0) == pm);
    }

    // Raising any single instance probability cannot lower the case score.
    std::vector<double> bumped = p;
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, k - 1));
    bumped[j] = std::min(1.0, bumped[j] + 0.1);
    CHECK(combine_probs(Pooling::noisy_or, bumped, 0.0) >= po - 1e-15);
    CHECK(combine_probs(Pooling::leaky_noisy_or, bumped, leak) >= pl - 1e-15);
  }
}

TEST_CASE("the differentiable head agrees with the reference pooling") {
  Rng rng(7);
  Tensor<Td> feats = uniform_tensor({4, 6}, rng, -1.5, 1.5, false);

  for (const auto pooling : {Pooling::max_p, Pooling::noisy_or, Pooling::leaky_noisy_or}) {
    CAPTURE(to_string(pooling));
    MilHead<Td> head;
    head.init(6, 5, pooling, rng);
    head.theta_d.value()[0] = -0.8;

    CaseOutput<Td> out = mil_case_prob(no_tape_d, feats, head);
    REQUIRE(out.inst_p.size() == 4);
    const double expect = combine_probs(pooling, out.inst_p, out.leak_p);
    CHECK(out.case_p.item() == doctest::Approx(expect).epsilon(1e-12));
    if (pooling == Pooling::leaky_noisy_or)
      CHECK(out.leak_p == doctest::Approx(1.0 / (1.0 + std::exp(0.8))).epsilon(1e-12));
    else
      CHECK(out.leak_p == 0.0);
  }
}

TEST_CASE("the case probability is invariant to instance order, bit for bit") {
  Rng rng(11);
  const int k = 5, F = 6;
  Tensor<Td> feats = uniform_tensor({k, F}, rng, -2, 2, false);

  for (const auto pooling :
       {Pooling::max_p, Pooling::noisy_or, Pooling::leaky_noisy_or, Pooling::feature_combine}) {
    CAPTURE(to_string(pooling));
    MilHead<Td> head;
    head.init(F, 4, pooling, rng);
    head.theta_d.value()[0] = 0.4;
    const Td base = mil_case_prob(no_tape_d, feats, head).case_p.item();

    std::vector<int> order(k);
    for (int i = 0; i < k; ++i) order[i] = i;
    for (int s = 0; s < 10; ++s) {
      rng.shuffle(order);
      Tensor<Td> perm = Tensor<Td>::zeros({k, F});
      for (int i = 0; i < k; ++i)
        for (int f = 0; f < F; ++f) perm.value()[i * F + f] = feats.value()[order[static_cast<std::size_t>(i)] * F + f];
      CHECK(mil_case_prob(no_tape_d, perm, head).case_p.item() == base);
    }
  }
}

TEST_CASE("case-loss gradients check out for every pooling") {
  Rng rng(13);
  const int k = 3, F = 4;

  for (const auto pooling :
       {Pooling::max_p, Pooling::noisy_or, Pooling::leaky_noisy_or, Pooling::feature_combine}) {
    CAPTURE(to_string(pooling));
    MilHead<Td> head;
    head.init(F, 3, pooling, rng);
    head.theta_d.value()[0] = -0.3;
    Tensor<Td> feats = uniform_tensor({k, F}, rng, -1.2, 1.2);

    auto build = [&](Tape<Td>* t) {
      CaseOutput<Td> out = mil_case_prob(t, feats, head);
      return bce_on_prob(t, out.case_p, Td(1), Td(1e-7));
    };
    std::vector<Tensor<Td>*> params = {&feats, &head.fc1.w, &head.fc1.b, &head.fc2.w, &head.fc2.b};
    if (pooling == Pooling::leaky_noisy_or) params.push_back(&head.theta_d);
    check_grads(build, params);
  }
}

TEST_CASE("feature pooling reports per-instance scores from the same perceptron") {
  Rng rng(17);
  const int k = 3, F = 5, H = 4;
  MilHead<Td> head;
  head.init(F, H, Pooling::feature_combine, rng);
  Tensor<Td> feats = uniform_tensor({k, F}, rng, -1, 1, false);

  CaseOutput<Td> out = mil_case_prob(no_tape_d, feats, head);
  REQUIRE(out.inst_p.size() == static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    double o = head.fc2.b.value()[0];
    for (int hid = 0; hid < H; ++hid) {
      double hv = head.fc1.b.value()[hid];
      for (int f = 0; f < F; ++f) hv += head.fc1.w.value()[hid * F + f] * feats.value()[i * F + f];
      o += head.fc2.w.value()[hid] * hv;
    }
    CHECK(out.inst_p[static_cast<std::size_t>(i)] == doctest::Approx(1.0 / (1.0 + std::exp(-o))).epsilon(1e-12));
  }

  // With a single instance the elementwise max is that instance, so the case
  // probability equals its reported score.
  Tensor<Td> one = Tensor<Td>::zeros({1, F});
  for (int f = 0; f < F; ++f) one.value()[f] = feats.value()[f];
  CaseOutput<Td> solo = mil_case_prob(no_tape_d, one, head);
  CHECK(solo.case_p.item() == doctest::Approx(solo.inst_p[0]).epsilon(1e-12));
}

TEST_CASE("inference selection takes the top confidences and pads with blanks") {
  std::vector<Proposal> props;
  props.push_back({Box{1, 1, 1, 5}, 0.9});
  props.push_back({Box{2, 2, 2, 5}, 0.2});
  props.push_back({Box{3, 3, 3, 5}, 0.5});
  props.push_back({Box{4, 4, 4, 5}, 0.7});

  const auto top3 = select_instances(props, 3, /*train=*/false, nullptr);
  REQUIRE(top3.size() == 3);
  CHECK(top3[0].prop.confidence == 0.9);
  CHECK(top3[1].prop.confidence == 0.7);
  CHECK(top3[2].prop.confidence == 0.5);
  for (const auto& s : top3) CHECK_FALSE(s.blank);

  const auto top6 = select_instances(props, 6, /*train=*/false, nullptr);
  REQUIRE(top6.size() == 6);
  CHECK_FALSE(top6[3].blank);
  CHECK(top6[4].blank);
  CHECK(top6[5].blank);

  CHECK_THROWS_AS(select_instances(props, 0, false, nullptr), ConfigError);
  Rng rng(1);
  CHECK_THROWS_AS(select_instances(props, 2, true, nullptr), std::logic_error);
}

TEST_CASE("training selection draws proportionally to confidence, without replacement") {
  std::vector<Proposal> props;
  props.push_back({Box{1, 1, 1, 5}, 0.1});
  props.push_back({Box{2, 2, 2, 5}, 0.3});
  props.push_back({Box{3, 3, 3, 5}, 0.6});

  // Same seed, same picks.
  Rng r1(555), r2(555);
  const auto a = select_instances(props, 2, true, &r1);
  const auto b = select_instances(props, 2, true, &r2);
  REQUIRE(a.size() == 2);
  CHECK(a[0].prop.confidence == b[0].prop.confidence);
  CHECK(a[1].prop.confidence == b[1].prop.confidence);
  CHECK(a[0].prop.confidence != a[1].prop.confidence);  // without replacement

  // First-draw frequencies track the confidence weights.
  const int trials = 4000;
  int counts[3] = {0, 0, 0};
  Rng rng(777);
  for (int t = 0; t < trials; ++t) {
    const auto sel = select_instances(props, 1, true, &rng);
    for (int i = 0; i < 3; ++i)
      if (sel[0].prop.confidence == props[static_cast<std::size_t>(i)].confidence) ++counts[i];
  }
  CHECK(std::abs(counts[0] / double(trials) - 0.1) < 0.03);
  CHECK(std::abs(counts[1] / double(trials) - 0.3) < 0.04);
  CHECK(std::abs(counts[2] / double(trials) - 0.6) < 0.04);

  // Zero total confidence falls back to a uniform draw and still works.
  std::vector<Proposal> flat(3);
  Rng rz(9);
  const auto sel = select_instances(flat, 3, true, &rz);
  REQUIRE(sel.size() == 3);
  for (const auto& s : sel) CHECK_FALSE(s.blank);

  // More slots than proposals: everything selected once, blanks after.
  Rng rk(10);
  const auto over = select_instances(props, 5, true, &rk);
  REQUIRE(over.size() == 5);
  double total = 0;
  for (int i = 0; i < 3; ++i) {
    CHECK_FALSE(over[static_cast<std::size_t>(i)].blank);
    total += over[static_cast<std::size_t>(i)].prop.confidence;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(over[3].blank);
  CHECK(over[4].blank);
}

TEST_CASE("crop augmentation draws stay in range and rotations are proper") {
  ClassifierConfig cfg;
  cfg.resize_lo = 0.75;
  cfg.resize_hi = 1.25;
  cfg.shift_frac = 0.15;
  cfg.rotate = true;
  const double box_r = 12.0;

  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const CropAugment a = draw_crop_augment(cfg, box_r, rng);
    CHECK(a.enabled);
    CHECK(a.zoom >= cfg.resize_lo);
    CHECK(a.zoom <= cfg.resize_hi);
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(a.shift[static_cast<std::size_t>(i)]) <= cfg.shift_frac * box_r / 2 + 1e-12);
      CHECK((a.flip[static_cast<std::size_t>(i)] == 1 || a.flip[static_cast<std::size_t>(i)] == -1));
    }
    // R^T R == I and det(R) == +1: a proper rotation, no scaling or shear.
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0;
        for (int m = 0; m < 3; ++m)
          dot += a.rot[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)] *
                 a.rot[static_cast<std::size_t>(m)][static_cast<std::size_t>(j)];
        CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9));
      }
    const auto& R = a.rot;
    const double det = R[0][0] * (R[1][1] * R[2][2] - R[1][2] * R[2][1]) -
                       R[0][1] * (R[1][0] * R[2][2] - R[1][2] * R[2][0]) +
                       R[0][2] * (R[1][0] * R[2][1] - R[1][1] * R[2][0]);
    CHECK(det == doctest::Approx(1.0).epsilon(1e-9));
  }

  cfg.rotate = false;
  const CropAugment id = draw_crop_augment(cfg, box_r, rng);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(id.rot[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] == (i == j ? 1.0 : 0.0));
}

TEST_CASE("unaugmented instance crops copy voxels around the rounded center") {
  const CaseRecord rec = make_case({40, 40, 40}, {2, 3, 4});
  ClassifierConfig cfg;
  cfg.crop_size = 16;
  const int C = cfg.crop_size, G = C / 4;

  SelectedInstance inst;
  inst.prop.box = Box{22.4, 19.7, 24.1, 8.0};  // center voxel (20.4, 16.7, 20.1)
  inst.blank = false;

  Tensor<Tf> input = Tensor<Tf>::zeros({2, 1, C, C, C});
  Tensor<Tf> coords = Tensor<Tf>::zeros({2, 3, G, G, G});
  CropAugment none;
  fill_instance_crop(rec.prep, rec.extent, inst, cfg, none, input, coords, 1);

  const int start[3] = {20 - C / 2, 17 - C / 2, 20 - C / 2};
  const std::int64_t in_off = std::int64_t(1) * C * C * C;
  for (int z = 0; z < C; ++z)
    for (int y = 0; y < C; ++y)
      for (int x = 0; x < C; ++x) {
        const int sz = start[0] + z, sy = start[1] + y, sx = start[2] + x;
        const int v = in_bounds(rec.prep.dims, sz, sy, sx) ? rec.prep.at(sz, sy, sx) : cfg.pad_value;
        const Tf expect = static_cast<Tf>(v / 128.0 - 1.0);
        CHECK(input.value()[in_off + (std::int64_t(z) * C + y) * C + x] == expect);
      }

  const std::int64_t co_off = std::int64_t(1) * 3 * G * G * G;
  for (int a = 0; a < 3; ++a)
    for (int z = 0; z < G; ++z)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
          const int cell[3] = {z, y, x};
          const double s = start[a] + 4.0 * cell[a] + 1.5;
          const double mm = rec.prep.origin_mm[static_cast<std::size_t>(a)] + s;
          const double lo = rec.extent.lung_min_mm[static_cast<std::size_t>(a)];
          const double hi = rec.extent.lung_max_mm[static_cast<std::size_t>(a)];
          const Tf got = coords.value()[co_off + ((std::int64_t(a) * G + z) * G + y) * G + x];
          CHECK(got == doctest::Approx(2.0 * (mm - lo) / (hi - lo) - 1.0).epsilon(1e-6));
        }

  // Slot 0 was never written.
  CHECK((input.value().segment(0, in_off) == 0.0f).all());

  // Blank instances fill with the pad value and zero location channels.
  SelectedInstance blank;
  blank.blank = true;
  fill_instance_crop(rec.prep, rec.extent, blank, cfg, none, input, coords, 0);
  const Tf pad = static_cast<Tf>(cfg.pad_value / 128.0 - 1.0);
  CHECK((input.value().segment(0, in_off) == pad).all());
  CHECK((coords.value().segment(0, co_off) == 0.0f).all());
}

TEST_CASE("augmented crops resample through the composed transform") {
  ClassifierConfig cfg;
  cfg.crop_size = 16;
  const int C = cfg.crop_size, G = C / 4;

  SelectedInstance inst;
  inst.prop.box = Box{20, 20, 20, 8.0};  // volume origin 0: center voxel (20,20,20)

  SUBCASE("an axis flip mirrors the sampled block exactly") {
    const CaseRecord rec = make_case({40, 40, 40}, {0, 0, 0});
    CropAugment plain;
    plain.enabled = true;  // identity zoom/shift/rot, no flips
    CropAugment flipped = plain;
    flipped.flip[0] = -1;

    Tensor<Tf> a_in = Tensor<Tf>::zeros({1, 1, C, C, C}), a_co = Tensor<Tf>::zeros({1, 3, G, G, G});
    Tensor<Tf> b_in = Tensor<Tf>::zeros({1, 1, C, C, C}), b_co = Tensor<Tf>::zeros({1, 3, G, G, G});
    fill_instance_crop(rec.prep, rec.extent, inst, cfg, plain, a_in, a_co, 0);
    fill_instance_crop(rec.prep, rec.extent, inst, cfg, flipped, b_in, b_co, 0);
    for (int z = 0; z < C; ++z)
      for (int y = 0; y < C; ++y)
        for (int x = 0; x < C; ++x)
          CHECK(b_in.value()[(std::int64_t(z) * C + y) * C + x] ==
                a_in.value()[(std::int64_t(C - 1 - z) * C + y) * C + x]);
  }

  SUBCASE("zoom rescales a linear ramp exactly") {
    // v(z) = z: trilinear interpolation reproduces a linear field exactly, so
    // output voxel u must read center + (u - (C-1)/2) / zoom along z.
    CaseRecord rec = make_case({64, 64, 64}, {0, 0, 0});
    for (int z = 0; z < 64; ++z)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
          rec.prep.data[static_cast<std::size_t>(flat_index(rec.prep.dims, z, y, x))] =
              static_cast<std::int16_t>(z);
    inst.prop.box = Box{30, 30, 30, 8.0};

    CropAugment zoomed;
    zoomed.enabled = true;
    zoomed.zoom = 2.0;  // magnify: half the source extent
    Tensor<Tf> in = Tensor<Tf>::zeros({1, 1, C, C, C}), co = Tensor<Tf>::zeros({1, 3, G, G, G});
    fill_instance_crop(rec.prep, rec.extent, inst, cfg, zoomed, in, co, 0);
    for (int z = 0; z < C; ++z) {
      const double src_z = 30.0 + (z - (C - 1) / 2.0) / 2.0;
      const double want = src_z / 128.0 - 1.0;
      CHECK(in.value()[(std::int64_t(z) * C + 3) * C + 5] == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("instance features take the central max of the backbone feature map") {
  const NNetConfig ncfg = small_net_config();
  Rng rng(41);
  NNet<float> net;
  net.init(ncfg, rng);

  const int k = 2, C = 16, G = C / 4;
  Tensor<Tf> input = Tensor<Tf>::zeros({k, 1, C, C, C});
  Tensor<Tf> coords = Tensor<Tf>::zeros({k, 3, G, G, G});
  for (Eigen::Index i = 0; i < input.size(); ++i) input.value()[i] = static_cast<float>(rng.uniform(-1, 1));
  for (Eigen::Index i = 0; i < coords.size(); ++i) coords.value()[i] = static_cast<float>(rng.uniform(-1, 1));

  Tensor<Tf> feats = instance_features(no_tape_f, net, input, coords, /*training=*/false);
  REQUIRE(feats.shape() == std::vector<int>{k, ncfg.feature_channels});

  const NNetOut<Tf> fwd = net.forward(no_tape_f, input, coords, false);
  const auto& fm = fwd.feature.value();
  const int F = ncfg.feature_channels;
  for (int n = 0; n < k; ++n)
    for (int c = 0; c < F; ++c) {
      float best = -1e30f;
      for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int z = G / 2 - 1 + dz, y = G / 2 - 1 + dy, x = G / 2 - 1 + dx;
            best = std::max(best, fm[(((std::int64_t(n) * F + c) * G + z) * G + y) * G + x]);
          }
      CHECK(feats.value()[std::int64_t(n) * F + c] == best);
    }
}

TEST_CASE("frozen batch statistics pin the feature extractor") {
  const NNetConfig ncfg = small_net_config();
  Rng rng(43);
  NNet<float> net;
  net.init(ncfg, rng);
  net.bn_frozen = true;

  Tensor<Tf> input = Tensor<Tf>::zeros({1, 1, 16, 16, 16});
  Tensor<Tf> coords = Tensor<Tf>::zeros({1, 3, 4, 4, 4});
  for (Eigen::Index i = 0; i < input.size(); ++i) input.value()[i] = static_cast<float>(rng.uniform(-1, 1));

  std::vector<ArrX<float>> before;
  for (auto& b : net.named_buffers()) before.push_back(*b.data);

  // Training-mode forwards may not touch running statistics while frozen, and
  // repeated passes must be bit-identical.
  const Tensor<Tf> f1 = instance_features(no_tape_f, net, input, coords, /*training=*/true);
  const Tensor<Tf> f2 = instance_features(no_tape_f, net, input, coords, /*training=*/true);
  CHECK((f1.value() == f2.value()).all());

  const auto after = net.named_buffers();
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < after.size(); ++i) CHECK((*after[i].data == before[i]).all());
}

TEST_CASE("whole-case prediction pools the selected crops") {
  // Zeroed weights give instance probability 1/2 everywhere (features are 0,
  // both dense layers emit their zero bias) and leak 1/2, so the leaky pool is
  // 1 - (1/2)^(k+1) exactly -- blanks contribute like real instances.
  const NNetConfig ncfg = small_net_config();
  Rng rng(47);
  NNet<float> net;
  net.init(ncfg, rng);
  for (auto& p : net.named_params()) p.tensor.value().setZero();

  MilHead<float> head;
  head.init(ncfg.feature_channels, 4, Pooling::leaky_noisy_or, rng);
  for (auto& p : head.named_params()) p.tensor.value().setZero();

  ClassifierConfig ccfg;
  ccfg.crop_size = 16;
  ccfg.top_k = 5;

  const CaseRecord rec = make_case({40, 40, 40}, {0, 0, 0});
  std::vector<Proposal> props;
  props.push_back({Box{20, 20, 20, 8}, 0.9});
  props.push_back({Box{12, 28, 16, 6}, 0.4});

  const CasePrediction pred = predict_case_from_proposals(net, head, rec.prep, rec.extent, props, ccfg);
  CHECK(pred.leak_p == 0.5);
  CHECK(pred.case_p == doctest::Approx(1.0 - std::pow(0.5, 6)).epsilon(1e-6));
  REQUIRE(pred.nodules.size() == 2);  // blanks are not reported
  CHECK(pred.nodules[0].confidence == 0.9);
  CHECK(pred.nodules[1].confidence == 0.4);
  CHECK(pred.nodules[0].p_i == doctest::Approx(0.5).epsilon(1e-6));

  ClassifierConfig bad = ccfg;
  bad.crop_size = 18;
  CHECK_THROWS_AS(predict_case_from_proposals(net, head, rec.prep, rec.extent, props, bad), ConfigError);
}
