#include "pulmo/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace pulmo {

using nlohmann::json;

namespace {

constexpr std::uint64_t kPhantomStreamTag = 0x70686e74;  // stream id for case generation

struct Ellipsoid {
  Vec3 c;     // center, voxels (z, y, x)
  Vec3 a;     // semi-axes, voxels
  bool contains(double z, double y, double x) const {
    const double dz = (z - c[0]) / a[0], dy = (y - c[1]) / a[1], dx = (x - c[2]) / a[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
  // support radius along a unit direction
  double radius_along(const Vec3& d) const {
    const double s = (d[0] / a[0]) * (d[0] / a[0]) + (d[1] / a[1]) * (d[1] / a[1]) + (d[2] / a[2]) * (d[2] / a[2]);
    return 1.0 / std::sqrt(s);
  }
  // first-order Euclidean distance from a point to the surface, positive
  // inside; the distance along a placement ray overestimates this badly for
  // oblique directions, so placement decisions must use this instead
  double depth(double z, double y, double x) const {
    const double dz = (z - c[0]) / a[0], dy = (y - c[1]) / a[1], dx = (x - c[2]) / a[2];
    const double n = std::sqrt(dz * dz + dy * dy + dx * dx);
    const double g = std::sqrt(dz * dz / (a[0] * a[0]) + dy * dy / (a[1] * a[1]) + dx * dx / (a[2] * a[2]));
    if (g < 1e-12) return std::min({a[0], a[1], a[2]});
    return (1.0 - n) * n / g;
  }
};

Vec3 random_unit(Rng& rng) {
  for (;;) {
    const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (n > 1e-6) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Canvas {
  Index3 dims;
  std::vector<double> v;
  Mask air;
  explicit Canvas(const Index3& d, double spacing)
      : dims(d), v(static_cast<std::size_t>(voxel_count(d))), air(Mask::zeros(d, {spacing, spacing, spacing})) {}
  double& at(int z, int y, int x) { return v[static_cast<std::size_t>(flat_index(dims, z, y, x))]; }
};

// Fills with a partial-volume blend band of width `rim` voxels centred `bias`
// voxels inside the exact surface: wall tissue blooms into the cavity the way
// pleura does on CT, while the reference masks stay pinned to the outer edge
// of the gradient (the hard e.contains boundary), which is where lung outlines
// are traced on real scans.
void fill_ellipsoid(Canvas& cv, const Ellipsoid& e, double value, bool is_air, double rim = 2.4,
                    double bias = 0.5) {
  const double pad = rim + 1.0;
  const int z0 = std::max(0, static_cast<int>(std::floor(e.c[0] - e.a[0] - pad))),
            z1 = std::min(cv.dims[0] - 1, static_cast<int>(std::ceil(e.c[0] + e.a[0] + pad)));
  const int y0 = std::max(0, static_cast<int>(std::floor(e.c[1] - e.a[1] - pad))),
            y1 = std::min(cv.dims[1] - 1, static_cast<int>(std::ceil(e.c[1] + e.a[1] + pad)));
  const int x0 = std::max(0, static_cast<int>(std::floor(e.c[2] - e.a[2] - pad))),
            x1 = std::min(cv.dims[2] - 1, static_cast<int>(std::ceil(e.c[2] + e.a[2] + pad)));
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dz = (z - e.c[0]) / e.a[0], dy = (y - e.c[1]) / e.a[1], dx = (x - e.c[2]) / e.a[2];
        const double n = std::sqrt(dz * dz + dy * dy + dx * dx);
        // First-order signed distance to the surface: (n - 1) / |grad n|.
        const double g = std::sqrt(dz * dz / (e.a[0] * e.a[0]) + dy * dy / (e.a[1] * e.a[1]) +
                                   dx * dx / (e.a[2] * e.a[2]));
        const double dist = g > 1e-12 ? (n - 1.0) * n / g : -1.0;
        const double f = std::clamp(0.5 - (dist + bias) / rim, 0.0, 1.0);
        if (f <= 0.0) continue;
        double& cell = cv.at(z, y, x);
        cell = cell + f * (value - cell);
        if (e.contains(z, y, x)) cv.air.at(z, y, x) = is_air;
      }
}

// Soft spherical brush: blends toward `value` with a linear ramp at the rim.
void brush(Canvas& cv, const Vec3& c, double radius, double ramp, double value, bool is_air) {
  const double reach = radius + ramp;
  const int z0 = std::max(0, static_cast<int>(std::floor(c[0] - reach))),
            z1 = std::min(cv.dims[0] - 1, static_cast<int>(std::ceil(c[0] + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(c[1] - reach))),
            y1 = std::min(cv.dims[1] - 1, static_cast<int>(std::ceil(c[1] + reach)));
  const int x0 = std::max(0, static_cast<int>(std::floor(c[2] - reach))),
            x1 = std::min(cv.dims[2] - 1, static_cast<int>(std::ceil(c[2] + reach)));
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
        const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
        const double f = std::clamp((radius + 0.5 * ramp - dist) / ramp, 0.0, 1.0);
        if (f <= 0.0) continue;
        double& cell = cv.at(z, y, x);
        cell = cell + f * (value - cell);
        if (f >= 0.5) cv.air.at(z, y, x) = is_air;
      }
}

void draw_tube(Canvas& cv, const Vec3& p0, const Vec3& p1, double r0, double r1, double value, bool is_air) {
  const Vec3 d{p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]};
  const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  const int steps = std::max(1, static_cast<int>(std::ceil(len / 0.5)));
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const Vec3 p{p0[0] + t * d[0], p0[1] + t * d[1], p0[2] + t * d[2]};
    brush(cv, p, r0 + t * (r1 - r0), 1.0, value, is_air);
  }
}

}  // namespace

PhantomCase generate_case(const PhantomConfig& cfg, std::uint64_t seed, int case_index) {
  if (cfg.dims[0] < 24 || cfg.dims[1] < 24 || cfg.dims[2] < 24)
    throw ConfigError("phantom.dims: each axis must be >= 24");
  if (!(cfg.spacing_mm > 0)) throw ConfigError("phantom.spacing_mm: must be > 0");
  if (cfg.radius_lo_mm > cfg.radius_hi_mm || cfg.radius_lo_mm <= 0)
    throw ConfigError("phantom.radius_range_mm: need 0 < lo <= hi");
  Rng rng(derive_seed(seed, kPhantomStreamTag, static_cast<std::uint64_t>(case_index)));

  const int D = cfg.dims[0], H = cfg.dims[1], W = cfg.dims[2];
  const double sp = cfg.spacing_mm;
  Canvas cv(cfg.dims, sp);

  // Body slab spans the full cross-section of every body slice (a torso scan
  // cropped inside the body laterally); optional all-air region above it with
  // an open airway exercises top-slice stripping.
  const bool open_top = rng.bernoulli(cfg.open_top_prob);
  const bool bridged = rng.bernoulli(cfg.bridge_prob);
  const int z_body = open_top ? std::max(4, static_cast<int>(std::lround(0.09 * D))) : 0;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        cv.at(z, y, x) = z < z_body ? cfg.hu_air : cfg.hu_tissue;
        cv.air.at(z, y, x) = z < z_body;
      }

  // two lung ellipsoids, jittered
  const double body_d = D - z_body;
  Ellipsoid lungs[2];
  Mask lung_mask = Mask::zeros(cfg.dims, {sp, sp, sp});
  for (int i = 0; i < 2; ++i) {
    const double cx_frac = i == 0 ? 0.30 : 0.70;
    lungs[i].c = {z_body + 0.52 * body_d + rng.uniform(-2, 2), 0.48 * H + rng.uniform(-2, 2),
                  cx_frac * W + rng.uniform(-1.5, 1.5)};
    lungs[i].a = {0.30 * body_d * rng.uniform(0.92, 1.06), 0.25 * H * rng.uniform(0.92, 1.06),
                  0.17 * W * rng.uniform(0.92, 1.06)};
    fill_ellipsoid(cv, lungs[i], cfg.hu_air, true);
  }
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (lungs[0].contains(z, y, x) || lungs[1].contains(z, y, x)) lung_mask.at(z, y, x) = 1;

  // airway: trachea + two bronchi joining the lungs (when bridged)
  if (bridged) {
    const double cy = 0.5 * (lungs[0].c[1] + lungs[1].c[1]);
    const double cxm = 0.5 * W;
    const double carina_z = std::min(lungs[0].c[0], lungs[1].c[0]) - 0.35 * std::min(lungs[0].a[0], lungs[1].a[0]);
    const double top_z = open_top ? z_body - 1.0 : std::max(2.0, z_body + 3.0);
    draw_tube(cv, {top_z, cy, cxm}, {carina_z, cy, cxm}, 2.4, 2.4, cfg.hu_air, true);
    for (int i = 0; i < 2; ++i)
      draw_tube(cv, {carina_z, cy, cxm}, lungs[i].c, 2.3, 2.0, cfg.hu_air, true);
  }

  // bone: spine column + periodic rib shells around each lung
  {
    const double spine_y = 0.80 * H, spine_x = 0.50 * W, spine_r = 0.05 * (H + W) / 2.0;
    for (int z = z_body; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double dy = y - spine_y, dx = x - spine_x;
          if (dy * dy + dx * dx <= spine_r * spine_r) {
            cv.at(z, y, x) = cfg.hu_bone;
            cv.air.at(z, y, x) = 0;
          }
        }
    for (const auto& lung : lungs) {
      const Ellipsoid shell{lung.c, {lung.a[0] * 1.18, lung.a[1] * 1.18, lung.a[2] * 1.18}};
      const int z0 = std::max(z_body, static_cast<int>(lung.c[0] - shell.a[0])),
                z1 = std::min(D - 1, static_cast<int>(lung.c[0] + shell.a[0]));
      for (int z = z0; z <= z1; ++z) {
        if ((z % 7) > 1) continue;  // rib every 7th slice, 2 thick
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const double nz = (z - shell.c[0]) / shell.a[0], ny = (y - shell.c[1]) / shell.a[1],
                         nx = (x - shell.c[2]) / shell.a[2];
            const double n = std::sqrt(nz * nz + ny * ny + nx * nx);
            if (n >= 1.0 && n <= 1.09 && !lung_mask.at(z, y, x)) {
              cv.at(z, y, x) = cfg.hu_bone;
              cv.air.at(z, y, x) = 0;
            }
          }
      }
    }
  }

  // vessels: tapering tubes radiating from each lung center
  for (const auto& lung : lungs) {
    for (int k = 0; k < cfg.vessel_count; ++k) {
      const Vec3 d = random_unit(rng);
      const double reach = rng.uniform(0.55, 0.85) * lung.radius_along(d);
      const double r0 = rng.uniform(1.4, 2.4);
      const double hu = cfg.hu_tissue + rng.uniform(-15.0, 20.0);
      const Vec3 p1{lung.c[0] + d[0] * reach, lung.c[1] + d[1] * reach, lung.c[2] + d[2] * reach};
      draw_tube(cv, lung.c, p1, r0, 0.45 * r0, hu, false);
    }
  }

  // nodules
  CaseTruth truth;
  truth.leak_p = cfg.leak_p;
  const int n_nodules = static_cast<int>(rng.uniform_int(cfg.nodule_count_lo, cfg.nodule_count_hi));
  std::vector<Vec3> centers;
  std::vector<double> radii;
  for (int i = 0; i < n_nodules; ++i) {
    const double rho_mm = rng.uniform(cfg.radius_lo_mm, cfg.radius_hi_mm);
    const double rho = rho_mm / sp;  // voxels
    const bool spic = rng.bernoulli(cfg.spiculation_prob);
    // Spiculated masses stay interior: a spike tip reaching the pleura severs
    // the slice contour in a way slice-wise masking cannot repair.
    const bool wall = rng.bernoulli(cfg.wall_attach_prob) && !spic;
    const double solidity = rng.uniform();
    const double hu_n = cfg.hu_nodule_lo + solidity * (cfg.hu_nodule_hi - cfg.hu_nodule_lo);
    const auto& rule = cfg.malignancy_rule;
    const double malignancy =
        sigmoid(rule.intercept + rule.size_coef * 2.0 * rho_mm + (spic ? rule.spiculation_coef : 0.0) +
                rule.nonsolid_coef * (1.0 - solidity));

    bool placed = false;
    Vec3 p{0, 0, 0};
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const auto& lung = lungs[rng.uniform_int(0, 1)];
      Vec3 d = random_unit(rng);
      if (wall) {
        // Pleural nodules sit against the costal (lateral) wall, where the
        // slice contour is flattest; apical/anterior attachments would land on
        // high-curvature contour ends that masking cannot recover.
        for (int k = 0; k < 60 && (std::abs(d[0]) > 0.6 || std::abs(d[1]) > std::abs(d[2])); ++k)
          d = random_unit(rng);
        if (std::abs(d[0]) > 0.6 || std::abs(d[1]) > std::abs(d[2])) continue;
      }
      const double rd = lung.radius_along(d);
      double dist;
      if (wall) {
        // Pin the centre at a target Euclidean depth below the pleura: deep
        // enough that the per-slice hull chord across the bite still covers
        // it after thresholding eats into the wall, shallow enough that the
        // nodule clearly indents the pleural surface. Along a ray from the
        // centre, depth(t) = (rd - t) / (rd^2 G) exactly (first order).
        const double want = std::max(0.5 * rho, 1.9);
        const double G = std::sqrt(d[0] * d[0] / std::pow(lung.a[0], 4) + d[1] * d[1] / std::pow(lung.a[1], 4) +
                                   d[2] * d[2] / std::pow(lung.a[2], 4));
        dist = rd - want * rd * rd * G;
        if (dist <= 0.0) continue;
      } else {
        const double max_d = rd - rho - 2.0;
        if (max_d <= 0.0) continue;
        // Cube-root radial draw = uniform density over the reachable volume;
        // a plain uniform distance would pile nodules up at the lung center
        // and make multi-nodule cases collide.
        dist = max_d * std::cbrt(rng.uniform());
      }
      p = {lung.c[0] + d[0] * dist, lung.c[1] + d[1] * dist, lung.c[2] + d[2] * dist};
      // True Euclidean clearance, spike tips included; the extra margin also
      // absorbs the first-order error of depth() near the flattest wall.
      const double reach = spic ? 1.5 * rho : rho;
      bool ok = wall || lung.depth(p[0], p[1], p[2]) >= reach + 3.0;
      // Keep the lesion's cross-section small against the lung's at this
      // z-level, or slice-wise masking treats the slice as a crescent and
      // leaves the bite unfilled; big nodules therefore sit near the equator.
      const double zfrac = (p[0] - lung.c[0]) / lung.a[0];
      const double slice_area = (lung.a[1] - 1.2) * (lung.a[2] - 1.2) * std::max(0.0, 1.0 - zfrac * zfrac);
      const double hole = (rho + 0.8) * (rho + 0.8) * (spic ? 1.35 : 1.0);
      ok = ok && slice_area >= (wall ? 2.2 : 3.4) * hole;
      for (int a = 0; a < 3; ++a) ok = ok && p[a] - rho - 2 >= 0 && p[a] + rho + 2 <= cfg.dims[a] - 1;
      for (std::size_t j = 0; ok && j < centers.size(); ++j) {
        const double dz = p[0] - centers[j][0], dy = p[1] - centers[j][1], dx = p[2] - centers[j][2];
        ok = std::sqrt(dz * dz + dy * dy + dx * dx) >= rho + radii[j] + 2.0;
      }
      placed = ok;
    }
    if (!placed) continue;  // crowded case: drop this nodule rather than fail the dataset
    centers.push_back(p);
    radii.push_back(rho);

    brush(cv, p, rho, 1.5, hu_n, false);
    if (spic) {
      const int n_spikes = static_cast<int>(rng.uniform_int(6, 12));
      for (int s = 0; s < n_spikes; ++s) {
        const Vec3 d = random_unit(rng);
        const double len = rng.uniform(0.25, 0.5) * rho;
        for (double t = 0.7 * rho; t <= rho + len; t += 0.4) {
          const double tau = (t - 0.7 * rho) / (0.3 * rho + len);
          const Vec3 q{p[0] + d[0] * t, p[1] + d[1] * t, p[2] + d[2] * t};
          brush(cv, q, std::max(0.6, 1.5 * (1.0 - tau)), 1.2, hu_n, false);
        }
      }
    }

    TruthNodule tn;
    tn.center_mm = {p[0] * sp, p[1] * sp, p[2] * sp};
    tn.r_mm = 2.0 * rho_mm;
    tn.malignancy = malignancy;
    tn.spiculated = spic;
    tn.wall_attached = wall;
    tn.solidity = solidity;
    truth.nodules.push_back(tn);
  }

  // noisy-or outcome: any malignant nodule or the leak flips the case
  bool label = false;
  for (const auto& n : truth.nodules) label = rng.bernoulli(n.malignancy) || label;
  label = rng.bernoulli(cfg.leak_p) || label;
  truth.label = label;

  PhantomCase out;
  out.truth = std::move(truth);
  out.lung_mask = std::move(lung_mask);
  out.volume.dims = cfg.dims;
  out.volume.spacing_mm = {sp, sp, sp};
  out.volume.origin_mm = {0, 0, 0};
  out.volume.value_kind = ValueKind::hu_int16;
  out.volume.data.resize(static_cast<std::size_t>(voxel_count(cfg.dims)));
  for (std::size_t i = 0; i < cv.v.size(); ++i) {
    const double noisy = cv.v[i] + rng.normal(0.0, cfg.noise_sigma_hu);
    out.volume.data[i] = static_cast<std::int16_t>(std::llround(std::clamp(noisy, -32768.0, 32767.0)));
  }
  out.air_mask = std::move(cv.air);
  return out;
}

std::vector<std::string> split_train_val(const std::vector<std::string>& ids, double train_fraction) {
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ha = fnv1a64(ids[a]), hb = fnv1a64(ids[b]);
    return ha != hb ? ha < hb : ids[a] < ids[b];
  });
  const auto n_train =
      static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(ids.size()) - 1e-12));
  std::vector<std::string> split(ids.size(), "val");
  for (std::size_t k = 0; k < order.size() && k < n_train; ++k) split[order[k]] = "train";
  return split;
}

void save_truth(const CaseTruth& t, const std::string& path) {
  json j;
  j["label"] = t.label ? 1 : 0;
  j["leak_p"] = t.leak_p;
  j["nodules"] = json::array();
  for (const auto& n : t.nodules) {
    j["nodules"].push_back({{"x", n.center_mm[2]},
                            {"y", n.center_mm[1]},
                            {"z", n.center_mm[0]},
                            {"r", n.r_mm},
                            {"malignancy", n.malignancy},
                            {"spiculated", n.spiculated}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("save_truth: cannot open " + path);
  out << j.dump(2) << "\n";
}

CaseTruth load_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_truth: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("load_truth: malformed JSON in " + path + ": " + e.what());
  }
  CaseTruth t;
  try {
    t.label = j.at("label").get<int>() != 0;
    t.leak_p = j.at("leak_p").get<double>();
    for (const auto& n : j.at("nodules")) {
      TruthNodule tn;
      tn.center_mm = {n.at("z").get<double>(), n.at("y").get<double>(), n.at("x").get<double>()};
      tn.r_mm = n.at("r").get<double>();
      tn.malignancy = n.at("malignancy").get<double>();
      tn.spiculated = n.at("spiculated").get<bool>();
      t.nodules.push_back(tn);
    }
  } catch (const json::exception& e) {
    throw DataError("load_truth: missing field in " + path + ": " + e.what());
  }
  return t;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["seed"] = m.seed;
  j["cases"] = json::array();
  for (const auto& c : m.cases)
    j["cases"].push_back({{"id", c.id}, {"volume", c.dir + "/volume.json"}, {"truth", c.dir + "/truth.json"},
                          {"split", c.split}, {"label", c.label ? 1 : 0}});
  std::ofstream out(path);
  if (!out) throw DataError("save_manifest: cannot open " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_manifest: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("load_manifest: malformed JSON in " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& c : j.at("cases")) {
      DatasetEntry e;
      e.id = c.at("id").get<std::string>();
      e.dir = std::filesystem::path(c.at("volume").get<std::string>()).parent_path().string();
      e.split = c.at("split").get<std::string>();
      e.label = c.at("label").get<int>() != 0;
      m.cases.push_back(e);
    }
  } catch (const json::exception& e) {
    throw DataError("load_manifest: missing field in " + path + ": " + e.what());
  }
  return m;
}

DatasetManifest emit_dataset(const PhantomConfig& cfg, std::uint64_t seed, int n_cases, const std::string& out_dir) {
  if (n_cases <= 0) throw ConfigError("make-phantom: case count must be > 0");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<std::string> ids;
  for (int i = 0; i < n_cases; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "case_%04d", i);
    ids.emplace_back(buf);
  }
  const auto splits = split_train_val(ids, cfg.train_fraction);
  DatasetManifest m;
  m.seed = seed;
  for (int i = 0; i < n_cases; ++i) {
    const PhantomCase pc = generate_case(cfg, seed, i);
    const std::string dir = out_dir + "/" + ids[static_cast<std::size_t>(i)];
    fs::create_directories(dir);
    save_volume(pc.volume, dir + "/volume.json");
    save_truth(pc.truth, dir + "/truth.json");
    DatasetEntry e;
    e.id = ids[static_cast<std::size_t>(i)];
    e.dir = ids[static_cast<std::size_t>(i)];
    e.label = pc.truth.label;
    e.split = splits[static_cast<std::size_t>(i)];
    m.cases.push_back(e);
  }
  save_manifest(m, out_dir + "/manifest.json");
  return m;
}

}  // namespace pulmo
