#include "pulmo/morphology.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pulmo {

std::vector<std::int32_t> label_slice(const std::uint8_t* slice, int h, int w, int& count) {
  std::vector<std::int32_t> labels(static_cast<std::size_t>(h) * w, 0);
  std::vector<std::int32_t> stack;
  count = 0;
  for (int start = 0; start < h * w; ++start) {
    if (!slice[start] || labels[start]) continue;
    const std::int32_t id = ++count;
    stack.clear();
    stack.push_back(start);
    labels[start] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int py = p / w, px = p % w;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (!dy && !dx) continue;
          const int ny = py + dy, nx = px + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const int q = ny * w + nx;
          if (slice[q] && !labels[q]) {
            labels[q] = id;
            stack.push_back(q);
          }
        }
      }
    }
  }
  return labels;
}

std::vector<Region2D> slice_regions(const std::vector<std::int32_t>& labels, int h, int w, int count) {
  std::vector<Region2D> regions(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) regions[static_cast<std::size_t>(i)].label = i + 1;
  // first pass: area + centroid + border contact
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::int32_t l = labels[static_cast<std::size_t>(y) * w + x];
      if (!l) continue;
      auto& r = regions[static_cast<std::size_t>(l - 1)];
      r.area_px += 1;
      r.centroid_y += y;
      r.centroid_x += x;
      if (y == 0 || y == h - 1 || x == 0 || x == w - 1) r.touches_border = true;
    }
  }
  for (auto& r : regions) {
    r.centroid_y /= static_cast<double>(r.area_px);
    r.centroid_x /= static_cast<double>(r.area_px);
  }
  // second pass: central second moments -> eccentricity of the equivalent ellipse
  std::vector<double> mu20(static_cast<std::size_t>(count), 0.0), mu02(mu20), mu11(mu20);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::int32_t l = labels[static_cast<std::size_t>(y) * w + x];
      if (!l) continue;
      const auto& r = regions[static_cast<std::size_t>(l - 1)];
      const double cy = y - r.centroid_y, cx = x - r.centroid_x;
      mu20[static_cast<std::size_t>(l - 1)] += cy * cy;
      mu02[static_cast<std::size_t>(l - 1)] += cx * cx;
      mu11[static_cast<std::size_t>(l - 1)] += cy * cx;
    }
  }
  for (int i = 0; i < count; ++i) {
    auto& r = regions[static_cast<std::size_t>(i)];
    const double a = mu20[static_cast<std::size_t>(i)], b = mu02[static_cast<std::size_t>(i)],
                 c = mu11[static_cast<std::size_t>(i)];
    const double tr = a + b;
    const double disc = std::sqrt(std::max(0.0, (a - b) * (a - b) + 4.0 * c * c));
    const double l1 = 0.5 * (tr + disc), l2 = 0.5 * (tr - disc);
    r.eccentricity = l1 <= 0.0 ? 0.0 : std::sqrt(std::max(0.0, 1.0 - std::max(0.0, l2) / l1));
  }
  return regions;
}

Labeled3D label_components_26(const Mask& m) {
  Labeled3D out;
  out.labels.assign(static_cast<std::size_t>(m.size()), 0);
  const int D = m.dims[0], H = m.dims[1], W = m.dims[2];
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < m.size(); ++start) {
    if (!m.data[static_cast<std::size_t>(start)] || out.labels[static_cast<std::size_t>(start)]) continue;
    const std::int32_t id = ++out.count;
    stack.clear();
    stack.push_back(start);
    out.labels[static_cast<std::size_t>(start)] = id;
    while (!stack.empty()) {
      const std::int64_t p = stack.back();
      stack.pop_back();
      const int pz = static_cast<int>(p / (static_cast<std::int64_t>(H) * W));
      const int rem = static_cast<int>(p % (static_cast<std::int64_t>(H) * W));
      const int py = rem / W, px = rem % W;
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dz && !dy && !dx) continue;
            const int nz = pz + dz, ny = py + dy, nx = px + dx;
            if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
            const std::int64_t q = flat_index(m.dims, nz, ny, nx);
            if (m.data[static_cast<std::size_t>(q)] && !out.labels[static_cast<std::size_t>(q)]) {
              out.labels[static_cast<std::size_t>(q)] = id;
              stack.push_back(q);
            }
          }
        }
      }
    }
  }
  return out;
}

namespace {

enum class MorphOp { dilate, erode };

void axis_pass(std::vector<std::uint8_t>& data, const Index3& dims, int axis, MorphOp op) {
  const int D = dims[0], H = dims[1], W = dims[2];
  std::vector<std::uint8_t> line;
  const int n = dims[axis];
  line.resize(static_cast<std::size_t>(n));
  const auto combine = [op](std::uint8_t a, std::uint8_t b, std::uint8_t c) -> std::uint8_t {
    return op == MorphOp::dilate ? (a | b | c) : (a & b & c);
  };
  const std::uint8_t edge = op == MorphOp::dilate ? 0 : 1;  // out-of-volume treated as background
  const auto run_line = [&](std::uint8_t* base, std::int64_t stride) {
    for (int i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = base[i * stride];
    for (int i = 0; i < n; ++i) {
      const std::uint8_t prev = i > 0 ? line[static_cast<std::size_t>(i - 1)] : edge;
      const std::uint8_t next = i + 1 < n ? line[static_cast<std::size_t>(i + 1)] : edge;
      base[i * stride] = combine(prev, line[static_cast<std::size_t>(i)], next);
    }
  };
  if (axis == 0) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) run_line(&data[flat_index(dims, 0, y, x)], static_cast<std::int64_t>(H) * W);
  } else if (axis == 1) {
    for (int z = 0; z < D; ++z)
      for (int x = 0; x < W; ++x) run_line(&data[flat_index(dims, z, 0, x)], W);
  } else {
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y) run_line(&data[flat_index(dims, z, y, 0)], 1);
  }
}

Mask morph(const Mask& m, int iterations, MorphOp op) {
  Mask out = m;
  for (int it = 0; it < iterations; ++it)
    for (int axis = 0; axis < 3; ++axis) axis_pass(out.data, out.dims, axis, op);
  return out;
}

}  // namespace

Mask dilate(const Mask& m, int iterations) { return morph(m, iterations, MorphOp::dilate); }
Mask erode(const Mask& m, int iterations) { return morph(m, iterations, MorphOp::erode); }

void gaussian_smooth_2d(const float* in, float* out, int h, int w, double sigma) {
  if (sigma <= 0.0) {
    std::memcpy(out, in, sizeof(float) * static_cast<std::size_t>(h) * w);
    return;
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(radius) + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
  for (int i = 0; i <= radius; ++i) k[static_cast<std::size_t>(i)] = std::exp(-0.5 * i * i / (sigma * sigma)) / norm;

  const auto reflect = [](int i, int n) {
    // half-sample symmetric: ... b a | a b c | c b ...
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - i - 1;
    }
    return i;
  };

  std::vector<float> tmp(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {  // horizontal pass
    for (int x = 0; x < w; ++x) {
      double acc = k[0] * in[static_cast<std::size_t>(y) * w + x];
      for (int i = 1; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i)] * (in[static_cast<std::size_t>(y) * w + reflect(x - i, w)] +
                                                 in[static_cast<std::size_t>(y) * w + reflect(x + i, w)]);
      tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  }
  for (int y = 0; y < h; ++y) {  // vertical pass
    for (int x = 0; x < w; ++x) {
      double acc = k[0] * tmp[static_cast<std::size_t>(y) * w + x];
      for (int i = 1; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i)] * (tmp[static_cast<std::size_t>(reflect(y - i, h)) * w + x] +
                                                 tmp[static_cast<std::size_t>(reflect(y + i, h)) * w + x]);
      out[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
    }
  }
}

namespace {

// Andrew monotone chain over integer points (x, y); returns CCW hull.
std::vector<std::array<std::int64_t, 2>> convex_hull(std::vector<std::array<std::int64_t, 2>> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  const auto cross = [](const std::array<std::int64_t, 2>& o, const std::array<std::int64_t, 2>& a,
                        const std::array<std::int64_t, 2>& b) {
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
  };
  const std::size_t n = pts.size();
  if (n < 3) return pts;
  std::vector<std::array<std::int64_t, 2>> hull(2 * n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  const std::size_t lower = k + 1;
  for (std::size_t i = n - 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

}  // namespace

std::int64_t convex_hull_filled(const std::uint8_t* in, std::uint8_t* out, int h, int w) {
  std::vector<std::array<std::int64_t, 2>> pts;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (in[static_cast<std::size_t>(y) * w + x]) pts.push_back({x, y});
  if (pts.size() < 3) {
    if (out != in) std::memcpy(out, in, static_cast<std::size_t>(h) * w);
    std::int64_t c = 0;
    for (const auto& p : pts) ++c, (void)p;
    return c;
  }
  const auto hull = convex_hull(pts);
  if (hull.size() < 3) {  // collinear points: keep input
    if (out != in) std::memcpy(out, in, static_cast<std::size_t>(h) * w);
    return static_cast<std::int64_t>(pts.size());
  }
  std::memset(out, 0, static_cast<std::size_t>(h) * w);
  std::int64_t filled = 0;
  std::int64_t ymin = hull[0][1], ymax = hull[0][1];
  for (const auto& p : hull) {
    ymin = std::min(ymin, p[1]);
    ymax = std::max(ymax, p[1]);
  }
  for (std::int64_t y = ymin; y <= ymax; ++y) {
    double xlo = 1e30, xhi = -1e30;
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const auto& p = hull[i];
      const auto& q = hull[(i + 1) % hull.size()];
      const std::int64_t lo = std::min(p[1], q[1]), hi = std::max(p[1], q[1]);
      if (y < lo || y > hi) continue;
      if (p[1] == q[1]) {
        xlo = std::min(xlo, static_cast<double>(std::min(p[0], q[0])));
        xhi = std::max(xhi, static_cast<double>(std::max(p[0], q[0])));
      } else {
        const double t = static_cast<double>(y - p[1]) / static_cast<double>(q[1] - p[1]);
        const double x = static_cast<double>(p[0]) + t * static_cast<double>(q[0] - p[0]);
        xlo = std::min(xlo, x);
        xhi = std::max(xhi, x);
      }
    }
    const int x0 = static_cast<int>(std::ceil(xlo - 1e-9));
    const int x1 = static_cast<int>(std::floor(xhi + 1e-9));
    for (int x = std::max(0, x0); x <= std::min(w - 1, x1); ++x) {
      out[static_cast<std::size_t>(y) * w + x] = 1;
      ++filled;
    }
  }
  return filled;
}

}  // namespace pulmo
