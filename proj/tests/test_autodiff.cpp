#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pulmo/nnet.hpp"
#include "pulmo/optim.hpp"
#include "pulmo/rng.hpp"

using namespace pulmo;

namespace {

using Td = double;

// A typed null tape: forward-only evaluation (template deduction needs the
// pointer type, a bare nullptr cannot bind Tape<T>*).
Tape<Td>* const no_tape = nullptr;

// Deterministic, non-uniform weighting of every output coordinate: reducing
// through a plain sum would give every coordinate the same output gradient,
// letting transposed or index-shifted backward implementations cancel out.
Tensor<Td> weighted_sum(Tape<Td>* tape, const Tensor<Td>& x) {
  Tensor<Td> w = Tensor<Td>::zeros(x.shape());
  for (Eigen::Index i = 0; i < w.size(); ++i)
    w.value()[i] = 0.05 * static_cast<double>((7 * i) % 23) - 0.4;
  return sum(tape, mul(tape, x, w));
}

Tensor<Td> uniform_tensor(std::vector<int> shape, Rng& rng, double lo, double hi,
                          bool requires_grad = true) {
  Tensor<Td> t = Tensor<Td>::zeros(std::move(shape), requires_grad);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.value()[i] = rng.uniform(lo, hi);
  return t;
}

// Magnitudes in [min_abs, 1] with random signs: finite differences stay away
// from the relu kink at zero.
Tensor<Td> signed_tensor(std::vector<int> shape, Rng& rng, double min_abs) {
  Tensor<Td> t = Tensor<Td>::zeros(std::move(shape), true);
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t.value()[i] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(min_abs, 1.0);
  return t;
}

// All values distinct with spacing >= step, in random order: pooling argmaxes
// cannot flip under the +-h probes of a gradient check.
Tensor<Td> distinct_tensor(std::vector<int> shape, Rng& rng, double step = 0.02) {
  Tensor<Td> t = Tensor<Td>::zeros(std::move(shape), true);
  std::vector<double> vals(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = step * (static_cast<double>(i) - 0.5 * static_cast<double>(vals.size()));
  rng.shuffle(vals);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.value()[i] = vals[static_cast<std::size_t>(i)];
  return t;
}

// Backward once for the analytic gradients, then central differences on every
// listed tensor through tape-free replays of the same graph.
template <class BuildFn>
void check_grads(BuildFn&& build, const std::vector<Tensor<Td>*>& params, double h = 1e-3) {
  // Gradients accumulate additively across backward passes, so clear any
  // residue a previous check left on a shared tensor.
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

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

TEST_CASE("elementwise forward values match direct computation") {
  Rng rng(101);
  Tensor<Td> a = uniform_tensor({2, 3}, rng, -2, 2);
  Tensor<Td> b = uniform_tensor({2, 3}, rng, -2, 2);

  Tensor<Td> s = add(no_tape, a, b);
  Tensor<Td> m = mul(no_tape, a, b);
  Tensor<Td> f = affine(no_tape, a, 1.7, -0.3);
  Tensor<Td> r = relu(no_tape, a);
  Tensor<Td> g = sigmoid(no_tape, a);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    CHECK(s.value()[i] == a.value()[i] + b.value()[i]);
    CHECK(m.value()[i] == a.value()[i] * b.value()[i]);
    CHECK(f.value()[i] == doctest::Approx(1.7 * a.value()[i] - 0.3).epsilon(1e-14));
    CHECK(r.value()[i] == std::max(a.value()[i], 0.0));
    CHECK(g.value()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-a.value()[i]))).epsilon(1e-14));
  }

  // Saturated sigmoid stays finite: no overflow on either tail (the positive
  // tail rounds to exactly 1.0 in double precision, which is acceptable).
  Tensor<Td> big = Tensor<Td>::from({2}, std::vector<double>{-40.0, 40.0});
  Tensor<Td> gs = sigmoid(no_tape, big);
  CHECK(gs.value()[0] > 0.0);
  CHECK(gs.value()[0] < 1e-15);
  CHECK(gs.value()[1] <= 1.0);
  CHECK(gs.value()[1] > 1.0 - 1e-15);
  Tensor<Td> mid = sigmoid(no_tape, Tensor<Td>::from({1}, std::vector<double>{30.0}));
  CHECK(mid.value()[0] < 1.0);  // still strictly interior where representable

  CHECK(sum(no_tape, a).item() == doctest::Approx(a.value().sum()).epsilon(1e-14));
  CHECK(mean(no_tape, a).item() == doctest::Approx(a.value().mean()).epsilon(1e-14));
}

TEST_CASE("elementwise and reduction gradients match central differences") {
  Rng rng(102);
  Tensor<Td> a = uniform_tensor({3, 4}, rng, -1.5, 1.5);
  Tensor<Td> b = uniform_tensor({3, 4}, rng, -1.5, 1.5);
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, add(t, a, b)); }, {&a, &b});

  Tensor<Td> c = uniform_tensor({3, 4}, rng, -1.5, 1.5);
  Tensor<Td> d = uniform_tensor({3, 4}, rng, -1.5, 1.5);
  check_grads([&](Tape<Td>* t) { return sum(t, mul(t, c, d)); }, {&c, &d});

  Tensor<Td> e = uniform_tensor({2, 5}, rng, -1.5, 1.5);
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, affine(t, e, -2.3, 0.7)); }, {&e});

  Tensor<Td> f = signed_tensor({4, 4}, rng, 0.05);
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, relu(t, f)); }, {&f});

  Tensor<Td> g = uniform_tensor({4, 4}, rng, -3, 3);
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, sigmoid(t, g)); }, {&g});

  Tensor<Td> h = uniform_tensor({7}, rng, -2, 2);
  check_grads([&](Tape<Td>* t) { return sum(t, h); }, {&h});
  check_grads([&](Tape<Td>* t) { return mean(t, h); }, {&h});
}

TEST_CASE("shared input feeding two branches accumulates both gradients") {
  Rng rng(103);
  Tensor<Td> a = signed_tensor({3, 3}, rng, 0.1);
  Tensor<Td> b = uniform_tensor({3, 3}, rng, -1, 1);
  // a enters through both the sigmoid branch and the relu branch.
  auto build = [&](Tape<Td>* t) {
    Tensor<Td> lhs = sigmoid(t, add(t, a, b));
    Tensor<Td> rhs = relu(t, affine(t, a, 1.3, 0.2));
    return sum(t, mul(t, lhs, rhs));
  };
  check_grads(build, {&a, &b});
}

TEST_CASE("gather picks flat indices and scatter-adds through repeats") {
  Rng rng(104);
  Tensor<Td> x = uniform_tensor({2, 4}, rng, -2, 2);
  const std::vector<std::int64_t> idx{5, 1, 5, 0, 2};
  Tensor<Td> y = gather(no_tape, x, idx);
  REQUIRE(y.shape() == std::vector<int>{5});
  for (std::size_t i = 0; i < idx.size(); ++i)
    CHECK(y.value()[static_cast<Eigen::Index>(i)] ==
          x.value()[static_cast<Eigen::Index>(idx[i])]);

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, gather(t, x, idx)); }, {&x});

  // The repeated index must receive the sum of both output weights.
  x.grad().setZero();  // drop what the preceding check accumulated
  Tape<Td> tape;
  Tensor<Td> loss = sum(&tape, mul(&tape, gather(&tape, x, idx), Tensor<Td>::from({5}, std::vector<double>{1, 10, 100, 1000, 10000})));
  tape.backward(loss);
  CHECK(x.grad()[5] == doctest::Approx(101.0).epsilon(1e-14));
  CHECK(x.grad()[3] == 0.0);

  CHECK_THROWS_AS(gather(no_tape, x, {8}), std::logic_error);
  CHECK_THROWS_AS(gather(no_tape, x, {-1}), std::logic_error);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST_CASE("logit cross-entropy: closed form, saturation, gradients") {
  // Value equals softplus(o) - p*o; at o = 0 the loss is ln 2 for any target.
  Tensor<Td> z = Tensor<Td>::from({3}, std::vector<double>{0.0, 0.0, 0.0});
  Tensor<Td> lz = bce_with_logits(no_tape, z, std::vector<Td>{0.0, 0.5, 1.0});
  for (int i = 0; i < 3; ++i) CHECK(lz.value()[i] == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  // Hand-computed point: o = 1.2, p = 0.3 -> log(1+e^1.2) - 0.36.
  Tensor<Td> o = Tensor<Td>::from({1}, std::vector<double>{1.2});
  CHECK(bce_with_logits(no_tape, o, std::vector<Td>{0.3}).value()[0] ==
        doctest::Approx(std::log1p(std::exp(1.2)) - 0.36).epsilon(1e-14));

  // Extreme logits stay finite (no exp overflow), and a perfectly confident
  // correct prediction costs ~0.
  Tensor<Td> ext = Tensor<Td>::from({2}, std::vector<double>{500.0, -500.0});
  Tensor<Td> lext = bce_with_logits(no_tape, ext, std::vector<Td>{1.0, 0.0});
  CHECK(std::isfinite(lext.value()[0]));
  CHECK(lext.value()[0] <= 1e-100);
  CHECK(lext.value()[1] <= 1e-100);
  CHECK(lext.value()[0] >= 0.0);
  CHECK(lext.value()[1] >= 0.0);

  Rng rng(105);
  Tensor<Td> logits = uniform_tensor({6}, rng, -4, 4);
  const std::vector<Td> targets{0, 1, 0.25, 1, 0, 0.9};
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, bce_with_logits(t, logits, targets)); },
              {&logits});
  CHECK_THROWS_AS(bce_with_logits(no_tape, logits, std::vector<Td>{1.0}), std::logic_error);
}

TEST_CASE("robust regression penalty: quadratic core, linear tails, gradients") {
  Tensor<Td> p = Tensor<Td>::from({4}, std::vector<double>{0.5, 2.0, -3.0, 0.0});
  Tensor<Td> l = smooth_l1(no_tape, p, std::vector<Td>{0, 0, 0, 0});
  CHECK(l.value()[0] == doctest::Approx(0.25).epsilon(1e-14));  // r^2 inside |r| <= 1
  CHECK(l.value()[1] == doctest::Approx(2.0).epsilon(1e-14));   // |r| outside
  CHECK(l.value()[2] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(l.value()[3] == 0.0);

  // Residuals placed away from the |r| = 1 regime change.
  Tensor<Td> pred = Tensor<Td>::from({4}, std::vector<double>{-2.5, -0.6, 0.3, 1.7}, true);
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, smooth_l1(t, pred, std::vector<Td>(4, 0.0))); },
              {&pred});
  CHECK_THROWS_AS(smooth_l1(no_tape, pred, std::vector<Td>{0.0}), std::logic_error);
}

TEST_CASE("probability cross-entropy clamps and zeroes the clamped gradient") {
  const Td eps = 1e-7;
  Tensor<Td> p = Tensor<Td>::from({1}, std::vector<double>{0.3}, true);
  CHECK(bce_on_prob(no_tape, p, Td(1), eps).value()[0] == doctest::Approx(-std::log(0.3)).epsilon(1e-12));
  check_grads([&](Tape<Td>* t) { return bce_on_prob(t, p, Td(1), eps); }, {&p});

  Tensor<Td> q = Tensor<Td>::from({1}, std::vector<double>{0.85}, true);
  check_grads([&](Tape<Td>* t) { return bce_on_prob(t, q, Td(0), eps); }, {&q});

  // Below the clamp the forward value pins to the eps point and the gradient
  // stays exactly zero (never allocated or incremented).
  Tensor<Td> under = Tensor<Td>::from({1}, std::vector<double>{1e-9}, true);
  Tape<Td> tape;
  Tensor<Td> loss = bce_on_prob(&tape, under, Td(1), eps);
  CHECK(loss.value()[0] == doctest::Approx(-std::log(eps)).epsilon(1e-12));
  tape.backward(loss);
  CHECK((under.grad().size() == 0 || under.grad()[0] == 0.0));

  Tensor<Td> vec = Tensor<Td>::zeros({2});
  CHECK_THROWS_AS(bce_on_prob(no_tape, vec, Td(1), eps), std::logic_error);
}

// ---------------------------------------------------------------------------
// Dense and channel plumbing
// ---------------------------------------------------------------------------

TEST_CASE("dense matches an explicit matrix product and passes gradient checks") {
  Rng rng(106);
  const int n = 3, fin = 4, fout = 2;
  Tensor<Td> x = uniform_tensor({n, fin}, rng, -1, 1);
  Tensor<Td> w = uniform_tensor({fout, fin}, rng, -1, 1);
  Tensor<Td> b = uniform_tensor({fout}, rng, -1, 1);

  Tensor<Td> y = dense(no_tape, x, w, b);
  REQUIRE(y.shape() == std::vector<int>{n, fout});
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < fout; ++o) {
      double want = b.value()[o];
      for (int f = 0; f < fin; ++f) want += x.value()[i * fin + f] * w.value()[o * fin + f];
      CHECK(y.value()[i * fout + o] == doctest::Approx(want).epsilon(1e-12));
    }

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, dense(t, x, w, b)); }, {&x, &w, &b});

  CHECK_THROWS_AS(dense(no_tape, Tensor<Td>::zeros({4}), w, b), std::logic_error);
  CHECK_THROWS_AS(dense(no_tape, x, Tensor<Td>::zeros({fout, fin + 1}), b), std::logic_error);
  CHECK_THROWS_AS(dense(no_tape, x, w, Tensor<Td>::zeros({fout + 1})), std::logic_error);
}

TEST_CASE("channel concat/slice: layout, inversion, gradients") {
  Rng rng(107);
  Tensor<Td> p0 = uniform_tensor({2, 1, 2, 3, 2}, rng, -1, 1);
  Tensor<Td> p1 = uniform_tensor({2, 2, 2, 3, 2}, rng, -1, 1);
  Tensor<Td> p2 = uniform_tensor({2, 3, 2, 3, 2}, rng, -1, 1);

  Tensor<Td> cat = concat_channels(no_tape, {p0, p1, p2});
  REQUIRE(cat.shape() == std::vector<int>{2, 6, 2, 3, 2});
  const std::int64_t sp = 2 * 3 * 2;
  for (int n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < sp; ++i) {
      CHECK(cat.value()[(n * 6 + 0) * sp + i] == p0.value()[(n * 1 + 0) * sp + i]);
      CHECK(cat.value()[(n * 6 + 2) * sp + i] == p1.value()[(n * 2 + 1) * sp + i]);
      CHECK(cat.value()[(n * 6 + 5) * sp + i] == p2.value()[(n * 3 + 2) * sp + i]);
    }

  // Slicing the concatenation back out recovers each part exactly.
  Tensor<Td> mid = slice_channels(no_tape, cat, 1, 3);
  REQUIRE(mid.shape() == p1.shape());
  for (Eigen::Index i = 0; i < mid.size(); ++i) CHECK(mid.value()[i] == p1.value()[i]);

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, concat_channels(t, {p0, p1, p2})); },
              {&p0, &p1, &p2});
  Tensor<Td> xs = uniform_tensor({2, 4, 2, 2, 2}, rng, -1, 1);
  check_grads([&](Tape<Td>* t) { return weighted_sum(t, slice_channels(t, xs, 1, 3)); }, {&xs});

  CHECK_THROWS_AS(concat_channels<Td>(no_tape, {}), std::logic_error);
  CHECK_THROWS_AS(concat_channels(no_tape, {p0, uniform_tensor({2, 1, 2, 3, 3}, rng, -1, 1)}),
                  std::logic_error);
  CHECK_THROWS_AS(slice_channels(no_tape, xs, 2, 2), std::logic_error);
  CHECK_THROWS_AS(slice_channels(no_tape, xs, 0, 5), std::logic_error);
  CHECK_THROWS_AS(slice_channels(no_tape, Tensor<Td>::zeros({2, 4}), 0, 1), std::logic_error);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

// The obvious seven-loop convolution, as slow and as unambiguous as possible.
std::vector<double> conv_reference(const Tensor<Td>& x, const Tensor<Td>& w, const Tensor<Td>& b,
                                   int pad) {
  const int N = x.shape(0), Ci = x.shape(1), D = x.shape(2), H = x.shape(3), W = x.shape(4);
  const int Co = w.shape(0), k = w.shape(2);
  const int Do = D + 2 * pad - k + 1, Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  std::vector<double> y(static_cast<std::size_t>(N) * Co * Do * Ho * Wo, 0.0);
  auto xat = [&](int n, int c, int z, int yy, int xx) -> double {
    if (z < 0 || yy < 0 || xx < 0 || z >= D || yy >= H || xx >= W) return 0.0;
    return x.value()[(((std::int64_t(n) * Ci + c) * D + z) * H + yy) * W + xx];
  };
  std::size_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int z = 0; z < Do; ++z)
        for (int yy = 0; yy < Ho; ++yy)
          for (int xx = 0; xx < Wo; ++xx, ++oi) {
            double acc = b.value()[co];
            for (int ci = 0; ci < Ci; ++ci)
              for (int dz = 0; dz < k; ++dz)
                for (int dy = 0; dy < k; ++dy)
                  for (int dx = 0; dx < k; ++dx)
                    acc += xat(n, ci, z - pad + dz, yy - pad + dy, xx - pad + dx) *
                           w.value()[(((std::int64_t(co) * Ci + ci) * k + dz) * k + dy) * k + dx];
            y[oi] = acc;
          }
  return y;
}

}  // namespace

TEST_CASE("conv3d matches the direct reference on both code paths") {
  Rng rng(108);
  struct Case { std::vector<int> xs; int cout, k, pad; };
  // k=1/pad=0 exercises the pure-GEMM fast path; the rest go through im2col.
  const Case cases[] = {{{2, 2, 3, 4, 5}, 3, 1, 0},
                        {{1, 2, 4, 4, 4}, 2, 3, 1},
                        {{1, 1, 5, 4, 6}, 2, 3, 0},
                        {{1, 2, 4, 5, 4}, 1, 2, 1}};
  for (const Case& c : cases) {
    Tensor<Td> x = uniform_tensor(c.xs, rng, -1, 1, false);
    Tensor<Td> w = uniform_tensor({c.cout, c.xs[1], c.k, c.k, c.k}, rng, -1, 1, false);
    Tensor<Td> b = uniform_tensor({c.cout}, rng, -1, 1, false);
    Tensor<Td> y = conv3d(no_tape, x, w, b, c.pad);
    const std::vector<double> want = conv_reference(x, w, b, c.pad);
    REQUIRE(static_cast<std::size_t>(y.size()) == want.size());
    for (Eigen::Index i = 0; i < y.size(); ++i)
      CHECK(y.value()[i] == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("conv3d with a centered delta kernel is the identity") {
  Rng rng(109);
  Tensor<Td> x = uniform_tensor({1, 2, 3, 3, 3}, rng, -1, 1, false);
  Tensor<Td> w = Tensor<Td>::zeros({2, 2, 3, 3, 3});
  for (int c = 0; c < 2; ++c) w.value()[((((c * 2 + c) * 3) + 1) * 3 + 1) * 3 + 1] = 1.0;
  Tensor<Td> b = Tensor<Td>::zeros({2});
  Tensor<Td> y = conv3d(no_tape, x, w, b, 1);
  REQUIRE(y.shape() == x.shape());
  for (Eigen::Index i = 0; i < y.size(); ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("conv3d gradients on the GEMM and im2col paths") {
  Rng rng(110);
  {
    Tensor<Td> x = uniform_tensor({2, 3, 3, 3, 3}, rng, -1, 1);
    Tensor<Td> w = uniform_tensor({2, 3, 1, 1, 1}, rng, -1, 1);
    Tensor<Td> b = uniform_tensor({2}, rng, -1, 1);
    check_grads([&](Tape<Td>* t) { return weighted_sum(t, conv3d(t, x, w, b, 0)); }, {&x, &w, &b});
  }
  {
    Tensor<Td> x = uniform_tensor({1, 2, 4, 4, 4}, rng, -1, 1);
    Tensor<Td> w = uniform_tensor({2, 2, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor<Td> b = uniform_tensor({2}, rng, -1, 1);
    check_grads([&](Tape<Td>* t) { return weighted_sum(t, conv3d(t, x, w, b, 1)); }, {&x, &w, &b});
  }
  Tensor<Td> x = Tensor<Td>::zeros({1, 2, 3, 3, 3});
  CHECK_THROWS_AS(conv3d(no_tape, x, Tensor<Td>::zeros({2, 3, 3, 3, 3}), Tensor<Td>::zeros({2}), 1),
                  std::logic_error);
  CHECK_THROWS_AS(conv3d(no_tape, x, Tensor<Td>::zeros({2, 2, 3, 3, 3}), Tensor<Td>::zeros({3}), 1),
                  std::logic_error);
  CHECK_THROWS_AS(conv3d(no_tape, x, Tensor<Td>::zeros({2, 2, 5, 5, 5}), Tensor<Td>::zeros({2}), 0),
                  std::logic_error);
}

// ---------------------------------------------------------------------------
// Transposed convolution
// ---------------------------------------------------------------------------

TEST_CASE("deconv3d paints disjoint blocks and passes gradient checks") {
  Rng rng(111);
  const int f = 2;
  Tensor<Td> x = uniform_tensor({1, 2, 2, 2, 2}, rng, -1, 1);
  Tensor<Td> w = uniform_tensor({2, 3, f, f, f}, rng, -1, 1);
  Tensor<Td> b = uniform_tensor({3}, rng, -1, 1);

  Tensor<Td> y = deconv3d(no_tape, x, w, b, f);
  REQUIRE(y.shape() == std::vector<int>{1, 3, 4, 4, 4});
  // y[co, fz+dz, fy+dy, fx+dx] = b[co] + sum_ci x[ci,z,y,x] * w[ci,co,dz,dy,dx]
  for (int co = 0; co < 3; ++co)
    for (int z = 0; z < 4; ++z)
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 4; ++xx) {
          double want = b.value()[co];
          for (int ci = 0; ci < 2; ++ci)
            want += x.value()[((ci * 2 + z / f) * 2 + yy / f) * 2 + xx / f] *
                    w.value()[((((ci * 3 + co) * f + z % f) * f + yy % f) * f) + xx % f];
          CHECK(y.value()[((co * 4 + z) * 4 + yy) * 4 + xx] == doctest::Approx(want).epsilon(1e-12));
        }

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, deconv3d(t, x, w, b, f)); }, {&x, &w, &b});

  CHECK_THROWS_AS(deconv3d(no_tape, x, Tensor<Td>::zeros({3, 3, f, f, f}), b, f), std::logic_error);
  CHECK_THROWS_AS(deconv3d(no_tape, x, Tensor<Td>::zeros({2, 3, 3, 3, 3}), b, f), std::logic_error);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

TEST_CASE("max pooling: values, first-max tie rule, gradients") {
  Rng rng(112);
  Tensor<Td> x = distinct_tensor({1, 2, 4, 4, 4}, rng);
  Tensor<Td> y = maxpool3d(no_tape, x);
  REQUIRE(y.shape() == std::vector<int>{1, 2, 2, 2, 2});
  std::int64_t oi = 0;
  for (int c = 0; c < 2; ++c)
    for (int z = 0; z < 2; ++z)
      for (int yy = 0; yy < 2; ++yy)
        for (int xx = 0; xx < 2; ++xx, ++oi) {
          double best = -1e300;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                best = std::max(best, x.value()[((std::int64_t(c) * 4 + 2 * z + dz) * 4 + 2 * yy + dy) * 4 +
                                                2 * xx + dx]);
          CHECK(y.value()[oi] == best);
        }

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, maxpool3d(t, x)); }, {&x});

  // A fully tied window routes the whole gradient to its first voxel.
  Tensor<Td> tied = Tensor<Td>::zeros({1, 1, 2, 2, 2}, true);
  tied.value().setConstant(5.0);
  Tape<Td> tape;
  Tensor<Td> loss = sum(&tape, maxpool3d(&tape, tied));
  tape.backward(loss);
  CHECK(tied.grad()[0] == 1.0);
  CHECK(tied.grad().tail(7).abs().sum() == 0.0);

  CHECK_THROWS_AS(maxpool3d(no_tape, Tensor<Td>::zeros({1, 1, 3, 4, 4})), std::logic_error);
}

TEST_CASE("central 2x2x2 pooling reduces each map to its central max") {
  Rng rng(113);
  Tensor<Td> x = distinct_tensor({2, 3, 4, 2, 6}, rng);
  Tensor<Td> y = central_max_pool2(no_tape, x);
  REQUIRE(y.shape() == std::vector<int>{2, 3});
  // Central block starts at (d/2-1, h/2-1, w/2-1).
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double best = -1e300;
      for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t i =
                ((std::int64_t(n) * 3 + c) * 4 + (1 + dz)) * 2 * 6 + (0 + dy) * 6 + (2 + dx);
            best = std::max(best, x.value()[i]);
          }
      CHECK(y.value()[n * 3 + c] == best);
    }

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, central_max_pool2(t, x)); }, {&x});
  CHECK_THROWS_AS(central_max_pool2(no_tape, Tensor<Td>::zeros({1, 1, 3, 4, 4})), std::logic_error);
  CHECK_THROWS_AS(central_max_pool2(no_tape, Tensor<Td>::zeros({4, 4})), std::logic_error);
}

TEST_CASE("column-wise max: values, first-row tie rule, gradients") {
  Rng rng(114);
  Tensor<Td> x = distinct_tensor({4, 5}, rng);
  Tensor<Td> y = colwise_max(no_tape, x);
  REQUIRE(y.shape() == std::vector<int>{1, 5});
  for (int j = 0; j < 5; ++j) {
    double best = -1e300;
    for (int i = 0; i < 4; ++i) best = std::max(best, x.value()[i * 5 + j]);
    CHECK(y.value()[j] == best);
  }

  check_grads([&](Tape<Td>* t) { return weighted_sum(t, colwise_max(t, x)); }, {&x});

  Tensor<Td> tied = Tensor<Td>::zeros({3, 2}, true);
  tied.value().setConstant(1.5);
  Tape<Td> tape;
  Tensor<Td> loss = sum(&tape, colwise_max(&tape, tied));
  tape.backward(loss);
  CHECK(tied.grad()[0] == 1.0);
  CHECK(tied.grad()[1] == 1.0);
  CHECK(tied.grad().tail(4).abs().sum() == 0.0);

  CHECK_THROWS_AS(colwise_max(no_tape, Tensor<Td>::zeros({4})), std::logic_error);
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

TEST_CASE("batch normalization standardizes channels and updates running stats") {
  Rng rng(115);
  const int N = 2, C = 3;
  const std::int64_t sp = 2 * 2 * 2;
  Tensor<Td> x = uniform_tensor({N, C, 2, 2, 2}, rng, -2, 3, false);
  Tensor<Td> gamma = Tensor<Td>::from({C}, std::vector<double>{1, 1, 1});
  Tensor<Td> beta = Tensor<Td>::zeros({C});
  ArrX<Td> rm = ArrX<Td>::Zero(C), rv = ArrX<Td>::Constant(C, 1.0);
  const Td momentum = 0.1, eps = 1e-5;

  // Per-channel batch statistics, computed independently here.
  ArrX<Td> mu = ArrX<Td>::Zero(C), var = ArrX<Td>::Zero(C);
  for (int c = 0; c < C; ++c) {
    double s = 0, s2 = 0;
    for (int n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < sp; ++i) {
        const double v = x.value()[(std::int64_t(n) * C + c) * sp + i];
        s += v;
        s2 += v * v;
      }
    const double m = static_cast<double>(N) * sp;
    mu[c] = s / m;
    var[c] = s2 / m - mu[c] * mu[c];  // biased
  }

  Tensor<Td> y = batchnorm3d<Td>(no_tape, x, gamma, beta, rm, rv, true, momentum, eps);
  for (int c = 0; c < C; ++c) {
    // Output channel mean 0, variance var/(var+eps).
    double s = 0, s2 = 0;
    for (int n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < sp; ++i) {
        const double v = y.value()[(std::int64_t(n) * C + c) * sp + i];
        s += v;
        s2 += v * v;
      }
    const double m = static_cast<double>(N) * sp;
    CHECK(std::abs(s / m) < 1e-12);
    CHECK(s2 / m - (s / m) * (s / m) == doctest::Approx(var[c] / (var[c] + eps)).epsilon(1e-9));
    // running = 0.9 * old + 0.1 * batch, with the biased batch variance.
    CHECK(rm[c] == doctest::Approx(momentum * mu[c]).epsilon(1e-12));
    CHECK(rv[c] == doctest::Approx((1 - momentum) * 1.0 + momentum * var[c]).epsilon(1e-12));
  }

  // Pinned-statistics mode: a pure affine map through the running stats.
  ArrX<Td> rm2 = rm, rv2 = rv;
  Tensor<Td> g2 = Tensor<Td>::from({C}, std::vector<double>{0.5, 2.0, -1.0});
  Tensor<Td> b2 = Tensor<Td>::from({C}, std::vector<double>{0.1, -0.2, 0.3});
  Tensor<Td> yf = batchnorm3d<Td>(no_tape, x, g2, b2, rm2, rv2, false, momentum, eps);
  for (int c = 0; c < C; ++c)
    for (int n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < sp; ++i) {
        const std::int64_t ii = (std::int64_t(n) * C + c) * sp + i;
        const double want =
            (x.value()[ii] - rm[c]) / std::sqrt(rv[c] + eps) * g2.value()[c] + b2.value()[c];
        CHECK(yf.value()[ii] == doctest::Approx(want).epsilon(1e-12));
      }
  // Frozen mode must leave the running statistics untouched.
  CHECK((rm2 == rm).all());
  CHECK((rv2 == rv).all());

  CHECK_THROWS_AS(batchnorm3d<Td>(no_tape, x, Tensor<Td>::zeros({C + 1}), beta, rm, rv, true, momentum, eps),
                  std::logic_error);
}

TEST_CASE("batch normalization gradients in both statistics modes") {
  Rng rng(116);
  Tensor<Td> x = uniform_tensor({2, 2, 2, 2, 2}, rng, -1.5, 1.5);
  Tensor<Td> gamma = uniform_tensor({2}, rng, 0.5, 1.5);
  Tensor<Td> beta = uniform_tensor({2}, rng, -0.5, 0.5);
  ArrX<Td> rm = ArrX<Td>::Zero(2), rv = ArrX<Td>::Constant(2, 1.0);

  check_grads(
      [&](Tape<Td>* t) {
        return weighted_sum(t, batchnorm3d<Td>(t, x, gamma, beta, rm, rv, true, Td(0.1), Td(1e-5)));
      },
      {&x, &gamma, &beta});

  ArrX<Td> rm2(2), rv2(2);
  rm2 << 0.2, -0.4;
  rv2 << 1.3, 0.6;
  check_grads(
      [&](Tape<Td>* t) {
        return weighted_sum(t, batchnorm3d<Td>(t, x, gamma, beta, rm2, rv2, false, Td(0.1), Td(1e-5)));
      },
      {&x, &gamma, &beta});
}

// ---------------------------------------------------------------------------
// Product pooling
// ---------------------------------------------------------------------------

TEST_CASE("product pooling: value, permutation bit-exactness, leave-one-out gradients") {
  Rng rng(117);
  Tensor<Td> p = uniform_tensor({5, 1}, rng, 0.05, 0.95);
  Tensor<Td> q = prod_one_minus(no_tape, p);
  REQUIRE(q.size() == 1);
  {
    // Sorted-order product, recomputed here.
    std::vector<double> v(p.value().data(), p.value().data() + p.size());
    std::sort(v.begin(), v.end());
    double want = 1;
    for (double pi : v) want *= 1 - pi;
    CHECK(q.item() == want);
  }

  // Bit-identical output under any permutation of the inputs.
  std::vector<double> vals(p.value().data(), p.value().data() + p.size());
  for (int t = 0; t < 20; ++t) {
    rng.shuffle(vals);
    Tensor<Td> pp = Tensor<Td>::from({5, 1}, vals);
    CHECK(prod_one_minus(no_tape, pp).item() == q.item());
  }

  check_grads([&](Tape<Td>* t) { return prod_one_minus(t, p); }, {&p});

  // A factor at exactly 1 zeroes the product but keeps every gradient finite:
  // d/dp_i = -prod_{j != i} (1 - p_j).
  Tensor<Td> z = Tensor<Td>::from({3}, std::vector<double>{0.3, 1.0, 0.6}, true);
  Tape<Td> tape;
  Tensor<Td> loss = prod_one_minus(&tape, z);
  CHECK(loss.item() == 0.0);
  tape.backward(loss);
  CHECK(z.grad()[0] == doctest::Approx(0.0));
  CHECK(z.grad()[1] == doctest::Approx(-(1 - 0.3) * (1 - 0.6)).epsilon(1e-14));
  CHECK(z.grad()[2] == doctest::Approx(0.0));
}

// ---------------------------------------------------------------------------
// Composite layers
// ---------------------------------------------------------------------------

TEST_CASE("conv-bn-relu layer passes gradient checks on every parameter") {
  Rng rng(118);
  ConvBnRelu<Td> layer;
  layer.init(2, 2, rng);
  Tensor<Td> x = uniform_tensor({1, 2, 2, 2, 2}, rng, -1, 1);
  auto build = [&](Tape<Td>* t) { return weighted_sum(t, layer.forward(t, x, true)); };
  check_grads(build, {&x, &layer.conv.w, &layer.conv.b, &layer.bn.gamma, &layer.bn.beta}, 1e-4);
}

TEST_CASE("residual unit and projection block pass gradient checks") {
  Rng rng(119);
  {
    ResidualUnit<Td> unit;
    unit.init(2, rng);
    Tensor<Td> x = uniform_tensor({1, 2, 2, 2, 2}, rng, -1, 1);
    auto build = [&](Tape<Td>* t) { return weighted_sum(t, unit.forward(t, x, true)); };
    check_grads(build,
                {&x, &unit.conv1.w, &unit.conv1.b, &unit.bn1.gamma, &unit.bn1.beta, &unit.conv2.w,
                 &unit.conv2.b, &unit.bn2.gamma, &unit.bn2.beta},
                1e-4);
  }
  {
    ResidualBlock<Td> block;
    block.init(2, 3, 1, rng);
    REQUIRE(block.has_proj);
    Tensor<Td> x = uniform_tensor({1, 2, 2, 2, 2}, rng, -1, 1);
    auto build = [&](Tape<Td>* t) { return weighted_sum(t, block.forward(t, x, true)); };
    check_grads(build, {&x, &block.proj.conv.w, &block.units[0].conv1.w, &block.units[0].bn2.beta},
                1e-4);
  }
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

namespace {

NNetConfig tiny_net_config() {
  NNetConfig c;
  c.pre_channels = 2;
  c.block_channels = {2, 3, 3, 3};
  c.units_per_block = 1;
  c.deconv_channels = 2;
  c.back3_channels = 2;
  c.feature_channels = 4;
  c.head_hidden = 2;
  c.n_anchors = 1;
  return c;
}

}  // namespace

TEST_CASE("backbone output/feature shapes and selected end-to-end gradients") {
  Rng rng(120);
  NNet<Td> net;
  net.init(tiny_net_config(), rng);

  const int S = 16, G = S / 4;
  Rng drng(121);
  Tensor<Td> x = uniform_tensor({1, 1, S, S, S}, drng, -1, 1);
  Tensor<Td> coords = uniform_tensor({1, 3, G, G, G}, drng, -1, 1);

  NNetOut<Td> out = net.forward(no_tape, x, coords, false);
  REQUIRE(out.out.shape() == std::vector<int>{1, 5, G, G, G});
  REQUIRE(out.feature.shape() == std::vector<int>{1, 4, G, G, G});
  // The bottleneck runs at S/16 per side, so the output grid scales with S.
  NNetOut<Td> out2 = net.forward(no_tape, Tensor<Td>::zeros({1, 1, 32, 32, 32}),
                                 Tensor<Td>::zeros({1, 3, 8, 8, 8}), false);
  REQUIRE(out2.out.shape() == std::vector<int>{1, 5, 8, 8, 8});

  // Every parameter name is unique; buffers track the BN layers only.
  auto params = net.named_params();
  auto buffers = net.named_buffers();
  std::vector<std::string> names;
  for (auto& p : params) names.push_back(p.name);
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
  CHECK(!buffers.empty());
  for (auto& b : buffers) CHECK(b.data->size() > 0);

  // Malformed inputs are rejected up front.
  CHECK_THROWS_AS(net.forward(no_tape, Tensor<Td>::zeros({1, 2, S, S, S}), coords, false),
                  std::logic_error);
  CHECK_THROWS_AS(net.forward(no_tape, Tensor<Td>::zeros({1, 1, 8, 8, 8}),
                              Tensor<Td>::zeros({1, 3, 2, 2, 2}), false),
                  std::logic_error);
  CHECK_THROWS_AS(net.forward(no_tape, x, Tensor<Td>::zeros({1, 3, G, G, 2}), false),
                  std::logic_error);

  // End-to-end gradients through the whole encoder/decoder for a spread of
  // parameters: head, skip-path block, deconv, and the very first conv. A
  // 32-side input keeps the bottleneck at 2^3 cells, where batch statistics
  // are still taken over several samples.
  Rng grng(124);
  Tensor<Td> gx = uniform_tensor({1, 1, 32, 32, 32}, grng, -1, 1, false);
  Tensor<Td> gcoords = uniform_tensor({1, 3, 8, 8, 8}, grng, -1, 1, false);
  auto build = [&](Tape<Td>* t) {
    NNetOut<Td> o = net.forward(t, gx, gcoords, true);
    return add(t, weighted_sum(t, o.out), weighted_sum(t, o.feature));
  };
  check_grads(build, {&net.head2.w, &net.head2.b, &net.deconv1.b, &net.back2.units[0].bn1.beta,
                      &net.pre1.conv.b, &net.blocks[3].units[0].bn2.gamma},
              1e-4);
}

// ---------------------------------------------------------------------------
// Tape and gradient bookkeeping
// ---------------------------------------------------------------------------

TEST_CASE("tape bookkeeping: error paths, unused branches, constants, determinism") {
  Tape<Td> empty;
  CHECK_THROWS_AS(empty.backward(Tensor<Td>::zeros({1})), std::logic_error);

  Rng rng(122);
  Tensor<Td> a = uniform_tensor({3}, rng, -1, 1);
  Tensor<Td> b = uniform_tensor({3}, rng, -1, 1);
  {
    Tape<Td> tape;
    Tensor<Td> vec = add(&tape, a, b);
    CHECK_THROWS_AS(tape.backward(vec), std::logic_error);
  }

  // An op recorded on a dead branch must not propagate gradients.
  {
    Tensor<Td> c = uniform_tensor({3}, rng, -1, 1);
    Tensor<Td> d = uniform_tensor({3}, rng, -1, 1);
    Tape<Td> tape;
    Tensor<Td> dead = mul(&tape, c, d);
    (void)dead;
    Tensor<Td> loss = sum(&tape, c);
    tape.backward(loss);
    CHECK(d.grad().size() == 0);
    REQUIRE(c.grad().size() == c.size());
    for (Eigen::Index i = 0; i < c.size(); ++i) CHECK(c.grad()[i] == 1.0);
  }

  // Constant inputs never get gradient storage.
  {
    Tensor<Td> p = uniform_tensor({4}, rng, -1, 1);
    Tensor<Td> w = uniform_tensor({4}, rng, -1, 1, false);
    Tape<Td> tape;
    tape.backward(sum(&tape, mul(&tape, p, w)));
    CHECK(w.grad().size() == 0);
    REQUIRE(p.grad().size() == p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) CHECK(p.grad()[i] == w.value()[i]);
  }

  // Identical graphs produce bit-identical gradients.
  {
    auto run = []() {
      Rng local(123);
      Tensor<Td> x = uniform_tensor({1, 2, 4, 4, 4}, local, -1, 1);
      Tensor<Td> w = uniform_tensor({2, 2, 3, 3, 3}, local, -0.5, 0.5);
      Tensor<Td> b = uniform_tensor({2}, local, -1, 1);
      Tape<Td> tape;
      tape.backward(weighted_sum(&tape, conv3d(&tape, x, w, b, 1)));
      return std::make_pair(ArrX<Td>(x.grad()), ArrX<Td>(w.grad()));
    };
    auto [gx1, gw1] = run();
    auto [gx2, gw2] = run();
    CHECK((gx1 == gx2).all());
    CHECK((gw1 == gw2).all());
  }

  // Tensor construction guards.
  CHECK_THROWS_AS(Tensor<Td>::zeros({2, 0}), std::logic_error);
  CHECK_THROWS_AS(Tensor<Td>::from({3}, std::vector<double>{1, 2}), std::logic_error);
  CHECK_THROWS_AS(Tensor<Td>::zeros({2}).item(), std::logic_error);
}

TEST_CASE("momentum descent and global gradient clipping behave as specified") {
  // One parameter, fixed gradient: velocity v = mu v + g, p -= lr v.
  Tensor<Td> p = Tensor<Td>::from({2}, std::vector<double>{1.0, -2.0}, true);
  Sgd<Td> opt({{"p", p}}, 0.1, 0.9);
  opt.zero_grad();
  p.grad() << 1.0, 2.0;
  opt.step();  // v = (1,2), p = (0.9, -2.2)
  CHECK(p.value()[0] == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(p.value()[1] == doctest::Approx(-2.2).epsilon(1e-14));
  opt.zero_grad();
  p.grad() << 1.0, 2.0;
  opt.step();  // v = (1.9, 3.8), p = (0.71, -2.58)
  CHECK(p.value()[0] == doctest::Approx(0.71).epsilon(1e-13));
  CHECK(p.value()[1] == doctest::Approx(-2.58).epsilon(1e-13));

  // Clipping rescales to exactly max_norm and returns the pre-clip norm.
  opt.zero_grad();
  p.grad() << 3.0, 4.0;
  const Td pre = opt.clip_global_norm(1.0);
  CHECK(pre == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(opt.grad_norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.grad()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(p.grad()[1] == doctest::Approx(0.8).epsilon(1e-12));

  // Below the threshold nothing changes.
  opt.zero_grad();
  p.grad() << 0.3, 0.4;
  CHECK(opt.clip_global_norm(1.0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(p.grad()[0] == 0.3);
  CHECK(p.grad()[1] == 0.4);
}
