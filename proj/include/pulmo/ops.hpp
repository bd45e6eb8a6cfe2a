#pragma once

// Differentiable operations over Tensor<T>. Every op:
//   * computes the forward value eagerly,
//   * when a tape is supplied and any input requires gradients, records one
//     backward closure that adds into the inputs' grad buffers,
//   * propagates requires_grad to its output.
// Backward closures skip work when the output never received a gradient
// (unused branches), and never allocate grads for constant inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "pulmo/tensor.hpp"

namespace pulmo {

namespace detail {

inline void check_same_shape(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
  if (a != b) throw std::logic_error(std::string(op) + ": shape mismatch");
}

struct Dims5 {
  int n, c, d, h, w;
  std::int64_t spatial() const { return std::int64_t(d) * h * w; }
  std::int64_t per_n() const { return std::int64_t(c) * spatial(); }
};

inline Dims5 as_ncdhw(const std::vector<int>& s, const char* op) {
  if (s.size() != 5) throw std::logic_error(std::string(op) + ": expected a rank-5 (N,C,D,H,W) tensor");
  return Dims5{s[0], s[1], s[2], s[3], s[4]};
}

template <class T>
inline T stable_softplus(T x) {
  // log(1 + e^x) without overflow for large |x|.
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  y.value() = a.value() + b.value();
  if (tracing(tape, {&a, &b})) {
    y.set_requires_grad(true);
    tape->record([ad = a.ptr(), bd = b.ptr(), yd = y.ptr()]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      if (ad->requires_grad) { ad->ensure_grad(); ad->grad += *g; }
      if (bd->requires_grad) { bd->ensure_grad(); bd->grad += *g; }
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = Tensor<T>::zeros(a.shape());
  y.value() = a.value() * b.value();
  if (tracing(tape, {&a, &b})) {
    y.set_requires_grad(true);
    tape->record([ad = a.ptr(), bd = b.ptr(), yd = y.ptr()]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      if (ad->requires_grad) { ad->ensure_grad(); ad->grad += *g * bd->value; }
      if (bd->requires_grad) { bd->ensure_grad(); bd->grad += *g * ad->value; }
    });
  }
  return y;
}

// y = scale * x + shift, elementwise with scalar coefficients.
template <class T>
Tensor<T> affine(Tape<T>* tape, const Tensor<T>& x, T scale, T shift) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  y.value() = x.value() * scale + shift;
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr(), scale]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      xd->grad += *g * scale;
    });
  }
  return y;
}

template <class T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  y.value() = x.value().max(T(0));
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr()]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      xd->grad += (xd->value > T(0)).template cast<T>() * *g;
    });
  }
  return y;
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (Eigen::Index i = 0; i < x.value().size(); ++i) {
    T v = x.value()[i];
    y.value()[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr()]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      xd->grad += *g * yd->value * (T(1) - yd->value);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and indexing
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::zeros({1});
  y.value()[0] = x.value().sum();
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr()]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      xd->grad += (*g)[0];
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> s = sum(tape, x);
  return affine(tape, s, T(1) / static_cast<T>(x.size()), T(0));
}

// y[i] = x[indices[i]] over the flat storage; backward scatter-adds.
template <class T>
Tensor<T> gather(Tape<T>* tape, const Tensor<T>& x, std::vector<std::int64_t> indices) {
  for (std::int64_t idx : indices)
    if (idx < 0 || idx >= x.size()) throw std::logic_error("gather: index out of range");
  auto idxp = std::make_shared<std::vector<std::int64_t>>(std::move(indices));
  Tensor<T> y = Tensor<T>::zeros({static_cast<int>(idxp->size())});
  for (std::size_t i = 0; i < idxp->size(); ++i)
    y.value()[static_cast<Eigen::Index>(i)] = x.value()[static_cast<Eigen::Index>((*idxp)[i])];
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr(), idxp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < idxp->size(); ++i)
        xd->grad[static_cast<Eigen::Index>((*idxp)[i])] += (*g)[static_cast<Eigen::Index>(i)];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Per-element binary cross-entropy on logits o against fixed targets p:
//   loss = softplus(o) - p*o        (== -p*log(sig(o)) - (1-p)*log(1-sig(o)))
// computed in the overflow-safe form; d(loss)/do = sigmoid(o) - p.
template <class T>
Tensor<T> bce_with_logits(Tape<T>* tape, const Tensor<T>& logits, std::vector<T> targets) {
  if (static_cast<std::int64_t>(targets.size()) != logits.size())
    throw std::logic_error("bce_with_logits: target count mismatch");
  auto tp = std::make_shared<std::vector<T>>(std::move(targets));
  Tensor<T> y = Tensor<T>::zeros(logits.shape());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    T o = logits.value()[i];
    y.value()[i] = detail::stable_softplus(o) - (*tp)[static_cast<std::size_t>(i)] * o;
  }
  if (tracing(tape, {&logits})) {
    y.set_requires_grad(true);
    tape->record([xd = logits.ptr(), yd = y.ptr(), tp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (Eigen::Index i = 0; i < xd->value.size(); ++i) {
        T o = xd->value[i];
        T s = o >= T(0) ? T(1) / (T(1) + std::exp(-o)) : std::exp(o) / (T(1) + std::exp(o));
        xd->grad[i] += (*g)[i] * (s - (*tp)[static_cast<std::size_t>(i)]);
      }
    });
  }
  return y;
}

// Per-element robust regression penalty on r = pred - target:
//   |r|   if |r| > 1
//   r^2   otherwise
template <class T>
Tensor<T> smooth_l1(Tape<T>* tape, const Tensor<T>& pred, std::vector<T> targets) {
  if (static_cast<std::int64_t>(targets.size()) != pred.size())
    throw std::logic_error("smooth_l1: target count mismatch");
  auto tp = std::make_shared<std::vector<T>>(std::move(targets));
  Tensor<T> y = Tensor<T>::zeros(pred.shape());
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    T r = pred.value()[i] - (*tp)[static_cast<std::size_t>(i)];
    y.value()[i] = std::abs(r) > T(1) ? std::abs(r) : r * r;
  }
  if (tracing(tape, {&pred})) {
    y.set_requires_grad(true);
    tape->record([xd = pred.ptr(), yd = y.ptr(), tp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (Eigen::Index i = 0; i < xd->value.size(); ++i) {
        T r = xd->value[i] - (*tp)[static_cast<std::size_t>(i)];
        T dr = std::abs(r) > T(1) ? (r > T(0) ? T(1) : T(-1)) : T(2) * r;
        xd->grad[i] += (*g)[i] * dr;
      }
    });
  }
  return y;
}

// Binary cross-entropy on a probability (not a logit), with the probability
// clamped to [eps, 1-eps] before the logs; gradient is zero in the clamped
// region.
template <class T>
Tensor<T> bce_on_prob(Tape<T>* tape, const Tensor<T>& p, T target, T eps) {
  if (p.size() != 1) throw std::logic_error("bce_on_prob: expected scalar probability");
  Tensor<T> y = Tensor<T>::zeros({1});
  T pc = std::min(std::max(p.value()[0], eps), T(1) - eps);
  y.value()[0] = -(target * std::log(pc) + (T(1) - target) * std::log(T(1) - pc));
  if (tracing(tape, {&p})) {
    y.set_requires_grad(true);
    tape->record([pd = p.ptr(), yd = y.ptr(), target, eps]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      T raw = pd->value[0];
      if (raw < eps || raw > T(1) - eps) return;  // clamp boundary: no gradient
      pd->ensure_grad();
      T pc = raw;
      pd->grad[0] += (*g)[0] * ((pc - target) / (pc * (T(1) - pc)));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dense layers and channel plumbing
// ---------------------------------------------------------------------------

// x: (N, Fin), w: (Fout, Fin), b: (Fout) -> (N, Fout)
template <class T>
Tensor<T> dense(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape().size() != 2) throw std::logic_error("dense: input must be rank-2");
  const int n = x.shape(0), fin = x.shape(1);
  if (w.shape().size() != 2 || w.shape(1) != fin) throw std::logic_error("dense: weight shape mismatch");
  const int fout = w.shape(0);
  if (b.size() != fout) throw std::logic_error("dense: bias shape mismatch");

  using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Tensor<T> y = Tensor<T>::zeros({n, fout});
  Eigen::Map<const MatR> X(x.data(), n, fin), W(w.data(), fout, fin);
  Eigen::Map<MatR> Y(y.data(), n, fout);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), fout);

  if (tracing(tape, {&x, &w, &b})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), wd = w.ptr(), bd = b.ptr(), yd = y.ptr(), n, fin, fout]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      Eigen::Map<const MatR> dY(g->data(), n, fout);
      if (wd->requires_grad) {
        wd->ensure_grad();
        Eigen::Map<const MatR> X(xd->value.data(), n, fin);
        Eigen::Map<MatR> dW(wd->grad.data(), fout, fin);
        dW.noalias() += dY.transpose() * X;
      }
      if (bd->requires_grad) {
        bd->ensure_grad();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bd->grad.data(), fout) += dY.colwise().sum().transpose();
      }
      if (xd->requires_grad) {
        xd->ensure_grad();
        Eigen::Map<const MatR> W(wd->value.data(), fout, fin);
        Eigen::Map<MatR> dX(xd->grad.data(), n, fin);
        dX.noalias() += dY * W;
      }
    });
  }
  return y;
}

// Concatenate rank-5 tensors along the channel axis.
template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::logic_error("concat_channels: no inputs");
  auto d0 = detail::as_ncdhw(parts[0].shape(), "concat_channels");
  int ctot = 0;
  for (const auto& p : parts) {
    auto d = detail::as_ncdhw(p.shape(), "concat_channels");
    if (d.n != d0.n || d.d != d0.d || d.h != d0.h || d.w != d0.w)
      throw std::logic_error("concat_channels: spatial/batch shape mismatch");
    ctot += d.c;
  }
  Tensor<T> y = Tensor<T>::zeros({d0.n, ctot, d0.d, d0.h, d0.w});
  const std::int64_t sp = d0.spatial();
  std::int64_t coff = 0;
  for (const auto& p : parts) {
    const int c = p.shape(1);
    for (int n = 0; n < d0.n; ++n)
      y.value().segment((std::int64_t(n) * ctot + coff) * sp, std::int64_t(c) * sp) =
          p.value().segment(std::int64_t(n) * c * sp, std::int64_t(c) * sp);
    coff += c;
  }
  bool any_grad = false;
  for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
  if (tape && any_grad) {
    y.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> srcs;
    for (const auto& p : parts) srcs.push_back(p.ptr());
    tape->record([srcs, yd = y.ptr(), d0, ctot, sp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      std::int64_t coff = 0;
      for (const auto& s : srcs) {
        const int c = s->shape[1];
        if (s->requires_grad) {
          s->ensure_grad();
          for (int n = 0; n < d0.n; ++n)
            s->grad.segment(std::int64_t(n) * c * sp, std::int64_t(c) * sp) +=
                g->segment((std::int64_t(n) * ctot + coff) * sp, std::int64_t(c) * sp);
        }
        coff += c;
      }
    });
  }
  return y;
}

// Channel slice [c0, c1) of a rank-5 tensor.
template <class T>
Tensor<T> slice_channels(Tape<T>* tape, const Tensor<T>& x, int c0, int c1) {
  auto d = detail::as_ncdhw(x.shape(), "slice_channels");
  if (c0 < 0 || c1 > d.c || c0 >= c1) throw std::logic_error("slice_channels: bad channel range");
  const int c = c1 - c0;
  const std::int64_t sp = d.spatial();
  Tensor<T> y = Tensor<T>::zeros({d.n, c, d.d, d.h, d.w});
  for (int n = 0; n < d.n; ++n)
    y.value().segment(std::int64_t(n) * c * sp, std::int64_t(c) * sp) =
        x.value().segment((std::int64_t(n) * d.c + c0) * sp, std::int64_t(c) * sp);
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr(), d, c0, c, sp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (int n = 0; n < d.n; ++n)
        xd->grad.segment((std::int64_t(n) * d.c + c0) * sp, std::int64_t(c) * sp) +=
            g->segment(std::int64_t(n) * c * sp, std::int64_t(c) * sp);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// 3-D convolution (im2col + GEMM, chunked over output z-slices)
// ---------------------------------------------------------------------------

namespace detail {

// Fills rows of a row-major (K x M) patch matrix for output slices
// [z0, z0+nz) of one batch element. K = Cin*k^3, M = nz*Ho*Wo. Stride 1 only.
template <class T>
void im2col_s1(const T* x, const Dims5& in, int k, int pad, int z0, int nz, int ho, int wo,
               Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& col) {
  const std::int64_t m = std::int64_t(nz) * ho * wo;
  col.setZero();
  for (int c = 0; c < in.c; ++c) {
    const T* xc = x + std::int64_t(c) * in.spatial();
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const std::int64_t row = ((std::int64_t(c) * k + kz) * k + ky) * k + kx;
          T* dst = col.data() + row * m;
          for (int zz = 0; zz < nz; ++zz) {
            const int iz = z0 + zz - pad + kz;
            if (iz < 0 || iz >= in.d) continue;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy - pad + ky;
              if (iy < 0 || iy >= in.h) continue;
              // valid out-x range for this kernel column
              int ox0 = std::max(0, pad - kx);
              int ox1 = std::min(wo, in.w + pad - kx);
              if (ox0 >= ox1) continue;
              const T* src = xc + (std::int64_t(iz) * in.h + iy) * in.w + (ox0 - pad + kx);
              std::copy(src, src + (ox1 - ox0), dst + (std::int64_t(zz) * ho + oy) * wo + ox0);
            }
          }
        }
  }
}

// Scatter-adds a row-major (K x M) patch-gradient matrix back into dx.
template <class T>
void col2im_s1(const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& col, const Dims5& in,
               int k, int pad, int z0, int nz, int ho, int wo, T* dx) {
  const std::int64_t m = std::int64_t(nz) * ho * wo;
  for (int c = 0; c < in.c; ++c) {
    T* xc = dx + std::int64_t(c) * in.spatial();
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const std::int64_t row = ((std::int64_t(c) * k + kz) * k + ky) * k + kx;
          const T* src0 = col.data() + row * m;
          for (int zz = 0; zz < nz; ++zz) {
            const int iz = z0 + zz - pad + kz;
            if (iz < 0 || iz >= in.d) continue;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy - pad + ky;
              if (iy < 0 || iy >= in.h) continue;
              int ox0 = std::max(0, pad - kx);
              int ox1 = std::min(wo, in.w + pad - kx);
              if (ox0 >= ox1) continue;
              T* dst = xc + (std::int64_t(iz) * in.h + iy) * in.w + (ox0 - pad + kx);
              const T* src = src0 + (std::int64_t(zz) * ho + oy) * wo + ox0;
              for (int i = 0; i < ox1 - ox0; ++i) dst[i] += src[i];
            }
          }
        }
  }
}

inline int conv_chunk_slices(std::int64_t kdim, std::int64_t slice_m, int dout) {
  // Cap the patch-matrix buffer near 64 MB of floats.
  const std::int64_t budget = 16'000'000;
  std::int64_t nz = budget / std::max<std::int64_t>(1, kdim * slice_m);
  return static_cast<int>(std::max<std::int64_t>(1, std::min<std::int64_t>(nz, dout)));
}

}  // namespace detail

// x: (N,Cin,D,H,W), w: (Cout,Cin,k,k,k), b: (Cout). Stride 1; `pad` voxels of
// zero padding on every side. A kernel-size-1 call skips patch extraction and
// multiplies the channel matrix directly.
template <class T>
Tensor<T> conv3d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad) {
  using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto in = detail::as_ncdhw(x.shape(), "conv3d");
  if (w.shape().size() != 5 || w.shape(1) != in.c || w.shape(2) != w.shape(3) || w.shape(3) != w.shape(4))
    throw std::logic_error("conv3d: weight shape mismatch");
  const int cout = w.shape(0), k = w.shape(2);
  if (b.size() != cout) throw std::logic_error("conv3d: bias shape mismatch");
  const int dout = in.d + 2 * pad - k + 1, hout = in.h + 2 * pad - k + 1, wout = in.w + 2 * pad - k + 1;
  if (dout <= 0 || hout <= 0 || wout <= 0) throw std::logic_error("conv3d: output collapses to zero size");

  Tensor<T> y = Tensor<T>::zeros({in.n, cout, dout, hout, wout});
  const std::int64_t kdim = std::int64_t(in.c) * k * k * k;
  const std::int64_t slice_m = std::int64_t(hout) * wout;
  const std::int64_t osp = std::int64_t(dout) * slice_m;
  Eigen::Map<const MatR> W(w.data(), cout, kdim);

  if (k == 1 && pad == 0) {
    for (int n = 0; n < in.n; ++n) {
      Eigen::Map<const MatR> X(x.data() + std::int64_t(n) * in.per_n(), in.c, in.spatial());
      Eigen::Map<MatR> Y(y.data() + std::int64_t(n) * cout * osp, cout, osp);
      Y.noalias() = W * X;
      Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.data(), cout);
    }
  } else {
    const int chunk = detail::conv_chunk_slices(kdim, slice_m, dout);
    MatR col(kdim, std::int64_t(chunk) * slice_m);
    for (int n = 0; n < in.n; ++n) {
      const T* xn = x.data() + std::int64_t(n) * in.per_n();
      for (int z0 = 0; z0 < dout; z0 += chunk) {
        const int nz = std::min(chunk, dout - z0);
        const std::int64_t m = std::int64_t(nz) * slice_m;
        detail::im2col_s1(xn, in, k, pad, z0, nz, hout, wout, col);
        for (int co = 0; co < cout; ++co) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> yrow(
              y.data() + (std::int64_t(n) * cout + co) * osp + std::int64_t(z0) * slice_m, m);
          yrow.noalias() = W.row(co) * col.leftCols(m);
          yrow.array() += b.value()[co];
        }
      }
    }
  }

  if (tracing(tape, {&x, &w, &b})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), wd = w.ptr(), bd = b.ptr(), yd = y.ptr(), in, cout, k, pad, dout, hout, wout,
                  kdim, slice_m, osp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      Eigen::Map<const MatR> W(wd->value.data(), cout, kdim);
      if (bd->requires_grad) {
        bd->ensure_grad();
        for (int n = 0; n < in.n; ++n)
          for (int co = 0; co < cout; ++co)
            bd->grad[co] += g->segment((std::int64_t(n) * cout + co) * osp, osp).sum();
      }
      if (wd->requires_grad) wd->ensure_grad();
      if (xd->requires_grad) xd->ensure_grad();

      if (k == 1 && pad == 0) {
        for (int n = 0; n < in.n; ++n) {
          Eigen::Map<const MatR> dY(g->data() + std::int64_t(n) * cout * osp, cout, osp);
          if (wd->requires_grad) {
            Eigen::Map<const MatR> X(xd->value.data() + std::int64_t(n) * in.per_n(), in.c, in.spatial());
            Eigen::Map<MatR> dW(wd->grad.data(), cout, kdim);
            dW.noalias() += dY * X.transpose();
          }
          if (xd->requires_grad) {
            Eigen::Map<MatR> dX(xd->grad.data() + std::int64_t(n) * in.per_n(), in.c, in.spatial());
            dX.noalias() += W.transpose() * dY;
          }
        }
        return;
      }

      const int chunk = detail::conv_chunk_slices(kdim, slice_m, dout);
      MatR col(kdim, std::int64_t(chunk) * slice_m);
      MatR dcol(kdim, std::int64_t(chunk) * slice_m);
      for (int n = 0; n < in.n; ++n) {
        const T* xn = xd->value.data() + std::int64_t(n) * in.per_n();
        for (int z0 = 0; z0 < dout; z0 += chunk) {
          const int nz = std::min(chunk, dout - z0);
          const std::int64_t m = std::int64_t(nz) * slice_m;
          MatR dY(cout, m);
          for (int co = 0; co < cout; ++co)
            dY.row(co) = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
                g->data() + (std::int64_t(n) * cout + co) * osp + std::int64_t(z0) * slice_m, m);
          if (wd->requires_grad) {
            detail::im2col_s1(xn, in, k, pad, z0, nz, hout, wout, col);
            Eigen::Map<MatR> dW(wd->grad.data(), cout, kdim);
            dW.noalias() += dY * col.leftCols(m).transpose();
          }
          if (xd->requires_grad) {
            dcol.leftCols(m).noalias() = W.transpose() * dY;
            detail::col2im_s1(dcol, in, k, pad, z0, nz, hout, wout,
                              xd->grad.data() + std::int64_t(n) * in.per_n());
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Transposed convolution with kernel == stride == f (disjoint upsampling)
// ---------------------------------------------------------------------------

// x: (N,Cin,D,H,W), w: (Cin,Cout,f,f,f), b: (Cout) -> (N,Cout,D*f,H*f,W*f).
// Each input voxel paints one disjoint f^3 output block, so the op is a
// single GEMM plus a scatter.
template <class T>
Tensor<T> deconv3d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int f) {
  using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto in = detail::as_ncdhw(x.shape(), "deconv3d");
  if (w.shape().size() != 5 || w.shape(0) != in.c || w.shape(2) != f || w.shape(3) != f || w.shape(4) != f)
    throw std::logic_error("deconv3d: weight shape mismatch");
  const int cout = w.shape(1);
  if (b.size() != cout) throw std::logic_error("deconv3d: bias shape mismatch");
  const int f3 = f * f * f;
  const std::int64_t isp = in.spatial();
  const int dout = in.d * f, hout = in.h * f, wout = in.w * f;
  Tensor<T> y = Tensor<T>::zeros({in.n, cout, dout, hout, wout});
  const std::int64_t osp = std::int64_t(dout) * hout * wout;

  // Weight viewed as (Cin) x (Cout*f3): row ci, column co*f3 + t.
  Eigen::Map<const MatR> W(w.data(), in.c, std::int64_t(cout) * f3);
  auto scatter = [&](const MatR& M, T* out, const T* bias) {
    // M: (Cout*f3) x isp
    for (int co = 0; co < cout; ++co)
      for (int t = 0; t < f3; ++t) {
        const int dz = t / (f * f), dy = (t / f) % f, dx = t % f;
        const T* src = M.data() + (std::int64_t(co) * f3 + t) * isp;
        T* oc = out + std::int64_t(co) * osp;
        for (int z = 0; z < in.d; ++z)
          for (int yy = 0; yy < in.h; ++yy) {
            T* dst = oc + (std::int64_t(z * f + dz) * hout + (yy * f + dy)) * wout + dx;
            const T* s = src + (std::int64_t(z) * in.h + yy) * in.w;
            for (int xx = 0; xx < in.w; ++xx) dst[std::int64_t(xx) * f] = s[xx] + (bias ? bias[co] : T(0));
          }
      }
  };

  MatR M(std::int64_t(cout) * f3, isp);
  for (int n = 0; n < in.n; ++n) {
    Eigen::Map<const MatR> X(x.data() + std::int64_t(n) * in.per_n(), in.c, isp);
    M.noalias() = W.transpose() * X;
    scatter(M, y.data() + std::int64_t(n) * cout * osp, b.data());
  }

  if (tracing(tape, {&x, &w, &b})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), wd = w.ptr(), bd = b.ptr(), yd = y.ptr(), in, cout, f, f3, isp, dout, hout,
                  wout, osp]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      // Re-gather dY into (Cout*f3) x isp layout, then two GEMMs.
      MatR dM(std::int64_t(cout) * f3, isp);
      if (bd->requires_grad) bd->ensure_grad();
      if (wd->requires_grad) wd->ensure_grad();
      if (xd->requires_grad) xd->ensure_grad();
      Eigen::Map<const MatR> W(wd->value.data(), in.c, std::int64_t(cout) * f3);
      for (int n = 0; n < in.n; ++n) {
        const T* gn = g->data() + std::int64_t(n) * cout * osp;
        for (int co = 0; co < cout; ++co) {
          const T* gc = gn + std::int64_t(co) * osp;
          if (bd->requires_grad)
            bd->grad[co] += Eigen::Map<const ArrX<T>>(gc, osp).sum();
          for (int t = 0; t < f3; ++t) {
            const int dz = t / (f * f), dy = (t / f) % f, dx = t % f;
            T* dst = dM.data() + (std::int64_t(co) * f3 + t) * isp;
            for (int z = 0; z < in.d; ++z)
              for (int yy = 0; yy < in.h; ++yy) {
                const T* s = gc + (std::int64_t(z * f + dz) * hout + (yy * f + dy)) * wout + dx;
                T* d = dst + (std::int64_t(z) * in.h + yy) * in.w;
                for (int xx = 0; xx < in.w; ++xx) d[xx] = s[std::int64_t(xx) * f];
              }
          }
        }
        if (wd->requires_grad) {
          Eigen::Map<const MatR> X(xd->value.data() + std::int64_t(n) * in.per_n(), in.c, isp);
          Eigen::Map<MatR> dW(wd->grad.data(), in.c, std::int64_t(cout) * f3);
          dW.noalias() += X * dM.transpose();
        }
        if (xd->requires_grad) {
          Eigen::Map<MatR> dX(xd->grad.data() + std::int64_t(n) * in.per_n(), in.c, isp);
          dX.noalias() += W * dM;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// 2x2x2 max pooling with stride 2; spatial dims must be even. Ties route the
// gradient to the first maximum in scan order, deterministically.
template <class T>
Tensor<T> maxpool3d(Tape<T>* tape, const Tensor<T>& x) {
  auto in = detail::as_ncdhw(x.shape(), "maxpool3d");
  if (in.d % 2 || in.h % 2 || in.w % 2) throw std::logic_error("maxpool3d: spatial dims must be even");
  const int dout = in.d / 2, hout = in.h / 2, wout = in.w / 2;
  Tensor<T> y = Tensor<T>::zeros({in.n, in.c, dout, hout, wout});
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(y.size()));
  std::int64_t oi = 0;
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c) {
      const T* xc = x.data() + (std::int64_t(n) * in.c + c) * in.spatial();
      const std::int64_t base = (std::int64_t(n) * in.c + c) * in.spatial();
      for (int z = 0; z < dout; ++z)
        for (int yy = 0; yy < hout; ++yy)
          for (int xx = 0; xx < wout; ++xx, ++oi) {
            T best = -std::numeric_limits<T>::infinity();
            std::int64_t besti = -1;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const std::int64_t ii =
                      (std::int64_t(2 * z + dz) * in.h + (2 * yy + dy)) * in.w + (2 * xx + dx);
                  if (xc[ii] > best) { best = xc[ii]; besti = ii; }
                }
            y.value()[oi] = best;
            (*arg)[static_cast<std::size_t>(oi)] = base + besti;
          }
    }
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr(), arg]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < arg->size(); ++i)
        xd->grad[static_cast<Eigen::Index>((*arg)[i])] += (*g)[static_cast<Eigen::Index>(i)];
    });
  }
  return y;
}

// Max over the central 2x2x2 spatial block of each (n, c) map -> (N, C).
// Spatial dims must be even so the central block is well defined.
template <class T>
Tensor<T> central_max_pool2(Tape<T>* tape, const Tensor<T>& x) {
  auto in = detail::as_ncdhw(x.shape(), "central_max_pool2");
  if (in.d % 2 || in.h % 2 || in.w % 2 || in.d < 2 || in.h < 2 || in.w < 2)
    throw std::logic_error("central_max_pool2: spatial dims must be even and >= 2");
  const int z0 = in.d / 2 - 1, y0 = in.h / 2 - 1, x0 = in.w / 2 - 1;
  Tensor<T> y = Tensor<T>::zeros({in.n, in.c});
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(y.size()));
  std::int64_t oi = 0;
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c, ++oi) {
      const std::int64_t base = (std::int64_t(n) * in.c + c) * in.spatial();
      const T* xc = x.data() + base;
      T best = -std::numeric_limits<T>::infinity();
      std::int64_t besti = -1;
      for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::int64_t ii = (std::int64_t(z0 + dz) * in.h + (y0 + dy)) * in.w + (x0 + dx);
            if (xc[ii] > best) { best = xc[ii]; besti = ii; }
          }
      y.value()[oi] = best;
      (*arg)[static_cast<std::size_t>(oi)] = base + besti;
    }
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr(), arg]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t i = 0; i < arg->size(); ++i)
        xd->grad[static_cast<Eigen::Index>((*arg)[i])] += (*g)[static_cast<Eigen::Index>(i)];
    });
  }
  return y;
}

// Column-wise max of a rank-2 tensor: (N, F) -> (1, F). First maximum wins.
template <class T>
Tensor<T> colwise_max(Tape<T>* tape, const Tensor<T>& x) {
  if (x.shape().size() != 2) throw std::logic_error("colwise_max: input must be rank-2");
  const int n = x.shape(0), f = x.shape(1);
  Tensor<T> y = Tensor<T>::zeros({1, f});
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(f));
  for (int j = 0; j < f; ++j) {
    T best = -std::numeric_limits<T>::infinity();
    std::int64_t besti = -1;
    for (int i = 0; i < n; ++i) {
      T v = x.value()[std::int64_t(i) * f + j];
      if (v > best) { best = v; besti = std::int64_t(i) * f + j; }
    }
    y.value()[j] = best;
    (*arg)[static_cast<std::size_t>(j)] = besti;
  }
  if (tracing(tape, {&x})) {
    y.set_requires_grad(true);
    tape->record([xd = x.ptr(), yd = y.ptr(), arg]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      xd->ensure_grad();
      for (std::size_t j = 0; j < arg->size(); ++j)
        xd->grad[static_cast<Eigen::Index>((*arg)[j])] += (*g)[static_cast<Eigen::Index>(j)];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization (per channel of a rank-5 tensor)
// ---------------------------------------------------------------------------

// When use_batch_stats: normalizes by the biased batch statistics and, as a
// side effect, updates running stats in place:
//   running = (1 - momentum) * running + momentum * batch.
// Otherwise normalizes by the running statistics (inference / pinned mode),
// which are constants as far as the gradient is concerned. The forward output
// is a pure function of the inputs either way.
template <class T>
Tensor<T> batchnorm3d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      ArrX<T>& running_mean, ArrX<T>& running_var, bool use_batch_stats, T momentum, T eps) {
  auto in = detail::as_ncdhw(x.shape(), "batchnorm3d");
  if (gamma.size() != in.c || beta.size() != in.c || running_mean.size() != in.c || running_var.size() != in.c)
    throw std::logic_error("batchnorm3d: channel count mismatch");
  const std::int64_t sp = in.spatial();
  const std::int64_t m = std::int64_t(in.n) * sp;

  ArrX<T> mu(in.c), var(in.c);
  if (use_batch_stats) {
    for (int c = 0; c < in.c; ++c) {
      T s = 0, s2 = 0;
      for (int n = 0; n < in.n; ++n) {
        auto seg = x.value().segment((std::int64_t(n) * in.c + c) * sp, sp);
        s += seg.sum();
        s2 += seg.square().sum();
      }
      mu[c] = s / static_cast<T>(m);
      var[c] = std::max(s2 / static_cast<T>(m) - mu[c] * mu[c], T(0));
    }
    running_mean = (T(1) - momentum) * running_mean + momentum * mu;
    running_var = (T(1) - momentum) * running_var + momentum * var;
  } else {
    mu = running_mean;
    var = running_var;
  }
  ArrX<T> inv = (var + eps).sqrt().inverse();

  Tensor<T> y = Tensor<T>::zeros(x.shape());
  for (int n = 0; n < in.n; ++n)
    for (int c = 0; c < in.c; ++c) {
      auto xs = x.value().segment((std::int64_t(n) * in.c + c) * sp, sp);
      y.value().segment((std::int64_t(n) * in.c + c) * sp, sp) =
          (xs - mu[c]) * inv[c] * gamma.value()[c] + beta.value()[c];
    }

  if (tracing(tape, {&x, &gamma, &beta})) {
    y.set_requires_grad(true);
    auto mup = std::make_shared<ArrX<T>>(std::move(mu));
    auto invp = std::make_shared<ArrX<T>>(std::move(inv));
    tape->record([xd = x.ptr(), gd = gamma.ptr(), bd = beta.ptr(), yd = y.ptr(), in, sp, m, mup, invp,
                  use_batch_stats]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      if (gd->requires_grad) gd->ensure_grad();
      if (bd->requires_grad) bd->ensure_grad();
      if (xd->requires_grad) xd->ensure_grad();
      for (int c = 0; c < in.c; ++c) {
        // Per-channel sums over all batch elements.
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int n = 0; n < in.n; ++n) {
          auto dys = g->segment((std::int64_t(n) * in.c + c) * sp, sp);
          auto xs = xd->value.segment((std::int64_t(n) * in.c + c) * sp, sp);
          sum_dy += dys.sum();
          sum_dy_xhat += (dys * (xs - (*mup)[c]) * (*invp)[c]).sum();
        }
        if (bd->requires_grad) bd->grad[c] += sum_dy;
        if (gd->requires_grad) gd->grad[c] += sum_dy_xhat;
        if (xd->requires_grad) {
          const T ginv = gd->value[c] * (*invp)[c];
          for (int n = 0; n < in.n; ++n) {
            auto dys = g->segment((std::int64_t(n) * in.c + c) * sp, sp);
            auto xs = xd->value.segment((std::int64_t(n) * in.c + c) * sp, sp);
            auto dxs = xd->grad.segment((std::int64_t(n) * in.c + c) * sp, sp);
            if (use_batch_stats) {
              // dx = (gamma*inv) * (dy - mean(dy) - xhat * mean(dy*xhat))
              dxs += ginv * (dys - sum_dy / static_cast<T>(m) -
                             (xs - (*mup)[c]) * (*invp)[c] * (sum_dy_xhat / static_cast<T>(m)));
            } else {
              dxs += ginv * dys;
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Product pooling for multiple-instance probabilities
// ---------------------------------------------------------------------------

// q = prod_i (1 - p_i), multiplied in ascending order of p value so the result
// is bit-identical under any permutation of the inputs. Backward uses
// prefix/suffix products in the same sorted order (leave-one-out), which keeps
// gradients finite even when some factor is exactly zero.
template <class T>
Tensor<T> prod_one_minus(Tape<T>* tape, const Tensor<T>& p) {
  const std::int64_t n = p.size();
  if (n == 0) throw std::logic_error("prod_one_minus: empty input");
  auto order = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  std::iota(order->begin(), order->end(), std::int64_t(0));
  std::sort(order->begin(), order->end(), [&](std::int64_t a, std::int64_t b) {
    T va = p.value()[a], vb = p.value()[b];
    return va != vb ? va < vb : a < b;
  });
  Tensor<T> y = Tensor<T>::zeros({1});
  T q = 1;
  for (std::int64_t i = 0; i < n; ++i) q *= (T(1) - p.value()[(*order)[static_cast<std::size_t>(i)]]);
  y.value()[0] = q;
  if (tracing(tape, {&p})) {
    y.set_requires_grad(true);
    tape->record([pd = p.ptr(), yd = y.ptr(), order, n]() {
      const auto* g = out_grad(yd);
      if (!g) return;
      pd->ensure_grad();
      std::vector<T> pre(static_cast<std::size_t>(n) + 1, T(1)), suf(static_cast<std::size_t>(n) + 1, T(1));
      for (std::int64_t i = 0; i < n; ++i)
        pre[static_cast<std::size_t>(i) + 1] =
            pre[static_cast<std::size_t>(i)] * (T(1) - pd->value[(*order)[static_cast<std::size_t>(i)]]);
      for (std::int64_t i = n - 1; i >= 0; --i)
        suf[static_cast<std::size_t>(i)] =
            suf[static_cast<std::size_t>(i) + 1] * (T(1) - pd->value[(*order)[static_cast<std::size_t>(i)]]);
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t j = (*order)[static_cast<std::size_t>(i)];
        pd->grad[j] += (*g)[0] * (-pre[static_cast<std::size_t>(i)] * suf[static_cast<std::size_t>(i) + 1]);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

// Central differences with step h on every coordinate of `param`, compared to
// the analytic gradient already stored after backward. The comparison passes
// when |a - n| <= tol * max(|a|, |n|, floor) for every coordinate.
template <class T, class LossFn>
bool gradcheck_param(LossFn&& loss_of, Tensor<T>& param, const ArrX<T>& analytic, T h, T tol, T floor,
                     std::string* report = nullptr) {
  bool ok = true;
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const T keep = param.value()[i];
    param.value()[i] = keep + h;
    const T lp = loss_of();
    param.value()[i] = keep - h;
    const T lm = loss_of();
    param.value()[i] = keep;
    const T num = (lp - lm) / (2 * h);
    const T ana = analytic[i];
    const T err = std::abs(ana - num);
    const T bound = tol * std::max({std::abs(ana), std::abs(num), floor});
    if (!(err <= bound)) {
      ok = false;
      if (report) {
        *report += "coord " + std::to_string(i) + ": analytic " + std::to_string(ana) + " numeric " +
                   std::to_string(num) + " err " + std::to_string(err) + " bound " + std::to_string(bound) + "\n";
      }
    }
  }
  return ok;
}

}  // namespace pulmo
