#pragma once

// Parameterized layers over the op set: value-semantics structs holding their
// weight tensors, with seeded He initialization and named parameter / buffer
// enumeration for the optimizer and checkpoints.

#include <string>
#include <utility>
#include <vector>

#include "pulmo/ops.hpp"
#include "pulmo/rng.hpp"

namespace pulmo {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Non-learned state that still belongs in a checkpoint (running statistics).
template <class T>
struct NamedBuffer {
  std::string name;
  ArrX<T>* data;
};

template <class T>
inline void he_init(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.value()[i] = static_cast<T>(rng.normal() * sd);
}

template <class T>
struct Conv3dLayer {
  int cin = 0, cout = 0, k = 3, pad = 1;
  Tensor<T> w, b;

  void init(int cin_, int cout_, int k_, int pad_, Rng& rng) {
    cin = cin_; cout = cout_; k = k_; pad = pad_;
    w = Tensor<T>::zeros({cout, cin, k, k, k}, true);
    b = Tensor<T>::zeros({cout}, true);
    he_init(w, std::int64_t(cin) * k * k * k, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const { return conv3d(tape, x, w, b, pad); }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    out.push_back({p + ".w", w});
    out.push_back({p + ".b", b});
  }
};

template <class T>
struct Deconv3dLayer {
  int cin = 0, cout = 0, f = 2;
  Tensor<T> w, b;

  void init(int cin_, int cout_, int f_, Rng& rng) {
    cin = cin_; cout = cout_; f = f_;
    w = Tensor<T>::zeros({cin, cout, f, f, f}, true);
    b = Tensor<T>::zeros({cout}, true);
    he_init(w, cin, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const { return deconv3d(tape, x, w, b, f); }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    out.push_back({p + ".w", w});
    out.push_back({p + ".b", b});
  }
};

template <class T>
struct BatchNorm3dLayer {
  int c = 0;
  T momentum = T(0.1), eps = T(1e-5);
  Tensor<T> gamma, beta;
  ArrX<T> running_mean, running_var;

  void init(int c_, Rng&) {
    c = c_;
    gamma = Tensor<T>::zeros({c}, true);
    gamma.value().setConstant(T(1));
    beta = Tensor<T>::zeros({c}, true);
    running_mean = ArrX<T>::Zero(c);
    running_var = ArrX<T>::Constant(c, T(1));
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool use_batch_stats) {
    return batchnorm3d(tape, x, gamma, beta, running_mean, running_var, use_batch_stats, momentum, eps);
  }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    out.push_back({p + ".gamma", gamma});
    out.push_back({p + ".beta", beta});
  }
  void buffers(const std::string& p, std::vector<NamedBuffer<T>>& out) {
    out.push_back({p + ".running_mean", &running_mean});
    out.push_back({p + ".running_var", &running_var});
  }
};

template <class T>
struct DenseLayer {
  int fin = 0, fout = 0;
  Tensor<T> w, b;

  void init(int fin_, int fout_, Rng& rng) {
    fin = fin_; fout = fout_;
    w = Tensor<T>::zeros({fout, fin}, true);
    b = Tensor<T>::zeros({fout}, true);
    he_init(w, fin, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const { return dense(tape, x, w, b); }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    out.push_back({p + ".w", w});
    out.push_back({p + ".b", b});
  }
};

// conv(3x3x3) -> BN -> ReLU
template <class T>
struct ConvBnRelu {
  Conv3dLayer<T> conv;
  BatchNorm3dLayer<T> bn;

  void init(int cin, int cout, Rng& rng) {
    conv.init(cin, cout, 3, 1, rng);
    bn.init(cout, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool batch_stats) {
    return relu(tape, bn.forward(tape, conv.forward(tape, x), batch_stats));
  }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    conv.params(p + ".conv", out);
    bn.params(p + ".bn", out);
  }
  void buffers(const std::string& p, std::vector<NamedBuffer<T>>& out) { bn.buffers(p + ".bn", out); }
};

// Identity-shortcut residual unit: x + BN(conv(ReLU(BN(conv(x))))), then ReLU.
// Channel count is preserved.
template <class T>
struct ResidualUnit {
  Conv3dLayer<T> conv1, conv2;
  BatchNorm3dLayer<T> bn1, bn2;

  void init(int c, Rng& rng) {
    conv1.init(c, c, 3, 1, rng);
    bn1.init(c, rng);
    conv2.init(c, c, 3, 1, rng);
    bn2.init(c, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool batch_stats) {
    Tensor<T> h = relu(tape, bn1.forward(tape, conv1.forward(tape, x), batch_stats));
    h = bn2.forward(tape, conv2.forward(tape, h), batch_stats);
    return relu(tape, add(tape, x, h));
  }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    conv1.params(p + ".conv1", out);
    bn1.params(p + ".bn1", out);
    conv2.params(p + ".conv2", out);
    bn2.params(p + ".bn2", out);
  }
  void buffers(const std::string& p, std::vector<NamedBuffer<T>>& out) {
    bn1.buffers(p + ".bn1", out);
    bn2.buffers(p + ".bn2", out);
  }
};

// Residual block: when the channel count changes, a conv-BN-ReLU entry
// projection maps cin -> cout first; identity-shortcut units follow.
template <class T>
struct ResidualBlock {
  bool has_proj = false;
  ConvBnRelu<T> proj;
  std::vector<ResidualUnit<T>> units;

  void init(int cin, int cout, int n_units, Rng& rng) {
    has_proj = (cin != cout);
    if (has_proj) proj.init(cin, cout, rng);
    units.resize(static_cast<std::size_t>(n_units));
    for (auto& u : units) u.init(cout, rng);
  }
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool batch_stats) {
    Tensor<T> h = has_proj ? proj.forward(tape, x, batch_stats) : x;
    for (auto& u : units) h = u.forward(tape, h, batch_stats);
    return h;
  }
  void params(const std::string& p, std::vector<NamedParam<T>>& out) {
    if (has_proj) proj.params(p + ".proj", out);
    for (std::size_t i = 0; i < units.size(); ++i) units[i].params(p + ".unit" + std::to_string(i), out);
  }
  void buffers(const std::string& p, std::vector<NamedBuffer<T>>& out) {
    if (has_proj) proj.buffers(p + ".proj", out);
    for (std::size_t i = 0; i < units.size(); ++i) units[i].buffers(p + ".unit" + std::to_string(i), out);
  }
};

}  // namespace pulmo
