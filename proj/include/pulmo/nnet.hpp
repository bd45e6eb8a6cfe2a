#pragma once

// Encoder/decoder detection backbone over 3-D patches.
//
//   input (N,1,S,S,S)
//     preBlock: 2 x [conv3 BN ReLU]                                 stride 1
//     4 x [2^3 maxpool -> residual block]                           strides 2..16
//     deconv x2, concat with the stride-8 skip, residual block      stride 8
//     deconv x2, concat with the stride-4 skip + 3 location
//       channels, residual block -> classifier feature map         stride 4
//     head: 1x1x1 conv -> ReLU -> 1x1x1 conv -> anchors*5 maps
//
// Every output grid cell carries, per anchor scale, (logit, dz, dy, dx, dr)
// in that channel order. The feature map before the head is what the case
// classifier reads.

#include <array>
#include <string>
#include <vector>

#include "pulmo/layers.hpp"

namespace pulmo {

struct NNetConfig {
  int pre_channels = 24;
  std::array<int, 4> block_channels{32, 64, 64, 64};
  int units_per_block = 2;
  int deconv_channels = 64;
  int back3_channels = 64;
  int feature_channels = 128;
  int head_hidden = 64;
  int n_anchors = 3;

  bool operator==(const NNetConfig&) const = default;
};

template <class T>
struct NNetOut {
  Tensor<T> out;      // (N, n_anchors*5, S/4, S/4, S/4)
  Tensor<T> feature;  // (N, feature_channels, S/4, S/4, S/4)
};

template <class T>
class NNet {
 public:
  NNetConfig cfg;
  bool bn_frozen = false;  // when set, forward always uses running stats

  ConvBnRelu<T> pre1, pre2;
  std::array<ResidualBlock<T>, 4> blocks;
  Deconv3dLayer<T> deconv1, deconv2;
  ResidualBlock<T> back3, back2;
  Conv3dLayer<T> head1, head2;

  void init(const NNetConfig& c, Rng& rng) {
    cfg = c;
    pre1.init(1, c.pre_channels, rng);
    pre2.init(c.pre_channels, c.pre_channels, rng);
    int prev = c.pre_channels;
    for (int i = 0; i < 4; ++i) {
      blocks[static_cast<std::size_t>(i)].init(prev, c.block_channels[static_cast<std::size_t>(i)],
                                               c.units_per_block, rng);
      prev = c.block_channels[static_cast<std::size_t>(i)];
    }
    deconv1.init(c.block_channels[3], c.deconv_channels, 2, rng);
    back3.init(c.deconv_channels + c.block_channels[2], c.back3_channels, c.units_per_block, rng);
    deconv2.init(c.back3_channels, c.deconv_channels, 2, rng);
    back2.init(c.deconv_channels + c.block_channels[1] + 3, c.feature_channels, c.units_per_block, rng);
    head1.init(c.feature_channels, c.head_hidden, 1, 0, rng);
    head2.init(c.head_hidden, c.n_anchors * 5, 1, 0, rng);
  }

  // x: (N,1,S,S,S) with S % 16 == 0; coords: (N,3,S/4,S/4,S/4) location
  // channels aligned with the output grid. `training` selects batch-statistic
  // normalization unless bn_frozen pins the running statistics.
  NNetOut<T> forward(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& coords, bool training) {
    const bool bs = training && !bn_frozen;
    if (x.shape().size() != 5 || x.shape(1) != 1) throw std::logic_error("nnet: input must be (N,1,S,S,S)");
    const int s = x.shape(2);
    if (x.shape(3) != s || x.shape(4) != s || s % 16 != 0)
      throw std::logic_error("nnet: patch must be cubic with side divisible by 16");
    if (coords.shape() != std::vector<int>{x.shape(0), 3, s / 4, s / 4, s / 4})
      throw std::logic_error("nnet: location channels must be (N,3,S/4,S/4,S/4)");

    Tensor<T> h = pre2.forward(tape, pre1.forward(tape, x, bs), bs);
    Tensor<T> f1 = blocks[0].forward(tape, maxpool3d(tape, h), bs);
    Tensor<T> f2 = blocks[1].forward(tape, maxpool3d(tape, f1), bs);
    Tensor<T> f3 = blocks[2].forward(tape, maxpool3d(tape, f2), bs);
    Tensor<T> f4 = blocks[3].forward(tape, maxpool3d(tape, f3), bs);

    Tensor<T> up3 = deconv1.forward(tape, f4);
    Tensor<T> c3 = back3.forward(tape, concat_channels(tape, {up3, f3}), bs);
    Tensor<T> up2 = deconv2.forward(tape, c3);
    Tensor<T> feat = back2.forward(tape, concat_channels(tape, {up2, f2, coords}), bs);

    Tensor<T> head = relu(tape, head1.forward(tape, feat));
    Tensor<T> out = head2.forward(tape, head);
    return {out, feat};
  }

  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    pre1.params("pre1", out);
    pre2.params("pre2", out);
    for (int i = 0; i < 4; ++i) blocks[static_cast<std::size_t>(i)].params("block" + std::to_string(i + 1), out);
    deconv1.params("deconv1", out);
    back3.params("back3", out);
    deconv2.params("deconv2", out);
    back2.params("back2", out);
    head1.params("head1", out);
    head2.params("head2", out);
    return out;
  }

  std::vector<NamedBuffer<T>> named_buffers() {
    std::vector<NamedBuffer<T>> out;
    pre1.buffers("pre1", out);
    pre2.buffers("pre2", out);
    for (int i = 0; i < 4; ++i) blocks[static_cast<std::size_t>(i)].buffers("block" + std::to_string(i + 1), out);
    back3.buffers("back3", out);
    back2.buffers("back2", out);
    return out;
  }
};

}  // namespace pulmo
