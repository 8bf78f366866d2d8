#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chainpred/tensor.hpp"

namespace chainpred {

// Named parameter collection. `trainable` feeds the optimizer in registration
// order; `state` carries batch-norm running statistics. Both go into
// checkpoints.
struct ParamRegistry {
  std::vector<std::pair<std::string, TensorPtr>> trainable;
  std::vector<std::pair<std::string, TensorPtr>> state;

  void add(const std::string& name, const TensorPtr& t) {
    trainable.emplace_back(name, t);
  }
  void add_state(const std::string& name, const TensorPtr& t) {
    state.emplace_back(name, t);
  }

  std::vector<TensorPtr> trainable_tensors() const {
    std::vector<TensorPtr> out;
    out.reserve(trainable.size());
    for (auto& [n, t] : trainable) out.push_back(t);
    return out;
  }
};

struct NetConfig {
  std::vector<int> encoder_channels{6, 12, 12, 16, 16, 16};
  int encoder_pools = 4;  // pooling on the first N layers; stride 2 each
  std::vector<int> deception_kernels{2, 4, 6};
  int deception_branch_channels = 4;
  bool single_deconv = false;  // ablation: one plain deconv branch
  int feedback_channels = 8;

  int effective_stride() const { return 1 << encoder_pools; }
  int hidden_channels() const { return encoder_channels.back(); }
  // Decoder upsamples x4 (two factor-2 blocks), encoder downsamples x16,
  // so the heatmap sits at stride 4 relative to the image.
  int heatmap_stride() const { return effective_stride() / 4; }
};

// conv -> ReLU -> BN, the Fig.-3-style layer. ReLU/BN optional for raw
// score heads.
struct ConvBlock {
  TensorPtr w, b, gamma, beta;
  BatchNormState bn;
  int stride = 1, pad = 1;
  bool relu_bn = true;

  void init(int cin, int cout, int k, Rng& rng, int stride_ = 1,
            bool relu_bn_ = true) {
    w = tensor({cout, cin, k, k}, true);
    b = tensor({cout}, true);
    gamma = tensor({cout}, std::vector<double>(static_cast<std::size_t>(cout), 1.0), true);
    beta = tensor({cout}, true);
    bn = BatchNormState(cout);
    stride = stride_;
    pad = (k - 1) / 2;
    relu_bn = relu_bn_;
    fill_normal(*w, rng);
  }

  TensorPtr forward(Graph& g, const TensorPtr& x, Mode mode) {
    auto y = conv2d(g, x, w, b, stride, pad);
    if (!relu_bn) return y;
    return batchnorm(g, relu(g, y), gamma, beta, bn, mode);
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", w);
    reg.add(prefix + ".bias", b);
    if (relu_bn) {
      reg.add(prefix + ".gamma", gamma);
      reg.add(prefix + ".beta", beta);
      reg.add_state(prefix + ".running_mean", bn.running_mean);
      reg.add_state(prefix + ".running_var", bn.running_var);
    }
  }
};

// deconv -> ReLU -> BN branch of a deception block; upsamples x2.
struct DeconvBlock {
  TensorPtr w, b, gamma, beta;
  BatchNormState bn;
  int stride = 2, pad = 0;

  void init(int cin, int cout, int k, Rng& rng) {
    if (k % 2 != 0)
      throw ShapeError("deception branch kernel must be even for exact x2");
    w = tensor({cin, cout, k, k}, true);
    b = tensor({cout}, true);
    gamma = tensor({cout}, std::vector<double>(static_cast<std::size_t>(cout), 1.0), true);
    beta = tensor({cout}, true);
    bn = BatchNormState(cout);
    pad = (k - 2) / 2;  // (H-1)*2 - 2*pad + k == 2H
    fill_normal(*w, rng);
  }

  TensorPtr forward(Graph& g, const TensorPtr& x, Mode mode) {
    auto y = deconv2d(g, x, w, b, stride, pad);
    return batchnorm(g, relu(g, y), gamma, beta, bn, mode);
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", w);
    reg.add(prefix + ".bias", b);
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
    reg.add_state(prefix + ".running_mean", bn.running_mean);
    reg.add_state(prefix + ".running_var", bn.running_var);
  }
};

// Shallow encoder: six conv layers, max pooling on the first four, effective
// stride 16.
struct Encoder {
  std::vector<ConvBlock> layers;
  int pools = 4;
  int in_channels = 1;

  void init(const NetConfig& cfg, Rng& rng, int in_channels_ = 1) {
    pools = cfg.encoder_pools;
    in_channels = in_channels_;
    layers.clear();
    int cin = in_channels;
    for (int c : cfg.encoder_channels) {
      ConvBlock blk;
      blk.init(cin, c, 3, rng);
      layers.push_back(std::move(blk));
      cin = c;
    }
  }

  TensorPtr forward(Graph& g, const TensorPtr& image, Mode mode) {
    int stride = 1 << pools;
    if (image->dim(2) % stride != 0 || image->dim(3) % stride != 0)
      throw ShapeError("encoder: input dims not divisible by effective stride");
    TensorPtr x = image;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].forward(g, x, mode);
      if (static_cast<int>(i) < pools) x = maxpool2(g, x);
    }
    return x;
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].register_into(reg, prefix + ".conv" + std::to_string(i));
  }
};

// Multi-scale deconvolutional block: parallel branches with different kernel
// sizes, each upsampling x2, channel-concatenated.
struct DeceptionBlock {
  std::vector<DeconvBlock> branches;

  void init(int cin, const NetConfig& cfg, Rng& rng) {
    branches.clear();
    if (cfg.single_deconv) {
      DeconvBlock blk;
      blk.init(cin, cfg.deception_branch_channels *
                        static_cast<int>(cfg.deception_kernels.size()),
               4, rng);
      branches.push_back(std::move(blk));
    } else {
      for (int k : cfg.deception_kernels) {
        DeconvBlock blk;
        blk.init(cin, cfg.deception_branch_channels, k, rng);
        branches.push_back(std::move(blk));
      }
    }
  }

  int out_channels() const {
    int c = 0;
    for (auto& br : branches) c += br.w->dim(1);
    return c;
  }

  TensorPtr forward(Graph& g, const TensorPtr& x, Mode mode) {
    std::vector<TensorPtr> outs;
    outs.reserve(branches.size());
    for (auto& br : branches) outs.push_back(br.forward(g, x, mode));
    if (outs.size() == 1) return outs[0];
    return concat_channels(g, outs);
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    for (std::size_t i = 0; i < branches.size(); ++i)
      branches[i].register_into(reg, prefix + ".b" + std::to_string(i));
  }
};

// Hidden state -> single-joint score map: two deception blocks (x4 total)
// plus a 1-channel projection. Scores are raw; the caller applies softmax.
struct Decoder {
  DeceptionBlock up1, up2;
  ConvBlock proj;

  void init(int cin, const NetConfig& cfg, Rng& rng) {
    up1.init(cin, cfg, rng);
    up2.init(up1.out_channels(), cfg, rng);
    proj.init(up2.out_channels(), 1, 3, rng, 1, /*relu_bn=*/false);
  }

  TensorPtr forward(Graph& g, const TensorPtr& hidden, Mode mode) {
    auto x = up1.forward(g, hidden, mode);
    x = up2.forward(g, x, mode);
    return proj.forward(g, x, mode);
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    up1.register_into(reg, prefix + ".up1");
    up2.register_into(reg, prefix + ".up2");
    proj.register_into(reg, prefix + ".proj");
  }
};

// Decoder with a shared deception trunk and one projection head per joint
// (video task).
struct MultiHeadDecoder {
  DeceptionBlock up1, up2;
  std::vector<ConvBlock> heads;

  void init(int cin, int joints, const NetConfig& cfg, Rng& rng) {
    up1.init(cin, cfg, rng);
    up2.init(up1.out_channels(), cfg, rng);
    heads.resize(static_cast<std::size_t>(joints));
    for (auto& h : heads)
      h.init(up2.out_channels(), 1, 3, rng, 1, /*relu_bn=*/false);
  }

  std::vector<TensorPtr> forward(Graph& g, const TensorPtr& hidden, Mode mode) {
    auto x = up1.forward(g, hidden, mode);
    x = up2.forward(g, x, mode);
    std::vector<TensorPtr> outs;
    outs.reserve(heads.size());
    for (auto& h : heads) outs.push_back(h.forward(g, x, mode));
    return outs;
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    up1.register_into(reg, prefix + ".up1");
    up2.register_into(reg, prefix + ".up2");
    for (std::size_t i = 0; i < heads.size(); ++i)
      heads[i].register_into(reg, prefix + ".head" + std::to_string(i));
  }
};

// e(.): embeds previous-output heatmaps (or disk encodings) at hidden-state
// resolution. Average-pools the heatmap down x4 first.
struct FeedbackEncoder {
  ConvBlock c1, c2;
  int pool = 4;

  void init(int in_channels, int hidden_channels, const NetConfig& cfg,
            Rng& rng) {
    pool = 4;
    c1.init(in_channels, cfg.feedback_channels, 3, rng);
    c2.init(cfg.feedback_channels, hidden_channels, 3, rng);
  }

  TensorPtr forward(Graph& g, const TensorPtr& heatmap, Mode mode) {
    auto x = avgpool(g, heatmap, pool);
    x = c1.forward(g, x, mode);
    return c2.forward(g, x, mode);
  }

  void register_into(ParamRegistry& reg, const std::string& prefix) {
    c1.register_into(reg, prefix + ".c1");
    c2.register_into(reg, prefix + ".c2");
  }
};

}  // namespace chainpred
