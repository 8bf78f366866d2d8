#pragma once

#include <string>
#include <vector>

#include "chainpred/chain.hpp"
#include "chainpred/nets.hpp"
#include "chainpred/tensor.hpp"

namespace chainpred {

// One central-difference check: the op (or composite) under test plus the
// worst relative error over all input coordinates.
struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;

  double worst() const {
    double w = 0.0;
    for (auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
  bool passed() const { return worst() < tolerance; }
};

namespace detail {

inline TensorPtr gs_random(std::vector<int> dims, Rng& rng,
                           double scale = 1.0) {
  auto t = tensor(std::move(dims), true);
  for (double& v : t->data) v = rng.normal(0.0, scale);
  return t;
}

// Scalar sum-of-squares head so any op output feeds grad_check.
inline TensorPtr gs_sum_squares(Graph& g, const TensorPtr& x) {
  auto loss = g.make({1});
  double s = 0.0;
  for (double v : x->data) s += v * v;
  loss->data[0] = s;
  g.push([x, loss] {
    x->ensure_grad();
    for (std::size_t i = 0; i < x->numel(); ++i)
      x->grad[i] += 2.0 * x->data[i] * loss->grad[0];
  });
  return loss;
}

inline TensorPtr gs_distribution(std::vector<int> dims, Rng& rng) {
  auto t = tensor(std::move(dims));
  std::size_t n = static_cast<std::size_t>(t->dim(0));
  std::size_t plane = t->numel() / n;  // normalized per example
  for (std::size_t e = 0; e < n; ++e) {
    double z = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      t->data[e * plane + i] = rng.uniform(0.05, 1.0);
      z += t->data[e * plane + i];
    }
    for (std::size_t i = 0; i < plane; ++i) t->data[e * plane + i] /= z;
  }
  return t;
}

}  // namespace detail

// Central-difference checks over every differentiable op (three random
// shapes each) plus the full two-step chained composite. Used both by the
// CLI grad-check subcommand and the first acceptance gate.
inline GradCheckReport run_grad_suite(std::uint64_t seed = 424242) {
  using detail::gs_distribution;
  using detail::gs_random;
  using detail::gs_sum_squares;
  Rng rng(seed);
  GradCheckReport report;
  auto record = [&](const std::string& name, double err) {
    report.entries.push_back({name, err});
  };

  struct ConvShape {
    std::vector<int> in;
    int cout, k, stride, pad;
  };
  std::vector<ConvShape> conv_shapes = {{{1, 1, 6, 6}, 2, 3, 1, 1},
                                        {{2, 2, 5, 5}, 1, 3, 2, 1},
                                        {{1, 3, 4, 4}, 2, 2, 1, 0}};
  for (std::size_t i = 0; i < conv_shapes.size(); ++i) {
    auto& cs = conv_shapes[i];
    auto in = gs_random(cs.in, rng, 0.7);
    auto w = gs_random({cs.cout, cs.in[1], cs.k, cs.k}, rng, 0.5);
    auto b = gs_random({cs.cout}, rng, 0.1);
    record("conv2d#" + std::to_string(i),
           grad_check(
               [cs](Graph& g, const std::vector<TensorPtr>& xs) {
                 return gs_sum_squares(
                     g, conv2d(g, xs[0], xs[1], xs[2], cs.stride, cs.pad));
               },
               {in, w, b}));
  }

  std::vector<ConvShape> deconv_shapes = {{{1, 2, 3, 3}, 2, 2, 2, 0},
                                          {{2, 1, 4, 4}, 2, 4, 2, 1},
                                          {{1, 3, 2, 2}, 1, 3, 1, 0}};
  for (std::size_t i = 0; i < deconv_shapes.size(); ++i) {
    auto& cs = deconv_shapes[i];
    auto in = gs_random(cs.in, rng, 0.7);
    auto w = gs_random({cs.in[1], cs.cout, cs.k, cs.k}, rng, 0.5);
    auto b = gs_random({cs.cout}, rng, 0.1);
    record("deconv2d#" + std::to_string(i),
           grad_check(
               [cs](Graph& g, const std::vector<TensorPtr>& xs) {
                 return gs_sum_squares(
                     g, deconv2d(g, xs[0], xs[1], xs[2], cs.stride, cs.pad));
               },
               {in, w, b}));
  }

  std::vector<std::vector<int>> plain_shapes = {
      {1, 2, 4, 4}, {2, 1, 6, 6}, {1, 3, 2, 2}};
  for (std::size_t i = 0; i < plain_shapes.size(); ++i) {
    auto in = gs_random(plain_shapes[i], rng);
    // keep values away from the ReLU kink so finite differences are clean
    for (double& v : in->data)
      if (std::abs(v) < 0.05) v = v < 0 ? -0.1 : 0.1;
    record("relu#" + std::to_string(i),
           grad_check(
               [](Graph& g, const std::vector<TensorPtr>& xs) {
                 return gs_sum_squares(g, relu(g, xs[0]));
               },
               {in}));
  }

  std::vector<std::vector<int>> pool_shapes = {
      {1, 1, 4, 4}, {2, 2, 6, 6}, {1, 3, 8, 8}};
  for (std::size_t i = 0; i < pool_shapes.size(); ++i) {
    auto in = gs_random(pool_shapes[i], rng);
    record("maxpool2#" + std::to_string(i),
           grad_check(
               [](Graph& g, const std::vector<TensorPtr>& xs) {
                 return gs_sum_squares(g, maxpool2(g, xs[0]));
               },
               {in}));
    auto in2 = gs_random(pool_shapes[i], rng);
    record("avgpool#" + std::to_string(i),
           grad_check(
               [](Graph& g, const std::vector<TensorPtr>& xs) {
                 return gs_sum_squares(g, avgpool(g, xs[0], 2));
               },
               {in2}));
  }

  for (std::size_t i = 0; i < pool_shapes.size(); ++i) {
    int channels = pool_shapes[i][1];
    auto in = gs_random(pool_shapes[i], rng);
    auto gamma = gs_random({channels}, rng, 0.3);
    for (double& v : gamma->data) v += 1.0;
    auto beta = gs_random({channels}, rng, 0.3);
    record("batchnorm#" + std::to_string(i),
           grad_check(
               [](Graph& g, const std::vector<TensorPtr>& xs) {
                 BatchNormState bn(xs[0]->dim(1));
                 auto out =
                     batchnorm(g, xs[0], xs[1], xs[2], bn, Mode::kTrain);
                 // weighted squares so the loss is not scale-invariant
                 auto loss = g.make({1});
                 double s = 0.0;
                 for (std::size_t k = 0; k < out->numel(); ++k)
                   s += (1.0 + 0.1 * static_cast<double>(k)) * out->data[k] *
                        out->data[k];
                 loss->data[0] = s;
                 g.push([out, loss] {
                   out->ensure_grad();
                   for (std::size_t k = 0; k < out->numel(); ++k)
                     out->grad[k] += 2.0 *
                                     (1.0 + 0.1 * static_cast<double>(k)) *
                                     out->data[k] * loss->grad[0];
                 });
                 return loss;
               },
               {in, gamma, beta}));
  }

  std::vector<std::vector<int>> map_shapes = {
      {1, 1, 4, 4}, {2, 1, 3, 5}, {1, 1, 8, 8}};
  for (std::size_t i = 0; i < map_shapes.size(); ++i) {
    auto scores = gs_random(map_shapes[i], rng, 1.5);
    auto target = gs_distribution(map_shapes[i], rng);
    record("log_softmax_cross_entropy#" + std::to_string(i),
           grad_check(
               [target](Graph& g, const std::vector<TensorPtr>& xs) {
                 return heatmap_cross_entropy(
                     g, spatial_log_softmax(g, xs[0]), target);
               },
               {scores}));
    auto scores2 = gs_random(map_shapes[i], rng, 1.5);
    record("spatial_softmax#" + std::to_string(i),
           grad_check(
               [](Graph& g, const std::vector<TensorPtr>& xs) {
                 return gs_sum_squares(g, spatial_softmax(g, xs[0]));
               },
               {scores2}));
  }

  for (std::size_t i = 0; i < plain_shapes.size(); ++i) {
    auto a = gs_random(plain_shapes[i], rng);
    auto b = gs_random(plain_shapes[i], rng);
    record("add_concat#" + std::to_string(i),
           grad_check(
               [](Graph& g, const std::vector<TensorPtr>& xs) {
                 auto cat = concat_channels(g, {xs[0], xs[1]});
                 return gs_sum_squares(g, add(g, cat, cat));
               },
               {a, b}));
  }

  // Full two-step chained composite: encoder-produced hidden state, feedback
  // encoding, recurrence, decoder, and the summed cross-entropy loss.
  for (std::uint64_t i = 0; i < 3; ++i) {
    NetConfig nc;
    nc.encoder_channels = {2, 2, 2, 2, 2, 2};
    nc.deception_kernels = {2};
    nc.deception_branch_channels = 2;
    nc.feedback_channels = 2;
    ChainConfig cc;
    cc.steps = 2;
    SingleImageChain m;
    Rng mr(seed + 1000 + i);
    m.init(nc, cc, mr);

    auto h0 = gs_random({1, 2, 2, 2}, rng);
    auto fb = gs_distribution({1, 1, 8, 8}, rng);
    auto t0 = make_target(1.0, 2.0, 8, 8, 0.0).grid;
    auto t1 = make_target(5.0, 4.0, 8, 8, 0.0).grid;
    auto f = [&](Graph& g, const std::vector<TensorPtr>& in) {
      auto s0 = m.chain_step(g, in[0], {}, 0, Mode::kTrain);
      auto enc = m.feedback_encode(g, in[1], Mode::kTrain);
      auto s1 = m.chain_step(g, s0.hidden, {enc}, 1, Mode::kTrain);
      return add_scalars(g, {heatmap_cross_entropy(g, s0.log_probs, t0),
                             heatmap_cross_entropy(g, s1.log_probs, t1)});
    };
    record("two_step_chain#" + std::to_string(i),
           grad_check(f, {h0, fb, m.steps[1].w_y[0].w, m.steps[1].w_h.w,
                          m.steps[0].decoder.proj.w, m.feedback_enc.c1.w}));
  }

  return report;
}

}  // namespace chainpred
