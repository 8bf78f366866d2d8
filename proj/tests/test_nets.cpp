#include <cmath>
#include <vector>

#include "chainpred/nets.hpp"
#include "doctest.h"
#include "reference_ops.hpp"

using namespace chainpred;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.encoder_channels = {2, 2, 2, 2, 2, 2};
  cfg.deception_kernels = {2, 4};
  cfg.deception_branch_channels = 2;
  cfg.feedback_channels = 2;
  return cfg;
}

std::size_t trainable_numel(ParamRegistry& reg) {
  std::size_t n = 0;
  for (auto& [name, t] : reg.trainable) n += t->numel();
  return n;
}

}  // namespace

TEST_SUITE("test_nets") {
  TEST_CASE("encoder 64x64 input gives 4x4 features at stride 16") {
    NetConfig cfg;
    Rng rng(1);
    Encoder enc;
    enc.init(cfg, rng);
    Graph g;
    auto img = tensor({1, 1, 64, 64});
    auto out = enc.forward(g, img, Mode::kEval);
    CHECK(out->dims == std::vector<int>{1, cfg.hidden_channels(), 4, 4});
    CHECK(cfg.effective_stride() == 16);
  }

  TEST_CASE("encoder 32x32 input gives 2x2 features") {
    NetConfig cfg;
    Rng rng(2);
    Encoder enc;
    enc.init(cfg, rng);
    Graph g;
    auto out = enc.forward(g, tensor({1, 1, 32, 32}), Mode::kEval);
    CHECK(out->dim(2) == 2);
    CHECK(out->dim(3) == 2);
  }

  TEST_CASE("encoder rejects input not divisible by the effective stride") {
    NetConfig cfg;
    Rng rng(3);
    Encoder enc;
    enc.init(cfg, rng);
    Graph g;
    CHECK_THROWS_AS(enc.forward(g, tensor({1, 1, 40, 40}), Mode::kEval),
                    ShapeError);
  }

  TEST_CASE("zero image with zero biases gives a zero feature map in eval") {
    // conv(0) = bias = 0, ReLU(0) = 0, batchnorm with fresh running stats
    // (mean 0, var 1) and beta 0 keeps it at 0.
    NetConfig cfg = tiny_config();
    Rng rng(4);
    Encoder enc;
    enc.init(cfg, rng);
    Graph g;
    auto out = enc.forward(g, tensor({1, 1, 32, 32}), Mode::kEval);
    for (double v : out->data) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("deception block upsamples 4x4 to 8x8") {
    NetConfig cfg;
    Rng rng(5);
    DeceptionBlock blk;
    blk.init(cfg.hidden_channels(), cfg, rng);
    Graph g;
    auto out =
        blk.forward(g, tensor({1, cfg.hidden_channels(), 4, 4}), Mode::kEval);
    CHECK(out->dim(2) == 8);
    CHECK(out->dim(3) == 8);
  }

  TEST_CASE("deception branch channels [4,4,4] concatenate to 12") {
    NetConfig cfg;  // kernels {2,4,6}, 4 channels each
    Rng rng(6);
    DeceptionBlock blk;
    blk.init(cfg.hidden_channels(), cfg, rng);
    CHECK(blk.out_channels() == 12);
    Graph g;
    auto out =
        blk.forward(g, tensor({2, cfg.hidden_channels(), 4, 4}), Mode::kEval);
    CHECK(out->dim(1) == 12);
  }

  TEST_CASE("odd branch kernel is rejected at build time") {
    NetConfig cfg;
    cfg.deception_kernels = {3};
    Rng rng(7);
    DeceptionBlock blk;
    CHECK_THROWS_AS(blk.init(4, cfg, rng), ShapeError);
  }

  TEST_CASE("single-branch block reduces to a plain deconv2d") {
    // With gamma = sqrt(1 + eps), beta = 0, fresh running stats and a
    // non-negative input/weight regime the wrapper ReLU/BN is the identity,
    // so the block must match the raw deconvolution reference.
    NetConfig cfg = tiny_config();
    cfg.single_deconv = true;
    Rng rng(8);
    DeceptionBlock blk;
    blk.init(3, cfg, rng);
    REQUIRE(blk.branches.size() == 1);
    auto& br = blk.branches[0];
    for (double& v : br.w->data) v = std::abs(v);
    for (double& v : br.gamma->data) v = std::sqrt(1.0 + kBnEpsilon);

    Rng data_rng(9);
    auto x = tensor({1, 3, 3, 3});
    for (double& v : x->data) v = data_rng.uniform();
    Graph g;
    auto out = blk.forward(g, x, Mode::kEval);
    auto ref = refops::deconv2d_ref(*x, *br.w, *br.b, br.stride, br.pad);
    REQUIRE(out->numel() == ref.size());
    for (std::size_t i = 0; i < out->numel(); ++i)
      CHECK(out->data[i] == doctest::Approx(ref[i]).epsilon(1e-10));
  }

  TEST_CASE("single-deconv ablation has a different parameter count") {
    Rng rng(10);
    NetConfig multi;
    NetConfig single = multi;
    single.single_deconv = true;
    Decoder a, b;
    a.init(multi.hidden_channels(), multi, rng);
    b.init(single.hidden_channels(), single, rng);
    ParamRegistry ra, rb;
    a.register_into(ra, "d");
    b.register_into(rb, "d");
    CHECK(trainable_numel(ra) != trainable_numel(rb));
  }

  TEST_CASE("decoder maps 4x4 hidden state to a 16x16 score map") {
    NetConfig cfg;
    Rng rng(11);
    Decoder dec;
    dec.init(cfg.hidden_channels(), cfg, rng);
    Graph g;
    auto out =
        dec.forward(g, tensor({1, cfg.hidden_channels(), 4, 4}), Mode::kEval);
    CHECK(out->dims == std::vector<int>{1, 1, 16, 16});
  }

  TEST_CASE("zero decoder weights give a uniform distribution after softmax") {
    NetConfig cfg = tiny_config();
    Rng rng(12);
    Decoder dec;
    dec.init(2, cfg, rng);
    ParamRegistry reg;
    dec.register_into(reg, "d");
    for (auto& [name, t] : reg.trainable)
      std::fill(t->data.begin(), t->data.end(), 0.0);
    Graph g;
    auto hidden = tensor({1, 2, 4, 4});
    Rng data_rng(13);
    for (double& v : hidden->data) v = data_rng.normal();
    auto probs = spatial_softmax(g, dec.forward(g, hidden, Mode::kEval));
    for (double v : probs->data)
      CHECK(v == doctest::Approx(1.0 / 256.0).epsilon(1e-12));
  }

  TEST_CASE("decoder gradient check") {
    NetConfig cfg = tiny_config();
    Rng rng(14);
    Decoder dec;
    dec.init(2, cfg, rng);
    auto hidden = tensor({1, 2, 2, 2});
    Rng data_rng(15);
    for (double& v : hidden->data) v = data_rng.normal();
    auto target = tensor({1, 1, 8, 8});
    target->data[5] = 1.0;
    auto f = [&](Graph& g, const std::vector<TensorPtr>& in) {
      auto scores = dec.forward(g, in[0], Mode::kTrain);
      return heatmap_cross_entropy(g, spatial_log_softmax(g, scores), target);
    };
    CHECK(grad_check(f, {hidden, dec.proj.w, dec.up1.branches[0].w}) < 1e-4);
  }

  TEST_CASE("feedback encoder maps heatmap resolution to hidden resolution") {
    NetConfig cfg = tiny_config();
    Rng rng(16);
    FeedbackEncoder fe;
    fe.init(1, cfg.hidden_channels(), cfg, rng);
    Graph g;
    auto out = fe.forward(g, tensor({1, 1, 8, 8}), Mode::kEval);
    CHECK(out->dims == std::vector<int>{1, cfg.hidden_channels(), 2, 2});
  }

  TEST_CASE("feedback encoder maps a zero heatmap to a zero embedding") {
    NetConfig cfg = tiny_config();
    Rng rng(17);
    FeedbackEncoder fe;
    fe.init(1, cfg.hidden_channels(), cfg, rng);
    Graph g;
    auto out = fe.forward(g, tensor({1, 1, 8, 8}), Mode::kEval);
    for (double v : out->data) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));
  }

  TEST_CASE("feedback encoder gradient check") {
    NetConfig cfg = tiny_config();
    Rng rng(18);
    FeedbackEncoder fe;
    fe.init(1, 2, cfg, rng);
    auto fb = tensor({1, 1, 8, 8});
    Rng data_rng(19);
    for (double& v : fb->data) v = data_rng.uniform();
    auto weights = tensor({1, 2, 2, 2});
    for (double& v : weights->data) v = data_rng.uniform(0.5, 1.5);
    auto f = [&](Graph& g, const std::vector<TensorPtr>& in) {
      auto emb = fe.forward(g, in[0], Mode::kTrain);
      // weighted sum of squares keeps the loss sensitive to every input
      auto out = g.make({1});
      double s = 0.0;
      for (std::size_t i = 0; i < emb->numel(); ++i)
        s += weights->data[i] * emb->data[i] * emb->data[i];
      out->data[0] = s;
      g.push([emb, out, this_w = weights] {
        emb->ensure_grad();
        for (std::size_t i = 0; i < emb->numel(); ++i)
          emb->grad[i] += 2.0 * this_w->data[i] * emb->data[i] * out->grad[0];
      });
      return out;
    };
    CHECK(grad_check(f, {fb, fe.c1.w, fe.c2.w}) < 1e-4);
  }
}
