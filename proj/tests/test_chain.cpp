#include <cmath>
#include <cstring>
#include <vector>

#include "chainpred/chain.hpp"
#include "doctest.h"

using namespace chainpred;

namespace {

NetConfig tiny_net() {
  NetConfig cfg;
  cfg.encoder_channels = {2, 2, 2, 2, 2, 2};
  cfg.deception_kernels = {2};
  cfg.deception_branch_channels = 2;
  cfg.feedback_channels = 2;
  return cfg;
}

// 32x32 image -> 2x2 hidden -> 8x8 heatmaps.
SingleImageChain tiny_chain(int steps, std::uint64_t seed,
                            FeedbackMode fm = FeedbackMode::kHard) {
  SingleImageChain m;
  ChainConfig cc;
  cc.steps = steps;
  cc.feedback_mode = fm;
  Rng rng(seed);
  m.init(tiny_net(), cc, rng);
  return m;
}

TensorPtr random_images(int n, int size, std::uint64_t seed) {
  auto img = tensor({n, 1, size, size});
  Rng rng(seed);
  for (double& v : img->data) v = rng.uniform();
  return img;
}

std::vector<Pose> random_poses(int n, int joints, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Pose> poses(static_cast<std::size_t>(n));
  for (auto& p : poses) {
    p.resize(static_cast<std::size_t>(joints));
    for (auto& j : p) {
      j.x = rng.uniform(2.0, size - 3.0);
      j.y = rng.uniform(2.0, size - 3.0);
    }
  }
  return poses;
}

void zero_all(ParamRegistry reg) {
  for (auto& [name, t] : reg.trainable)
    std::fill(t->data.begin(), t->data.end(), 0.0);
}

}  // namespace

TEST_SUITE("test_chain") {
  TEST_CASE("make_target r=0 is a one-hot at the named cell") {
    auto t = make_target(2.0, 3.0, 8, 8, 0.0);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(t.grid->data[static_cast<std::size_t>(y) * 8 + x] ==
              ((x == 2 && y == 3) ? 1.0 : 0.0));
  }

  TEST_CASE("sub-cell radius still yields a single cell") {
    // 0.01 * (64+64)/2 image pixels = 0.64 px = 0.16 cells at stride 4
    auto t = make_target(5.0, 6.0, 16, 16, 0.16);
    double sum = 0.0;
    int nonzero = 0;
    for (double v : t.grid->data) {
      sum += v;
      if (v != 0.0) ++nonzero;
    }
    CHECK(nonzero == 1);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("radius 1 at the grid center covers the 5-cell von Neumann disk") {
    auto t = make_target(2.0, 2.0, 5, 5, 1.0);
    int nonzero = 0;
    for (double v : t.grid->data)
      if (v != 0.0) {
        ++nonzero;
        CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
      }
    CHECK(nonzero == 5);
    CHECK(t.grid->data[2 * 5 + 2] == doctest::Approx(0.2));
    CHECK(t.grid->data[1 * 5 + 2] == doctest::Approx(0.2));
    CHECK(t.grid->data[3 * 5 + 2] == doctest::Approx(0.2));
  }

  TEST_CASE("joint outside the grid is rejected") {
    CHECK_THROWS_AS(make_target(8.2, 1.0, 8, 8, 0.5), ValidationError);
    CHECK_THROWS_AS(make_target(1.0, -0.7, 8, 8, 0.5), ValidationError);
  }

  TEST_CASE("off-grid-center fallback picks the nearest cell, row-major ties") {
    // (0.5, 0.5) is equidistant from four cells; row-major order wins.
    auto t = make_target(0.5, 0.5, 4, 4, 0.0);
    CHECK(t.grid->data[0] == 1.0);
  }

  TEST_CASE("schedule starts at 1, floors at p_min, never increases") {
    SamplingSchedule s;
    s.p_min = 0.5;
    s.decay_horizon = 1000;
    CHECK(schedule_rate(0, s) == 1.0);
    CHECK(schedule_rate(1000, s) == doctest::Approx(0.5));
    CHECK(schedule_rate(100000, s) == doctest::Approx(0.5));
    double prev = 1.0;
    for (std::int64_t step = 0; step <= 2000; step += 50) {
      double p = schedule_rate(step, s);
      CHECK(p <= prev + 1e-15);
      prev = p;
    }
  }

  TEST_CASE("step 0 produces a well-formed distribution") {
    auto m = tiny_chain(3, 21);
    Graph g;
    auto h0 = m.encode_image(g, random_images(1, 32, 22), Mode::kEval);
    auto out = m.chain_step(g, h0, {}, 0, Mode::kEval);
    double sum = 0.0;
    for (double lp : out.log_probs->data) sum += std::exp(lp);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }

  TEST_CASE("wrong feedback count is a contract violation") {
    auto m = tiny_chain(3, 23);
    Graph g;
    auto h0 = m.encode_image(g, random_images(1, 32, 24), Mode::kEval);
    CHECK_THROWS_AS(m.chain_step(g, h0, {}, 1, Mode::kEval), ValidationError);
  }

  TEST_CASE("zero feedback kernels make the step independent of feedback") {
    auto m = tiny_chain(2, 25);
    auto& st = m.steps[1];
    for (auto& k : st.w_y) {
      std::fill(k.w->data.begin(), k.w->data.end(), 0.0);
      std::fill(k.b->data.begin(), k.b->data.end(), 0.0);
    }
    Graph g;
    auto h0 = m.encode_image(g, random_images(1, 32, 26), Mode::kEval);
    auto fb_a = tensor({1, 1, 8, 8});
    fb_a->data[3] = 1.0;
    auto fb_b = tensor({1, 1, 8, 8});
    fb_b->data[60] = 1.0;
    auto out_a = m.chain_step(
        g, h0, {m.feedback_encode(g, fb_a, Mode::kEval)}, 1, Mode::kEval);
    auto out_b = m.chain_step(
        g, h0, {m.feedback_encode(g, fb_b, Mode::kEval)}, 1, Mode::kEval);
    CHECK(out_a.log_probs->data == out_b.log_probs->data);
  }

  TEST_CASE("two-step full-graph gradient check") {
    auto m = tiny_chain(2, 27);
    auto h0 = tensor({1, 2, 2, 2});
    auto fb = tensor({1, 1, 8, 8});
    Rng rng(28);
    for (double& v : h0->data) v = rng.normal();
    for (double& v : fb->data) v = rng.uniform(0.0, 0.2);
    double z = 0.0;
    for (double v : fb->data) z += v;
    for (double& v : fb->data) v /= z;
    auto t0 = make_target(1.0, 2.0, 8, 8, 0.0).grid;
    auto t1 = make_target(5.0, 4.0, 8, 8, 0.0).grid;
    auto f = [&](Graph& g, const std::vector<TensorPtr>& in) {
      auto s0 = m.chain_step(g, in[0], {}, 0, Mode::kTrain);
      auto enc = m.feedback_encode(g, in[1], Mode::kTrain);
      auto s1 = m.chain_step(g, s0.hidden, {enc}, 1, Mode::kTrain);
      return add_scalars(g, {heatmap_cross_entropy(g, s0.log_probs, t0),
                             heatmap_cross_entropy(g, s1.log_probs, t1)});
    };
    double err = grad_check(
        f, {h0, fb, m.steps[1].w_y[0].w, m.steps[1].w_h.w,
            m.steps[0].decoder.proj.w, m.feedback_enc.c1.w});
    CHECK(err < 1e-4);
  }

  TEST_CASE("teacher-forced loss at zero weights is T log(H'W')") {
    auto m = tiny_chain(3, 29);
    zero_all(m.params());
    Graph g;
    Rng rng(30);
    auto out = forward_single_image(m, g, random_images(2, 32, 31),
                                    random_poses(2, 3, 32, 32), 1.0, rng,
                                    Mode::kEval);
    CHECK(out.loss->data[0] ==
          doctest::Approx(3.0 * std::log(64.0)).epsilon(1e-12));
  }

  TEST_CASE("scheduled sampling is bit-reproducible under a fixed seed") {
    for (auto fm : {FeedbackMode::kHard, FeedbackMode::kSoft}) {
      auto run = [&](std::uint64_t seed) {
        auto m = tiny_chain(3, 33, fm);
        Graph g;
        Rng rng(seed);
        auto out = forward_single_image(m, g, random_images(2, 32, 34),
                                        random_poses(2, 3, 32, 35), 0.5, rng,
                                        Mode::kTrain);
        return out.loss->data[0];
      };
      double a = run(99), b = run(99);
      CHECK(std::memcmp(&a, &b, sizeof a) == 0);
    }
  }

  TEST_CASE("soft and hard feedback agree under pure teacher forcing") {
    // p_truth = 1 feeds ground-truth disks on both paths.
    double vals[2];
    int i = 0;
    for (auto fm : {FeedbackMode::kHard, FeedbackMode::kSoft}) {
      auto m = tiny_chain(3, 36, fm);
      Graph g;
      Rng rng(37);
      auto out = forward_single_image(m, g, random_images(1, 32, 38),
                                      random_poses(1, 3, 32, 39), 1.0, rng,
                                      Mode::kEval);
      vals[i++] = out.loss->data[0];
    }
    CHECK(vals[0] == doctest::Approx(vals[1]).epsilon(1e-12));
  }

  TEST_CASE("soft feedback path back-propagates without error") {
    auto m = tiny_chain(3, 40, FeedbackMode::kSoft);
    Graph g;
    Rng rng(41);
    auto out = forward_single_image(m, g, random_images(2, 32, 42),
                                    random_poses(2, 3, 32, 43), 0.0, rng,
                                    Mode::kTrain);
    g.backward(out.loss);
    double gsum = 0.0;
    for (double v : m.encoder.layers[0].w->grad) gsum += std::abs(v);
    CHECK(gsum > 0.0);
  }

  TEST_CASE("untied steps: perturbing step-1 weights leaves step 0 alone") {
    auto images = random_images(1, 32, 44);
    auto poses = random_poses(1, 3, 32, 45);
    auto run = [&](bool perturb) {
      auto m = tiny_chain(3, 46);
      if (perturb) m.steps[1].decoder.proj.w->data[0] += 0.5;
      Graph g;
      Rng rng(47);
      return forward_single_image(m, g, images, poses, 1.0, rng, Mode::kEval);
    };
    auto base = run(false), pert = run(true);
    CHECK(base.log_probs[0]->data == pert.log_probs[0]->data);
    CHECK(base.log_probs[1]->data != pert.log_probs[1]->data);
  }

  TEST_CASE("forward_single_image validates pose and joint counts") {
    auto m = tiny_chain(3, 48);
    Graph g;
    Rng rng(49);
    CHECK_THROWS_AS(forward_single_image(m, g, random_images(2, 32, 50),
                                         random_poses(1, 3, 32, 51), 1.0, rng,
                                         Mode::kEval),
                    ValidationError);
    CHECK_THROWS_AS(forward_single_image(m, g, random_images(1, 32, 52),
                                         random_poses(1, 2, 32, 53), 1.0, rng,
                                         Mode::kEval),
                    ValidationError);
  }

  TEST_CASE("feedback_count config truncates the conditioning window") {
    ChainConfig cc;
    cc.steps = 5;
    cc.feedback_count = 2;
    Rng rng(54);
    SingleImageChain m;
    m.init(tiny_net(), cc, rng);
    CHECK(m.feedback_count_at(0) == 0);
    CHECK(m.feedback_count_at(1) == 1);
    CHECK(m.feedback_count_at(4) == 2);
    cc.feedback_count = -1;
    SingleImageChain full;
    Rng rng2(55);
    full.init(tiny_net(), cc, rng2);
    CHECK(full.feedback_count_at(4) == 4);
  }

  // ---- video chain ----

  TEST_CASE("video step enforces the min(t, T_H) feedback window") {
    ChainConfig cc;
    cc.joints = 2;
    cc.time_horizon = 1;
    Rng rng(56);
    VideoChain m;
    m.init(tiny_net(), cc, rng);
    Graph g;
    auto frame = random_images(1, 32, 57);
    auto s0 = m.video_chain_step(g, nullptr, frame, {}, 0, Mode::kEval);
    CHECK(s0.log_probs.size() == 2);
    CHECK_THROWS_AS(m.video_chain_step(g, s0.hidden, frame, {}, 1, Mode::kEval),
                    ValidationError);
  }

  TEST_CASE("tied weights: one perturbation moves every frame's output") {
    auto frame = random_images(1, 32, 58);
    std::vector<TensorPtr> frames = {frame, frame, frame};
    auto poses = random_poses(1, 2, 32, 59);
    std::vector<std::vector<Pose>> vposes = {{poses[0], poses[0], poses[0]}};
    auto run = [&](bool perturb) {
      ChainConfig cc;
      cc.joints = 2;
      cc.time_horizon = 1;
      Rng rng(60);
      VideoChain m;
      m.init(tiny_net(), cc, rng);
      if (perturb) m.decoder.heads[0].w->data[0] += 0.5;
      Graph g;
      Rng fwd_rng(61);
      return forward_video(m, g, frames, vposes, 1.0, fwd_rng, Mode::kEval);
    };
    auto base = run(false), pert = run(true);
    for (int t = 0; t < 3; ++t)
      CHECK(base.log_probs[t][0]->data != pert.log_probs[t][0]->data);
  }

  TEST_CASE("zeroed feedback kernels reduce to the output-disconnected RNN") {
    ChainConfig cc;
    cc.joints = 2;
    cc.time_horizon = 2;
    Rng rng(62);
    VideoChain m;
    m.init(tiny_net(), cc, rng);
    for (auto& k : m.w_y) {
      std::fill(k.w->data.begin(), k.w->data.end(), 0.0);
      std::fill(k.b->data.begin(), k.b->data.end(), 0.0);
    }
    std::vector<TensorPtr> frames = {random_images(1, 32, 63),
                                     random_images(1, 32, 64),
                                     random_images(1, 32, 65)};
    auto mk = [&](std::uint64_t s) {
      auto p = random_poses(1, 2, 32, s);
      return p[0];
    };
    std::vector<std::vector<Pose>> poses_a = {{mk(66), mk(67), mk(68)}};
    std::vector<std::vector<Pose>> poses_b = {{mk(69), mk(70), mk(71)}};
    Graph ga, gb;
    Rng ra(72), rb(72);
    auto a = forward_video(m, ga, frames, poses_a, 1.0, ra, Mode::kEval);
    auto b = forward_video(m, gb, frames, poses_b, 1.0, rb, Mode::kEval);
    for (int t = 0; t < 3; ++t)
      for (int j = 0; j < 2; ++j)
        CHECK(a.log_probs[t][j]->data == b.log_probs[t][j]->data);
  }

  TEST_CASE("identical frames with zero recurrence weights are stationary") {
    ChainConfig cc;
    cc.joints = 2;
    cc.time_horizon = 1;
    Rng rng(73);
    VideoChain m;
    m.init(tiny_net(), cc, rng);
    for (auto* k : {&m.w_h, &m.w_y[0]}) {
      std::fill(k->w->data.begin(), k->w->data.end(), 0.0);
      std::fill(k->b->data.begin(), k->b->data.end(), 0.0);
    }
    auto frame = random_images(1, 32, 74);
    std::vector<TensorPtr> frames = {frame, frame, frame};
    auto pose = random_poses(1, 2, 32, 75)[0];
    std::vector<std::vector<Pose>> poses = {{pose, pose, pose}};
    Graph g;
    Rng fwd_rng(76);
    auto out = forward_video(m, g, frames, poses, 1.0, fwd_rng, Mode::kEval);
    for (int j = 0; j < 2; ++j)
      CHECK(out.log_probs[1][j]->data == out.log_probs[2][j]->data);
  }

  TEST_CASE("non-recurrent config decodes each frame independently") {
    ChainConfig cc;
    cc.joints = 2;
    cc.time_horizon = 0;
    cc.recurrent = false;
    Rng rng(77);
    VideoChain m;
    m.init(tiny_net(), cc, rng);
    auto f0 = random_images(1, 32, 78);
    auto f1 = random_images(1, 32, 79);
    auto pose = random_poses(1, 2, 32, 80)[0];
    std::vector<std::vector<Pose>> poses2 = {{pose, pose}};
    std::vector<std::vector<Pose>> poses1 = {{pose}};
    Graph ga, gb;
    Rng ra(81), rb(81);
    auto both = forward_video(m, ga, {f0, f1}, poses2, 1.0, ra, Mode::kEval);
    auto solo = forward_video(m, gb, {f1}, poses1, 1.0, rb, Mode::kEval);
    for (int j = 0; j < 2; ++j)
      CHECK(both.log_probs[1][j]->data == solo.log_probs[0][j]->data);
  }

  TEST_CASE("video loss decreases when training on a fixed tiny batch") {
    ChainConfig cc;
    cc.joints = 2;
    cc.time_horizon = 1;
    cc.target_radius = 0.5;
    Rng rng(82);
    VideoChain m;
    m.init(tiny_net(), cc, rng);
    auto reg = m.params();
    auto params = reg.trainable_tensors();
    OptimizerState opt;
    opt.learning_rate = 0.01;
    opt.decay_every = 1000000;
    std::vector<TensorPtr> frames = {random_images(2, 32, 83),
                                     random_images(2, 32, 84)};
    auto poses = random_poses(2, 2, 32, 85);
    std::vector<std::vector<Pose>> vposes = {{poses[0], poses[0]},
                                             {poses[1], poses[1]}};
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
      Graph g;
      Rng fwd_rng(86);
      auto out = forward_video(m, g, frames, vposes, 1.0, fwd_rng, Mode::kTrain);
      if (step == 0) first = out.loss->data[0];
      last = out.loss->data[0];
      g.backward(out.loss);
      sgd_momentum_step(params, opt);
    }
    CHECK(last < first * 0.8);
  }
}
