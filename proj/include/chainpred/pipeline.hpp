#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "chainpred/chain.hpp"
#include "chainpred/checkpoint.hpp"
#include "chainpred/config.hpp"
#include "chainpred/eval.hpp"
#include "chainpred/inference.hpp"
#include "chainpred/synthdata.hpp"

namespace chainpred {

// ---------------------------------------------------------------------------
// Joint ordering
// ---------------------------------------------------------------------------

// Decode order for the chain: stable, easily-detected joints first so the
// ambiguous sided joints can condition on them. For non-default joint counts
// the identity order is used.
inline std::vector<int> chain_joint_order(int joints) {
  if (joints == kJointCount)
    return {kHead, kNeck, kPelvis, kLElbow, kRElbow, kLWrist, kRWrist};
  std::vector<int> order(static_cast<std::size_t>(joints));
  std::iota(order.begin(), order.end(), 0);
  return order;
}

// out[i] = p[order[i]] : original joint ids -> chain positions
inline Pose to_chain_order(const Pose& p, const std::vector<int>& order) {
  Pose out(order.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    out[i] = p[static_cast<std::size_t>(order[i])];
  return out;
}

// Inverse permutation: chain positions -> original joint ids
inline Pose from_chain_order(const Pose& p, const std::vector<int>& order) {
  Pose out(order.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    out[static_cast<std::size_t>(order[i])] = p[i];
  return out;
}

// Mirror-symmetric joint pairs mapped into chain positions, for flip decode.
inline std::vector<std::pair<int, int>> chain_flip_pairs(
    const std::vector<int>& order) {
  std::vector<int> pos(order.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
  std::vector<std::pair<int, int>> out;
  if (order.size() == static_cast<std::size_t>(kJointCount))
    for (auto& [l, r] : flip_pairs())
      out.emplace_back(pos[static_cast<std::size_t>(l)],
                       pos[static_cast<std::size_t>(r)]);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset splits
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Per-item scene seed, disjoint streams for train/test and across run seeds.
inline std::uint32_t split_seed(std::uint64_t run_seed, bool test, int index) {
  std::uint64_t x = (run_seed << 22) ^ (test ? 0x8000000000000000ull : 0ull) ^
                    static_cast<std::uint64_t>(index);
  return static_cast<std::uint32_t>(detail::splitmix64(x));
}

inline std::vector<Scene> make_scene_split(const RunConfig& cfg, bool test) {
  int count = test ? cfg.data.test_size : cfg.data.train_size;
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(
        generate_scene(split_seed(cfg.training.seed, test, i), cfg.data.scene));
  return out;
}

inline std::vector<std::vector<Scene>> make_video_split(const RunConfig& cfg,
                                                        bool test) {
  int count = test ? cfg.data.test_size : cfg.data.train_size;
  std::vector<std::vector<Scene>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(generate_video(split_seed(cfg.training.seed, test, i),
                                 cfg.data.scene, cfg.data.frames));
  return out;
}

// ---------------------------------------------------------------------------
// Model builders
// ---------------------------------------------------------------------------

inline SingleImageChain build_single_model(const RunConfig& cfg) {
  SingleImageChain m;
  Rng rng(cfg.training.seed * 7919 + 13);
  m.init(cfg.net, cfg.chain, rng);
  return m;
}

inline VideoChain build_video_model(const RunConfig& cfg) {
  VideoChain m;
  Rng rng(cfg.training.seed * 7919 + 13);
  ChainConfig cc = cfg.chain;
  cc.steps = cfg.data.frames;
  m.init(cfg.net, cc, rng);
  return m;
}

inline OptimizerState make_optimizer(const RunConfig& cfg) {
  OptimizerState opt;
  opt.learning_rate = cfg.training.lr;
  opt.momentum = cfg.training.momentum;
  opt.decay_factor = cfg.training.decay;
  opt.decay_every = cfg.training.decay_horizon;
  return opt;
}

inline SamplingSchedule make_schedule(const RunConfig& cfg) {
  SamplingSchedule s;
  s.p_min = cfg.training.p_min;
  s.decay_horizon = cfg.training.schedule_horizon > 0
                        ? cfg.training.schedule_horizon
                        : std::max(1, cfg.training.steps);
  return s;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

// Scenes hold [1,H,W] images; decode entry points take [1,1,H,W] batches.
inline TensorPtr as_batch(const TensorPtr& image) {
  auto out = tensor({1, 1, image->dim(1), image->dim(2)});
  out->data = image->data;
  return out;
}

inline TensorPtr stack_images(const std::vector<Scene>& scenes,
                              const std::vector<int>& idx) {
  int h = scenes[0].image->dim(1), w = scenes[0].image->dim(2);
  auto out = tensor({static_cast<int>(idx.size()), 1, h, w});
  std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t e = 0; e < idx.size(); ++e)
    std::copy_n(scenes[static_cast<std::size_t>(idx[e])].image->data.data(),
                plane, &out->data[e * plane]);
  return out;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainArtifacts {
  std::vector<double> losses;  // one entry per optimizer step
};

namespace detail {

struct RunLogs {
  std::ofstream loss_log;
  std::string out_dir;
  bool enabled = false;

  explicit RunLogs(const std::string& dir) : out_dir(dir) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    loss_log.open(dir + "/loss_log.csv", std::ios::trunc);
    if (!loss_log)
      throw ValidationError("cannot open loss log in " + dir);
    loss_log << "step,loss\n";
    enabled = true;
  }

  void log(int step, double loss) {
    if (!enabled) return;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%d,%.12g\n", step, loss);
    loss_log << buf;
  }
};

inline void maybe_checkpoint(const ParamRegistry& reg,
                             const OptimizerState& opt, const RunConfig& cfg,
                             const RunLogs& logs, int step, bool final) {
  if (logs.out_dir.empty()) return;
  if (!final && step % cfg.training.checkpoint_every != 0) return;
  std::string path = final
                         ? logs.out_dir + "/checkpoint.chnp"
                         : logs.out_dir + "/checkpoint_" +
                               std::to_string(step) + ".chnp";
  save_checkpoint(reg, &opt, static_cast<std::uint64_t>(step),
                  config_hash(cfg), path);
}

}  // namespace detail

inline TrainArtifacts train_single(SingleImageChain& model,
                                   const RunConfig& cfg,
                                   const std::vector<Scene>& train,
                                   const std::string& out_dir = "") {
  if (train.empty()) throw ValidationError("train_single: empty dataset");
  auto order = chain_joint_order(cfg.data.scene.joints);
  auto reg = model.params();
  auto params = reg.trainable_tensors();
  auto opt = make_optimizer(cfg);
  auto sched = make_schedule(cfg);
  Rng rng(cfg.training.seed * 104729 + 7);
  detail::RunLogs logs(out_dir);
  if (!out_dir.empty()) write_effective_config(cfg, out_dir + "/config.txt");

  TrainArtifacts art;
  for (int step = 0; step < cfg.training.steps; ++step) {
    std::vector<int> idx(static_cast<std::size_t>(cfg.training.batch));
    for (auto& i : idx)
      i = static_cast<int>(rng.below(train.size()));
    auto images = stack_images(train, idx);
    std::vector<Pose> poses;
    poses.reserve(idx.size());
    for (int i : idx)
      poses.push_back(
          to_chain_order(train[static_cast<std::size_t>(i)].pose, order));
    double p_truth = schedule_rate(step, sched);
    Graph g;
    auto out =
        forward_single_image(model, g, images, poses, p_truth, rng,
                             Mode::kTrain);
    g.backward(out.loss);
    sgd_momentum_step(params, opt);
    art.losses.push_back(out.loss->data[0]);
    logs.log(step + 1, out.loss->data[0]);
    detail::maybe_checkpoint(reg, opt, cfg, logs, step + 1, false);
  }
  detail::maybe_checkpoint(reg, opt, cfg, logs, cfg.training.steps, true);
  return art;
}

inline TrainArtifacts train_video(VideoChain& model, const RunConfig& cfg,
                                  const std::vector<std::vector<Scene>>& train,
                                  const std::string& out_dir = "") {
  if (train.empty()) throw ValidationError("train_video: empty dataset");
  auto order = chain_joint_order(cfg.data.scene.joints);
  int frames = static_cast<int>(train[0].size());
  auto reg = model.params();
  auto params = reg.trainable_tensors();
  auto opt = make_optimizer(cfg);
  auto sched = make_schedule(cfg);
  Rng rng(cfg.training.seed * 104729 + 7);
  detail::RunLogs logs(out_dir);
  if (!out_dir.empty()) write_effective_config(cfg, out_dir + "/config.txt");

  TrainArtifacts art;
  for (int step = 0; step < cfg.training.steps; ++step) {
    std::vector<int> idx(static_cast<std::size_t>(cfg.training.batch));
    for (auto& i : idx)
      i = static_cast<int>(rng.below(train.size()));
    std::vector<TensorPtr> frame_batches;
    for (int t = 0; t < frames; ++t) {
      std::vector<Scene> slice;
      slice.reserve(idx.size());
      for (int i : idx)
        slice.push_back(
            train[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]);
      std::vector<int> all(idx.size());
      std::iota(all.begin(), all.end(), 0);
      frame_batches.push_back(stack_images(slice, all));
    }
    std::vector<std::vector<Pose>> poses;
    for (int i : idx) {
      std::vector<Pose> seq;
      for (auto& sc : train[static_cast<std::size_t>(i)])
        seq.push_back(to_chain_order(sc.pose, order));
      poses.push_back(std::move(seq));
    }
    double p_truth = schedule_rate(step, sched);
    Graph g;
    auto out = forward_video(model, g, frame_batches, poses, p_truth, rng,
                             Mode::kTrain);
    g.backward(out.loss);
    sgd_momentum_step(params, opt);
    art.losses.push_back(out.loss->data[0]);
    logs.log(step + 1, out.loss->data[0]);
    detail::maybe_checkpoint(reg, opt, cfg, logs, step + 1, false);
  }
  detail::maybe_checkpoint(reg, opt, cfg, logs, cfg.training.steps, true);
  return art;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline PckMode eval_mode(const RunConfig& cfg) {
  return cfg.eval.mode == "head" ? PckMode::kHead : PckMode::kBbox;
}

struct EvalOutput {
  EvalResult result;
  std::vector<Pose> predictions;  // original joint order
};

// Single-image decode regimes: beam | soft | oracle | flip.
inline EvalOutput eval_single(SingleImageChain& model, const RunConfig& cfg,
                              const std::vector<Scene>& test,
                              const std::string& decode) {
  auto order = chain_joint_order(cfg.data.scene.joints);
  EvalOutput out;
  std::vector<Pose> gts;
  std::vector<EvalRef> refs;
  for (auto& sc : test) {
    Pose chain_pose;
    if (decode == "beam") {
      chain_pose = beam_search(model, as_batch(sc.image), cfg.eval.beam).pose;
    } else if (decode == "soft") {
      chain_pose = soft_decode(model, as_batch(sc.image)).result.pose;
    } else if (decode == "oracle") {
      chain_pose =
          oracle_decode(model, as_batch(sc.image), to_chain_order(sc.pose, order)).pose;
    } else if (decode == "flip") {
      chain_pose =
          flip_average(model, as_batch(sc.image), chain_flip_pairs(order)).pose;
    } else {
      throw ValidationError("eval_single: unknown decode regime " + decode);
    }
    out.predictions.push_back(from_chain_order(chain_pose, order));
    gts.push_back(sc.pose);
    refs.push_back({sc.s_h, sc.s_w, sc.head_size});
  }
  out.result = error_analysis(out.predictions, gts, refs, eval_mode(cfg),
                              cfg.eval.alpha, cfg.eval.beta);
  return out;
}

// Video decode: per-frame chained decode, optionally Viterbi-smoothed per
// joint across frames. Each frame counts as one evaluated figure.
inline EvalOutput eval_video(VideoChain& model, const RunConfig& cfg,
                             const std::vector<std::vector<Scene>>& test,
                             bool viterbi) {
  auto order = chain_joint_order(cfg.data.scene.joints);
  int stride = cfg.net.heatmap_stride();
  EvalOutput out;
  std::vector<Pose> gts;
  std::vector<EvalRef> refs;
  for (auto& seq : test) {
    std::vector<TensorPtr> frames;
    for (auto& sc : seq) frames.push_back(as_batch(sc.image));
    auto dec = video_decode(model, frames);
    if (viterbi) {
      int hh = frames[0]->dim(2) / stride, hw = frames[0]->dim(3) / stride;
      for (int j = 0; j < cfg.chain.joints; ++j) {
        std::vector<TensorPtr> maps;
        for (auto& frame_probs : dec.log_probs)
          maps.push_back(frame_probs[static_cast<std::size_t>(j)]);
        auto path = viterbi_smooth(maps, cfg.eval.viterbi_lambda);
        for (std::size_t t = 0; t < path.size(); ++t) {
          dec.poses[t][static_cast<std::size_t>(j)].x =
              cell_to_image(path[t].x, stride);
          dec.poses[t][static_cast<std::size_t>(j)].y =
              cell_to_image(path[t].y, stride);
        }
        (void)hh;
        (void)hw;
      }
    }
    for (std::size_t t = 0; t < seq.size(); ++t) {
      out.predictions.push_back(from_chain_order(dec.poses[t], order));
      // Occluded joints are still annotated (the figure exists, it is just
      // not drawn); predicting through occlusion is exactly what temporal
      // models are evaluated on, so score every joint.
      Pose gt = seq[t].pose;
      for (auto& j : gt) j.visible = true;
      gts.push_back(std::move(gt));
      refs.push_back({seq[t].s_h, seq[t].s_w, seq[t].head_size});
    }
  }
  out.result = error_analysis(out.predictions, gts, refs, eval_mode(cfg),
                              cfg.eval.alpha, cfg.eval.beta);
  return out;
}

}  // namespace chainpred
