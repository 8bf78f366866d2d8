#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "chainpred/nets.hpp"
#include "chainpred/tensor.hpp"
#include "chainpred/types.hpp"

namespace chainpred {

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

// Disk-uniform target: every cell within Euclidean distance r of the joint
// location (heatmap coordinates) carries 1/N mass. r == 0, or a disk that
// catches no cell center, degenerates to a one-hot at the nearest cell.
struct TargetHeatmap {
  TensorPtr grid;  // [1,1,H,W], sums to 1
  double x = 0.0, y = 0.0;
  double radius = 0.0;
};

inline TargetHeatmap make_target(double x, double y, int h, int w, double r) {
  if (x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5)
    throw ValidationError("make_target: joint outside heatmap grid");
  if (r < 0.0) throw ValidationError("make_target: negative radius");
  TargetHeatmap t;
  t.grid = tensor({1, 1, h, w});
  t.x = x;
  t.y = y;
  t.radius = r;
  std::vector<std::size_t> cells;
  for (int cy = 0; cy < h; ++cy)
    for (int cx = 0; cx < w; ++cx) {
      double dx = cx - x, dy = cy - y;
      if (std::sqrt(dx * dx + dy * dy) <= r)
        cells.push_back(static_cast<std::size_t>(cy) * w + cx);
    }
  if (cells.empty()) {
    // nearest cell, row-major on ties
    double best = 1e300;
    std::size_t arg = 0;
    for (int cy = 0; cy < h; ++cy)
      for (int cx = 0; cx < w; ++cx) {
        double dx = cx - x, dy = cy - y;
        double d = dx * dx + dy * dy;
        if (d < best - 1e-12) {
          best = d;
          arg = static_cast<std::size_t>(cy) * w + cx;
        }
      }
    cells.push_back(arg);
  }
  double p = 1.0 / static_cast<double>(cells.size());
  for (std::size_t c : cells) t.grid->data[c] = p;
  return t;
}

// ---------------------------------------------------------------------------
// Scheduled sampling
// ---------------------------------------------------------------------------

struct SamplingSchedule {
  double p_min = 1.0;          // 1.0 disables sampling entirely
  std::int64_t decay_horizon = 5000;
};

// Linear decay from 1 at step 0 down to the floor.
inline double schedule_rate(std::int64_t step_count,
                            const SamplingSchedule& s) {
  if (step_count < 0) throw ValidationError("schedule_rate: negative step");
  double p = 1.0 - static_cast<double>(step_count) /
                       static_cast<double>(s.decay_horizon);
  return std::max(s.p_min, p);
}

// ---------------------------------------------------------------------------
// Chain configuration
// ---------------------------------------------------------------------------

enum class FeedbackMode { kHard, kSoft };

struct ChainConfig {
  int steps = 7;            // T: joints (single image) or frames (video)
  int joints = 7;           // video: joints decoded per frame
  int time_horizon = 3;     // T_H: feedback window (video)
  int feedback_count = -1;  // single image: -1 = full history, 0 = unchained
  bool recurrent = true;    // video: false = independent per-frame decoding
  FeedbackMode feedback_mode = FeedbackMode::kHard;
  double target_radius = 0.16;  // heatmap cells
};

// Plain convolution kernel used by the recurrence (no ReLU/BN of its own;
// the nonlinearity is applied after summation).
struct RecurrenceKernel {
  TensorPtr w, b;
  void init(int channels, Rng& rng) {
    w = tensor({channels, channels, 3, 3}, true);
    b = tensor({channels}, true);
    fill_normal(*w, rng);
  }
  TensorPtr apply(Graph& g, const TensorPtr& x) const {
    return conv2d(g, x, w, b, 1, 1);
  }
  void register_into(ParamRegistry& reg, const std::string& prefix) {
    reg.add(prefix + ".weight", w);
    reg.add(prefix + ".bias", b);
  }
};

// ---------------------------------------------------------------------------
// Single-image chain (untied weights)
// ---------------------------------------------------------------------------

struct ChainStepOut {
  TensorPtr hidden;
  TensorPtr log_probs;  // [N,1,H',W']
};

class SingleImageChain {
 public:
  NetConfig net;
  ChainConfig chain;
  Encoder encoder;
  FeedbackEncoder feedback_enc;  // e(.), shared across steps

  struct Step {
    RecurrenceKernel w_h;              // unused at t = 0
    std::vector<RecurrenceKernel> w_y; // one per conditioned predecessor
    Decoder decoder;                   // m_t
  };
  std::vector<Step> steps;

  void init(const NetConfig& net_cfg, const ChainConfig& chain_cfg, Rng& rng) {
    net = net_cfg;
    chain = chain_cfg;
    encoder.init(net, rng);
    feedback_enc.init(1, net.hidden_channels(), net, rng);
    steps.clear();
    steps.resize(static_cast<std::size_t>(chain.steps));
    for (int t = 0; t < chain.steps; ++t) {
      auto& st = steps[static_cast<std::size_t>(t)];
      if (t > 0) st.w_h.init(net.hidden_channels(), rng);
      st.w_y.resize(static_cast<std::size_t>(feedback_count_at(t)));
      for (auto& k : st.w_y) k.init(net.hidden_channels(), rng);
      st.decoder.init(net.hidden_channels(), net, rng);
    }
  }

  int feedback_count_at(int t) const {
    int full = chain.feedback_count < 0 ? chain.steps - 1
                                        : chain.feedback_count;
    return std::min(t, full);
  }

  ParamRegistry params() {
    ParamRegistry reg;
    encoder.register_into(reg, "encoder");
    feedback_enc.register_into(reg, "feedback");
    for (std::size_t t = 0; t < steps.size(); ++t) {
      std::string p = "step" + std::to_string(t);
      if (t > 0) steps[t].w_h.register_into(reg, p + ".w_h");
      for (std::size_t i = 0; i < steps[t].w_y.size(); ++i)
        steps[t].w_y[i].register_into(reg, p + ".w_y" + std::to_string(i));
      steps[t].decoder.register_into(reg, p + ".decoder");
    }
    return reg;
  }

  TensorPtr encode_image(Graph& g, const TensorPtr& image, Mode mode) {
    return encoder.forward(g, image, mode);
  }

  // e(.) on a previous-output map (hard disk encoding or soft distribution).
  TensorPtr feedback_encode(Graph& g, const TensorPtr& heatmap, Mode mode) {
    return feedback_enc.forward(g, heatmap, mode);
  }

  // One chain step. `encoded` are e(y_i) embeddings for the conditioned
  // predecessors, oldest first; must contain exactly feedback_count_at(t)
  // entries. Step 0 uses the encoder output as the hidden input directly.
  ChainStepOut chain_step(Graph& g, const TensorPtr& h_prev,
                          const std::vector<TensorPtr>& encoded, int t,
                          Mode mode) {
    if (t < 0 || t >= chain.steps)
      throw ValidationError("chain_step: step index out of range");
    auto& st = steps[static_cast<std::size_t>(t)];
    if (static_cast<int>(encoded.size()) != feedback_count_at(t))
      throw ValidationError("chain_step: wrong feedback count");
    TensorPtr h;
    if (t == 0) {
      h = h_prev;  // h_0 = CNN(X)
    } else {
      auto acc = st.w_h.apply(g, h_prev);
      for (std::size_t i = 0; i < encoded.size(); ++i)
        acc = add(g, acc, st.w_y[i].apply(g, encoded[i]));
      h = relu(g, acc);
    }
    auto scores = st.decoder.forward(g, h, mode);
    return {h, spatial_log_softmax(g, scores)};
  }

  int heatmap_size(int image_size) const {
    return image_size / net.heatmap_stride();
  }
};

// ---------------------------------------------------------------------------
// Video chain (tied weights)
// ---------------------------------------------------------------------------

class VideoChain {
 public:
  NetConfig net;
  ChainConfig chain;
  Encoder encoder;                 // CNN(X_t), shared across frames
  FeedbackEncoder feedback_enc;    // e(.), input = J joint maps
  RecurrenceKernel w_h;            // tied across time
  std::vector<RecurrenceKernel> w_y;  // one per lag, 1..T_H
  MultiHeadDecoder decoder;        // shared trunk + per-joint heads
  // ReLU -> BN on the recurrent hidden state, tied across time. Without it
  // the tied recurrence is free to grow the hidden scale geometrically per
  // frame: the per-frame batch statistics inside the decoder re-normalize
  // during training, hiding the blow-up from the loss, while the running
  // statistics used at eval cannot track a per-frame scale.
  TensorPtr h_gamma, h_beta;
  BatchNormState h_bn;

  void init(const NetConfig& net_cfg, const ChainConfig& chain_cfg, Rng& rng) {
    net = net_cfg;
    chain = chain_cfg;
    encoder.init(net, rng);
    if (chain.time_horizon > 0)
      feedback_enc.init(chain.joints, net.hidden_channels(), net, rng);
    if (chain.recurrent) {
      w_h.init(net.hidden_channels(), rng);
      int c = net.hidden_channels();
      h_gamma = tensor({c}, std::vector<double>(static_cast<std::size_t>(c), 1.0), true);
      h_beta = tensor({c}, true);
      h_bn = BatchNormState(c);
    }
    w_y.resize(static_cast<std::size_t>(std::max(0, chain.time_horizon)));
    for (auto& k : w_y) k.init(net.hidden_channels(), rng);
    decoder.init(net.hidden_channels(), chain.joints, net, rng);
  }

  ParamRegistry params() {
    ParamRegistry reg;
    encoder.register_into(reg, "encoder");
    if (chain.time_horizon > 0) feedback_enc.register_into(reg, "feedback");
    if (chain.recurrent) {
      w_h.register_into(reg, "w_h");
      reg.add("w_h.gamma", h_gamma);
      reg.add("w_h.beta", h_beta);
      reg.add_state("w_h.running_mean", h_bn.running_mean);
      reg.add_state("w_h.running_var", h_bn.running_var);
    }
    for (std::size_t i = 0; i < w_y.size(); ++i)
      w_y[i].register_into(reg, "w_y" + std::to_string(i));
    decoder.register_into(reg, "decoder");
    return reg;
  }

  // One video step. `encoded` are e(y_{t-1}), e(y_{t-2}), ... most recent
  // first, exactly min(t, T_H) entries (or none when feedback is disabled).
  // Returns per-joint log-prob maps.
  struct VideoStepOut {
    TensorPtr hidden;
    std::vector<TensorPtr> log_probs;  // per joint
  };
  VideoStepOut video_chain_step(Graph& g, const TensorPtr& h_prev,
                                const TensorPtr& frame,
                                const std::vector<TensorPtr>& encoded, int t,
                                Mode mode) {
    int expected = chain.time_horizon > 0
                       ? std::min(t, chain.time_horizon)
                       : 0;
    if (static_cast<int>(encoded.size()) != expected)
      throw ValidationError("video_chain_step: wrong feedback count");
    auto feat = encoder.forward(g, frame, mode);
    TensorPtr h;
    if (!chain.recurrent) {
      h = feat;  // per-frame baseline
    } else if (t == 0) {
      // h_0 = sigma(CNN(X_0)): same ReLU -> BN as later frames, so every
      // frame's hidden state shares one distribution and the eval-time
      // running statistics fit all of them.
      h = batchnorm(g, relu(g, feat), h_gamma, h_beta, h_bn, mode);
    } else {
      auto acc = add(g, w_h.apply(g, h_prev), feat);
      for (std::size_t i = 0; i < encoded.size(); ++i)
        acc = add(g, acc, w_y[i].apply(g, encoded[i]));
      h = batchnorm(g, relu(g, acc), h_gamma, h_beta, h_bn, mode);
    }
    auto scores = decoder.forward(g, h, mode);
    VideoStepOut out;
    out.hidden = h;
    out.log_probs.reserve(scores.size());
    for (auto& s : scores) out.log_probs.push_back(spatial_log_softmax(g, s));
    return out;
  }

  TensorPtr feedback_encode(Graph& g, const TensorPtr& joint_maps, Mode mode) {
    return feedback_enc.forward(g, joint_maps, mode);
  }
};

// ---------------------------------------------------------------------------
// Forward passes with scheduled sampling
// ---------------------------------------------------------------------------

// Sample a cell from a predicted distribution (row-major cumulative scan).
inline Cell sample_cell(const double* probs, int h, int w, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  int last = h * w - 1;
  for (int i = 0; i <= last; ++i) {
    acc += probs[i];
    if (u < acc || i == last) return {i % w, i / w};
  }
  return {last % w, last / w};
}

inline Cell argmax_cell(const double* v, int h, int w) {
  int best = 0;
  for (int i = 1; i < h * w; ++i)
    if (v[i] > v[best]) best = i;  // strict: row-major tie-break
  return {best % w, best / w};
}

struct SingleForward {
  std::vector<TensorPtr> log_probs;  // per step, [N,1,H',W']
  TensorPtr loss;
};

// Training/teacher-forced forward for a batch of single images.
// `poses` are ground truth in image pixels; p_truth is the probability of
// feeding ground truth per previous joint per example.
inline SingleForward forward_single_image(SingleImageChain& model, Graph& g,
                                          const TensorPtr& images,
                                          const std::vector<Pose>& poses,
                                          double p_truth, Rng& rng,
                                          Mode mode) {
  int n = images->dim(0);
  if (static_cast<int>(poses.size()) != n)
    throw ValidationError("forward_single_image: pose count mismatch");
  int t_steps = model.chain.steps;
  for (auto& p : poses)
    if (static_cast<int>(p.size()) != t_steps)
      throw ValidationError("forward_single_image: joint count mismatch");
  int stride = model.net.heatmap_stride();
  int hh = images->dim(2) / stride, hw = images->dim(3) / stride;
  double r = model.chain.target_radius;
  bool soft = model.chain.feedback_mode == FeedbackMode::kSoft;

  // Ground-truth target grids, also reused as hard feedback encodings.
  std::vector<std::vector<TensorPtr>> gt_grid(
      static_cast<std::size_t>(n),
      std::vector<TensorPtr>(static_cast<std::size_t>(t_steps)));
  for (int e = 0; e < n; ++e)
    for (int j = 0; j < t_steps; ++j) {
      auto& jt = poses[static_cast<std::size_t>(e)][static_cast<std::size_t>(j)];
      gt_grid[static_cast<std::size_t>(e)][static_cast<std::size_t>(j)] =
          make_target(image_to_cell(jt.x, stride), image_to_cell(jt.y, stride),
                      hh, hw, r)
              .grid;
    }

  SingleForward out;
  std::vector<TensorPtr> losses;
  std::vector<TensorPtr> probs_per_step;  // soft feedback path
  auto h = model.encode_image(g, images, mode);
  std::size_t plane = static_cast<std::size_t>(hh) * hw;

  for (int t = 0; t < t_steps; ++t) {
    int fc = model.feedback_count_at(t);
    std::vector<TensorPtr> encoded;
    encoded.reserve(static_cast<std::size_t>(fc));
    for (int i = t - fc; i < t; ++i) {
      // Per-example choice: ground truth vs the model's own output.
      std::vector<bool> use_pred(static_cast<std::size_t>(n));
      for (int e = 0; e < n; ++e)
        use_pred[static_cast<std::size_t>(e)] = rng.uniform() >= p_truth;

      TensorPtr fb;
      if (soft) {
        // Differentiable path: copy rows from the predicted distribution
        // tensor where sampling chose the model, constants elsewhere.
        auto pred = probs_per_step[static_cast<std::size_t>(i)];
        fb = g.make({n, 1, hh, hw});
        for (int e = 0; e < n; ++e) {
          std::size_t off = static_cast<std::size_t>(e) * plane;
          const double* src =
              use_pred[static_cast<std::size_t>(e)]
                  ? &pred->data[off]
                  : &gt_grid[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)]->data[0];
          std::copy_n(src, plane, &fb->data[off]);
        }
        g.push([pred, fb, use_pred, n, plane] {
          pred->ensure_grad();
          for (int e = 0; e < n; ++e)
            if (use_pred[static_cast<std::size_t>(e)]) {
              std::size_t off = static_cast<std::size_t>(e) * plane;
              for (std::size_t k = 0; k < plane; ++k)
                pred->grad[off + k] += fb->grad[off + k];
            }
        });
      } else {
        // Hard path: disk encodings only, no gradient through feedback.
        fb = tensor({n, 1, hh, hw});
        for (int e = 0; e < n; ++e) {
          std::size_t off = static_cast<std::size_t>(e) * plane;
          if (use_pred[static_cast<std::size_t>(e)]) {
            auto& lp = out.log_probs[static_cast<std::size_t>(i)];
            std::vector<double> p(plane);
            for (std::size_t k = 0; k < plane; ++k)
              p[k] = std::exp(lp->data[off + k]);
            Cell c = sample_cell(p.data(), hh, hw, rng);
            auto disk = make_target(c.x, c.y, hh, hw, r).grid;
            std::copy_n(disk->data.data(), plane, &fb->data[off]);
          } else {
            std::copy_n(
                gt_grid[static_cast<std::size_t>(e)][static_cast<std::size_t>(i)]->data.data(),
                plane, &fb->data[off]);
          }
        }
      }
      encoded.push_back(model.feedback_encode(g, fb, mode));
    }

    auto step = model.chain_step(g, h, encoded, t, mode);
    h = step.hidden;
    out.log_probs.push_back(step.log_probs);
    if (soft) {
      // exp(log p), differentiable, for later feedback
      auto lp = step.log_probs;
      auto pr = g.make(lp->dims);
      for (std::size_t k = 0; k < lp->numel(); ++k)
        pr->data[k] = std::exp(lp->data[k]);
      g.push([lp, pr] {
        lp->ensure_grad();
        for (std::size_t k = 0; k < lp->numel(); ++k)
          lp->grad[k] += pr->data[k] * pr->grad[k];
      });
      probs_per_step.push_back(pr);
    }

    // Batch target for the loss
    auto target = tensor({n, 1, hh, hw});
    for (int e = 0; e < n; ++e)
      std::copy_n(
          gt_grid[static_cast<std::size_t>(e)][static_cast<std::size_t>(t)]->data.data(),
          plane, &target->data[static_cast<std::size_t>(e) * plane]);
    losses.push_back(heatmap_cross_entropy(g, step.log_probs, target));
  }
  out.loss = add_scalars(g, losses);
  return out;
}

struct VideoForward {
  // log_probs[frame][joint]
  std::vector<std::vector<TensorPtr>> log_probs;
  TensorPtr loss;
};

// Forward over a batch of videos; frames[t] is a [N,1,H,W] batch of frame t
// across the sequences, poses[e][t] the ground truth for example e, frame t.
inline VideoForward forward_video(VideoChain& model, Graph& g,
                                  const std::vector<TensorPtr>& frames,
                                  const std::vector<std::vector<Pose>>& poses,
                                  double p_truth, Rng& rng, Mode mode) {
  int t_frames = static_cast<int>(frames.size());
  if (t_frames == 0) throw ValidationError("forward_video: no frames");
  int n = frames[0]->dim(0);
  int j_cnt = model.chain.joints;
  int stride = model.net.heatmap_stride();
  int hh = frames[0]->dim(2) / stride, hw = frames[0]->dim(3) / stride;
  double r = model.chain.target_radius;
  bool soft = model.chain.feedback_mode == FeedbackMode::kSoft;
  std::size_t plane = static_cast<std::size_t>(hh) * hw;

  VideoForward out;
  std::vector<TensorPtr> losses;
  // Per-frame feedback maps already stacked to [N,J,hh,hw]; hard path keeps
  // constants, soft path keeps graph tensors.
  std::vector<TensorPtr> fb_history;
  TensorPtr h;

  for (int t = 0; t < t_frames; ++t) {
    int window = model.chain.time_horizon > 0
                     ? std::min(t, model.chain.time_horizon)
                     : 0;
    std::vector<TensorPtr> encoded;
    for (int lag = 1; lag <= window; ++lag)
      encoded.push_back(model.feedback_encode(
          g, fb_history[static_cast<std::size_t>(t - lag)], mode));

    auto step = model.video_chain_step(g, h, frames[static_cast<std::size_t>(t)],
                                       encoded, t, mode);
    h = step.hidden;
    out.log_probs.push_back(step.log_probs);

    // Loss over all joints of this frame
    for (int j = 0; j < j_cnt; ++j) {
      auto target = tensor({n, 1, hh, hw});
      for (int e = 0; e < n; ++e) {
        auto& jt = poses[static_cast<std::size_t>(e)][static_cast<std::size_t>(t)]
                        [static_cast<std::size_t>(j)];
        auto grid = make_target(image_to_cell(jt.x, stride),
                                image_to_cell(jt.y, stride), hh, hw, r)
                        .grid;
        std::copy_n(grid->data.data(), plane,
                    &target->data[static_cast<std::size_t>(e) * plane]);
      }
      losses.push_back(
          heatmap_cross_entropy(g, step.log_probs[static_cast<std::size_t>(j)], target));
    }

    if (model.chain.time_horizon > 0) {
      // Build this frame's feedback map for future steps.
      std::vector<bool> use_pred(static_cast<std::size_t>(n));
      for (int e = 0; e < n; ++e)
        use_pred[static_cast<std::size_t>(e)] = rng.uniform() >= p_truth;
      auto fb = soft ? g.make({n, j_cnt, hh, hw}) : tensor({n, j_cnt, hh, hw});
      for (int e = 0; e < n; ++e)
        for (int j = 0; j < j_cnt; ++j) {
          std::size_t off =
              (static_cast<std::size_t>(e) * j_cnt + j) * plane;
          if (use_pred[static_cast<std::size_t>(e)]) {
            auto& lp = step.log_probs[static_cast<std::size_t>(j)];
            std::size_t src = static_cast<std::size_t>(e) * plane;
            if (soft) {
              for (std::size_t k = 0; k < plane; ++k)
                fb->data[off + k] = std::exp(lp->data[src + k]);
            } else {
              std::vector<double> p(plane);
              for (std::size_t k = 0; k < plane; ++k)
                p[k] = std::exp(lp->data[src + k]);
              Cell c = sample_cell(p.data(), hh, hw, rng);
              auto disk = make_target(c.x, c.y, hh, hw, r).grid;
              std::copy_n(disk->data.data(), plane, &fb->data[off]);
            }
          } else {
            auto& jt = poses[static_cast<std::size_t>(e)][static_cast<std::size_t>(t)]
                            [static_cast<std::size_t>(j)];
            auto grid = make_target(image_to_cell(jt.x, stride),
                                    image_to_cell(jt.y, stride), hh, hw, r)
                            .grid;
            std::copy_n(grid->data.data(), plane, &fb->data[off]);
          }
        }
      if (soft) {
        // route gradient back into the log-prob tensors of this frame
        auto lps = step.log_probs;
        g.push([lps, fb, use_pred, n, j_cnt, plane] {
          for (int e = 0; e < n; ++e) {
            if (!use_pred[static_cast<std::size_t>(e)]) continue;
            for (int j = 0; j < j_cnt; ++j) {
              auto& lp = lps[static_cast<std::size_t>(j)];
              lp->ensure_grad();
              std::size_t off = (static_cast<std::size_t>(e) * j_cnt + j) * plane;
              std::size_t src = static_cast<std::size_t>(e) * plane;
              for (std::size_t k = 0; k < plane; ++k)
                lp->grad[src + k] += fb->data[off + k] * fb->grad[off + k];
            }
          }
        });
      }
      fb_history.push_back(fb);
    }
  }
  out.loss = add_scalars(g, losses);
  return out;
}

}  // namespace chainpred
