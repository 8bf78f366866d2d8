#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "chainpred/chain.hpp"
#include "chainpred/nets.hpp"
#include "chainpred/tensor.hpp"
#include "chainpred/types.hpp"

namespace chainpred {

// Partial joint assignment during beam search.
struct BeamHypothesis {
  std::vector<Cell> chosen;  // locations for steps 0..t-1
  double cum_log_prob = 0.0;
  TensorPtr hidden;
};

struct DecodeResult {
  Pose pose;                // image pixel coordinates (cell centers)
  std::vector<Cell> cells;  // heatmap cells
  double log_prob = 0.0;    // sum of per-step conditional log-probs
};

namespace detail {

inline Pose cells_to_pose(const std::vector<Cell>& cells, int stride) {
  Pose p;
  p.reserve(cells.size());
  for (auto& c : cells)
    p.push_back({cell_to_image(c.x, stride), cell_to_image(c.y, stride), true});
  return p;
}

// Deterministic hypothesis order: higher score first; ties prefer the
// earlier-step smaller row-major location.
inline bool hyp_before(const BeamHypothesis& a, const BeamHypothesis& b,
                       int w) {
  if (a.cum_log_prob != b.cum_log_prob) return a.cum_log_prob > b.cum_log_prob;
  for (std::size_t i = 0; i < a.chosen.size() && i < b.chosen.size(); ++i) {
    int ia = a.chosen[i].y * w + a.chosen[i].x;
    int ib = b.chosen[i].y * w + b.chosen[i].x;
    if (ia != ib) return ia < ib;
  }
  return a.chosen.size() < b.chosen.size();
}

// Encoded hard feedback for the predecessors step t conditions on.
inline std::vector<TensorPtr> encode_chosen(SingleImageChain& model, Graph& g,
                                            const std::vector<Cell>& chosen,
                                            int t, int hh, int hw) {
  int fc = model.feedback_count_at(t);
  std::vector<TensorPtr> encoded;
  encoded.reserve(static_cast<std::size_t>(fc));
  for (int i = t - fc; i < t; ++i) {
    auto disk = make_target(chosen[static_cast<std::size_t>(i)].x,
                            chosen[static_cast<std::size_t>(i)].y, hh, hw,
                            model.chain.target_radius)
                    .grid;
    encoded.push_back(model.feedback_encode(g, disk, Mode::kEval));
  }
  return encoded;
}

}  // namespace detail

// Re-score a fixed cell assignment through the exact chained model.
inline double score_cells(SingleImageChain& model, const TensorPtr& image,
                          const std::vector<Cell>& cells) {
  if (static_cast<int>(cells.size()) != model.chain.steps)
    throw ValidationError("score_cells: wrong assignment length");
  int hh = model.heatmap_size(image->dim(2));
  int hw = model.heatmap_size(image->dim(3));
  Graph g;
  auto h = model.encode_image(g, image, Mode::kEval);
  double total = 0.0;
  for (int t = 0; t < model.chain.steps; ++t) {
    auto encoded = detail::encode_chosen(model, g, cells, t, hh, hw);
    auto step = model.chain_step(g, h, encoded, t, Mode::kEval);
    h = step.hidden;
    auto& c = cells[static_cast<std::size_t>(t)];
    total += step.log_probs->data[static_cast<std::size_t>(c.y) * hw + c.x];
  }
  return total;
}

// Beam search with hard feedback: every hypothesis re-encodes its chosen
// locations as disk heatmaps, expands with its top-B locations, and the
// global top B by cumulative log-probability survive.
inline DecodeResult beam_search(SingleImageChain& model, const TensorPtr& image,
                                int beam) {
  if (beam < 1) throw ValidationError("beam_search: B must be >= 1");
  int hh = model.heatmap_size(image->dim(2));
  int hw = model.heatmap_size(image->dim(3));
  int plane = hh * hw;
  Graph g;
  auto h0 = model.encode_image(g, image, Mode::kEval);

  std::vector<BeamHypothesis> beams(1);
  beams[0].hidden = h0;
  for (int t = 0; t < model.chain.steps; ++t) {
    std::vector<BeamHypothesis> candidates;
    candidates.reserve(beams.size() * static_cast<std::size_t>(beam));
    for (auto& hyp : beams) {
      auto encoded = detail::encode_chosen(model, g, hyp.chosen, t, hh, hw);
      auto step = model.chain_step(g, t == 0 ? h0 : hyp.hidden, encoded, t,
                                   Mode::kEval);
      // top-B locations of this hypothesis, ties row-major
      std::vector<int> order(static_cast<std::size_t>(plane));
      for (int i = 0; i < plane; ++i) order[static_cast<std::size_t>(i)] = i;
      const double* lp = step.log_probs->data.data();
      std::stable_sort(order.begin(), order.end(),
                       [lp](int a, int b) { return lp[a] > lp[b]; });
      int take = std::min(beam, plane);
      for (int k = 0; k < take; ++k) {
        int idx = order[static_cast<std::size_t>(k)];
        BeamHypothesis next = hyp;
        next.chosen.push_back({idx % hw, idx / hw});
        next.cum_log_prob += lp[idx];
        next.hidden = step.hidden;
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [hw](const BeamHypothesis& a, const BeamHypothesis& b) {
                       return detail::hyp_before(a, b, hw);
                     });
    if (static_cast<int>(candidates.size()) > beam)
      candidates.resize(static_cast<std::size_t>(beam));
    beams = std::move(candidates);
  }

  DecodeResult res;
  res.cells = beams[0].chosen;
  res.log_prob = beams[0].cum_log_prob;
  res.pose = detail::cells_to_pose(res.cells, model.net.heatmap_stride());
  return res;
}

// Exhaustive decoding: enumerates all (H'W')^T assignments via depth-first
// search, sharing each prefix's forward computation. Assignments are visited
// in lexicographic row-major order and only strictly better scores replace
// the incumbent, matching beam search's tie-breaking.
inline DecodeResult brute_force_decode(SingleImageChain& model,
                                       const TensorPtr& image) {
  int hh = model.heatmap_size(image->dim(2));
  int hw = model.heatmap_size(image->dim(3));
  int plane = hh * hw;
  double total = std::pow(static_cast<double>(plane), model.chain.steps);
  if (total > 1e7)
    throw ValidationError("brute_force_decode: search space exceeds 1e7");

  Graph g;
  auto h0 = model.encode_image(g, image, Mode::kEval);
  // Feedback encodings depend only on the cell, so cache them.
  std::vector<TensorPtr> enc_cache(static_cast<std::size_t>(plane));
  auto encode_cell = [&](const Cell& c) {
    std::size_t idx = static_cast<std::size_t>(c.y) * hw + c.x;
    if (!enc_cache[idx]) {
      auto disk = make_target(c.x, c.y, hh, hw, model.chain.target_radius).grid;
      enc_cache[idx] = model.feedback_encode(g, disk, Mode::kEval);
    }
    return enc_cache[idx];
  };

  DecodeResult best;
  best.log_prob = -1e300;
  std::vector<Cell> chosen;
  std::function<void(const TensorPtr&, double, int)> dfs =
      [&](const TensorPtr& h, double cum, int t) {
        int fc = model.feedback_count_at(t);
        std::vector<TensorPtr> encoded;
        encoded.reserve(static_cast<std::size_t>(fc));
        for (int i = t - fc; i < t; ++i)
          encoded.push_back(encode_cell(chosen[static_cast<std::size_t>(i)]));
        auto step = model.chain_step(g, t == 0 ? h0 : h, encoded, t, Mode::kEval);
        const double* lp = step.log_probs->data.data();
        for (int idx = 0; idx < plane; ++idx) {
          chosen.push_back({idx % hw, idx / hw});
          double c = cum + lp[idx];
          if (t + 1 == model.chain.steps) {
            if (c > best.log_prob) {
              best.log_prob = c;
              best.cells = chosen;
            }
          } else {
            dfs(step.hidden, c, t + 1);
          }
          chosen.pop_back();
        }
      };
  dfs(h0, 0.0, 0);
  best.pose = detail::cells_to_pose(best.cells, model.net.heatmap_stride());
  return best;
}

// Soft chaining: one forward pass feeding full predicted distributions as
// feedback; per-step argmax.
struct SoftDecodeResult {
  DecodeResult result;
  std::vector<TensorPtr> distributions;  // per step, [1,1,H',W'] probabilities
};

inline SoftDecodeResult soft_decode(SingleImageChain& model,
                                    const TensorPtr& image) {
  int hh = model.heatmap_size(image->dim(2));
  int hw = model.heatmap_size(image->dim(3));
  std::size_t plane = static_cast<std::size_t>(hh) * hw;
  Graph g;
  auto h = model.encode_image(g, image, Mode::kEval);
  SoftDecodeResult out;
  for (int t = 0; t < model.chain.steps; ++t) {
    int fc = model.feedback_count_at(t);
    std::vector<TensorPtr> encoded;
    for (int i = t - fc; i < t; ++i)
      encoded.push_back(model.feedback_encode(
          g, out.distributions[static_cast<std::size_t>(i)], Mode::kEval));
    auto step = model.chain_step(g, h, encoded, t, Mode::kEval);
    h = step.hidden;
    auto probs = tensor({1, 1, hh, hw});
    for (std::size_t k = 0; k < plane; ++k)
      probs->data[k] = std::exp(step.log_probs->data[k]);
    out.distributions.push_back(probs);
    Cell c = argmax_cell(probs->data.data(), hh, hw);
    out.result.cells.push_back(c);
    out.result.log_prob += step.log_probs->data[static_cast<std::size_t>(c.y) * hw + c.x];
  }
  out.result.pose =
      detail::cells_to_pose(out.result.cells, model.net.heatmap_stride());
  return out;
}

// Oracle chaining: feedback is the ground-truth disk encoding of every
// conditioned predecessor; per-step argmax.
inline DecodeResult oracle_decode(SingleImageChain& model,
                                  const TensorPtr& image,
                                  const Pose& ground_truth) {
  if (static_cast<int>(ground_truth.size()) != model.chain.steps)
    throw ValidationError("oracle_decode: pose length mismatch");
  int stride = model.net.heatmap_stride();
  int hh = model.heatmap_size(image->dim(2));
  int hw = model.heatmap_size(image->dim(3));
  Graph g;
  auto h = model.encode_image(g, image, Mode::kEval);
  DecodeResult out;
  for (int t = 0; t < model.chain.steps; ++t) {
    int fc = model.feedback_count_at(t);
    std::vector<TensorPtr> encoded;
    for (int i = t - fc; i < t; ++i) {
      auto& jt = ground_truth[static_cast<std::size_t>(i)];
      auto disk = make_target(image_to_cell(jt.x, stride),
                              image_to_cell(jt.y, stride), hh, hw,
                              model.chain.target_radius)
                      .grid;
      encoded.push_back(model.feedback_encode(g, disk, Mode::kEval));
    }
    auto step = model.chain_step(g, h, encoded, t, Mode::kEval);
    h = step.hidden;
    Cell c = argmax_cell(step.log_probs->data.data(), hh, hw);
    out.cells.push_back(c);
    out.log_prob += step.log_probs->data[static_cast<std::size_t>(c.y) * hw + c.x];
  }
  out.pose = detail::cells_to_pose(out.cells, stride);
  return out;
}

// Horizontally mirror a [N,C,H,W] tensor in place-free fashion.
inline TensorPtr mirror_horizontal(const TensorPtr& in) {
  auto out = tensor(in->dims);
  int w = in->dims.back();
  std::size_t rows = in->numel() / static_cast<std::size_t>(w);
  for (std::size_t r = 0; r < rows; ++r)
    for (int x = 0; x < w; ++x)
      out->data[r * w + static_cast<std::size_t>(w - 1 - x)] =
          in->data[r * w + static_cast<std::size_t>(x)];
  return out;
}

// Flip augmentation at inference: average the soft-decode distributions of
// the image and its mirror (mirrored back, left/right channels swapped).
inline DecodeResult flip_average(
    SingleImageChain& model, const TensorPtr& image,
    const std::vector<std::pair<int, int>>& pairs) {
  int t_steps = model.chain.steps;
  for (auto& [l, r] : pairs)
    if (l < 0 || r < 0 || l >= t_steps || r >= t_steps || l == r)
      throw ValidationError("flip_average: bad joint pair indices");
  auto plain = soft_decode(model, image);
  auto flipped = soft_decode(model, mirror_horizontal(image));

  std::vector<TensorPtr> mirrored(flipped.distributions.size());
  for (std::size_t t = 0; t < mirrored.size(); ++t)
    mirrored[t] = mirror_horizontal(flipped.distributions[t]);
  for (auto& [l, r] : pairs)
    std::swap(mirrored[static_cast<std::size_t>(l)],
              mirrored[static_cast<std::size_t>(r)]);

  int hh = model.heatmap_size(image->dim(2));
  int hw = model.heatmap_size(image->dim(3));
  DecodeResult out;
  for (int t = 0; t < t_steps; ++t) {
    auto avg = tensor({1, 1, hh, hw});
    for (std::size_t k = 0; k < avg->numel(); ++k)
      avg->data[k] = 0.5 * (plain.distributions[static_cast<std::size_t>(t)]->data[k] +
                            mirrored[static_cast<std::size_t>(t)]->data[k]);
    Cell c = argmax_cell(avg->data.data(), hh, hw);
    out.cells.push_back(c);
    out.log_prob += std::log(std::max(
        avg->data[static_cast<std::size_t>(c.y) * hw + c.x], 1e-300));
  }
  out.pose = detail::cells_to_pose(out.cells, model.net.heatmap_stride());
  return out;
}

// Viterbi temporal smoothing for one joint: maximizes
//   sum_t log p_t(loc_t) - lambda * sum_t ||loc_t - loc_{t-1}||
// by dynamic programming. Ties broken row-major.
inline std::vector<Cell> viterbi_smooth(
    const std::vector<TensorPtr>& per_frame_log_probs, double lambda) {
  if (per_frame_log_probs.empty())
    throw ValidationError("viterbi_smooth: no frames");
  if (lambda < 0.0) throw ValidationError("viterbi_smooth: negative lambda");
  int h = per_frame_log_probs[0]->dim(2);
  int w = per_frame_log_probs[0]->dim(3);
  int plane = h * w;
  for (auto& f : per_frame_log_probs)
    if (f->dim(2) != h || f->dim(3) != w)
      throw ShapeError("viterbi_smooth: frame dims mismatch");
  int frames = static_cast<int>(per_frame_log_probs.size());

  std::vector<double> score(static_cast<std::size_t>(plane));
  std::vector<std::vector<int>> back(
      static_cast<std::size_t>(frames),
      std::vector<int>(static_cast<std::size_t>(plane), -1));
  for (int i = 0; i < plane; ++i)
    score[static_cast<std::size_t>(i)] = per_frame_log_probs[0]->data[static_cast<std::size_t>(i)];

  std::vector<double> next(static_cast<std::size_t>(plane));
  for (int t = 1; t < frames; ++t) {
    for (int c = 0; c < plane; ++c) {
      int cx = c % w, cy = c / w;
      double best = -1e300;
      int arg = -1;
      for (int p = 0; p < plane; ++p) {
        int px = p % w, py = p / w;
        double cand = score[static_cast<std::size_t>(p)] -
                      lambda * std::hypot(cx - px, cy - py);
        if (cand > best) {  // strict: first (row-major) argmax wins
          best = cand;
          arg = p;
        }
      }
      next[static_cast<std::size_t>(c)] =
          best + per_frame_log_probs[static_cast<std::size_t>(t)]->data[static_cast<std::size_t>(c)];
      back[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)] = arg;
    }
    score = next;
  }

  int end = 0;
  for (int i = 1; i < plane; ++i)
    if (score[static_cast<std::size_t>(i)] > score[static_cast<std::size_t>(end)]) end = i;
  std::vector<Cell> path(static_cast<std::size_t>(frames));
  int cur = end;
  for (int t = frames - 1; t >= 0; --t) {
    path[static_cast<std::size_t>(t)] = {cur % w, cur / w};
    if (t > 0) cur = back[static_cast<std::size_t>(t)][static_cast<std::size_t>(cur)];
  }
  return path;
}

// Deterministic video decoding: feed the argmax of each previous frame's
// predicted maps as hard disk feedback. Returns per-frame poses and the
// per-frame per-joint probability maps (for Viterbi smoothing).
struct VideoDecodeResult {
  std::vector<Pose> poses;                          // [frame]
  std::vector<std::vector<TensorPtr>> log_probs;    // [frame][joint]
};

inline VideoDecodeResult video_decode(VideoChain& model,
                                      const std::vector<TensorPtr>& frames) {
  if (frames.empty()) throw ValidationError("video_decode: no frames");
  int stride = model.net.heatmap_stride();
  int hh = frames[0]->dim(2) / stride, hw = frames[0]->dim(3) / stride;
  std::size_t plane = static_cast<std::size_t>(hh) * hw;
  int j_cnt = model.chain.joints;
  Graph g;
  VideoDecodeResult out;
  std::vector<TensorPtr> fb_history;
  TensorPtr h;
  for (int t = 0; t < static_cast<int>(frames.size()); ++t) {
    int window = model.chain.time_horizon > 0
                     ? std::min(t, model.chain.time_horizon)
                     : 0;
    std::vector<TensorPtr> encoded;
    for (int lag = 1; lag <= window; ++lag)
      encoded.push_back(model.feedback_encode(
          g, fb_history[static_cast<std::size_t>(t - lag)], Mode::kEval));
    auto step = model.video_chain_step(g, h, frames[static_cast<std::size_t>(t)],
                                       encoded, t, Mode::kEval);
    h = step.hidden;
    out.log_probs.push_back(step.log_probs);

    Pose pose;
    auto fb = tensor({1, j_cnt, hh, hw});
    for (int j = 0; j < j_cnt; ++j) {
      auto& lp = step.log_probs[static_cast<std::size_t>(j)];
      Cell c = argmax_cell(lp->data.data(), hh, hw);
      pose.push_back({cell_to_image(c.x, stride), cell_to_image(c.y, stride),
                      true});
      if (model.chain.time_horizon > 0) {
        std::size_t off = static_cast<std::size_t>(j) * plane;
        if (model.chain.feedback_mode == FeedbackMode::kSoft) {
          // Soft chaining: feed the full distribution forward so later
          // frames see every hypothesis, not a single committed cell.
          for (std::size_t k = 0; k < plane; ++k)
            fb->data[off + k] = std::exp(lp->data[k]);
        } else {
          auto disk =
              make_target(c.x, c.y, hh, hw, model.chain.target_radius).grid;
          std::copy_n(disk->data.data(), plane, &fb->data[off]);
        }
      }
    }
    out.poses.push_back(std::move(pose));
    if (model.chain.time_horizon > 0) fb_history.push_back(fb);
  }
  return out;
}

}  // namespace chainpred
