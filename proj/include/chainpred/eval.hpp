#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "chainpred/tensor.hpp"
#include "chainpred/types.hpp"

namespace chainpred {

enum class PckMode { kBbox, kHead };

// Per-figure reference sizes the thresholds are measured against.
struct EvalRef {
  double s_h = 0.0, s_w = 0.0;  // joint bounding box
  double head_size = 0.0;
};

inline double reference_size(const EvalRef& r, PckMode mode) {
  double ref = mode == PckMode::kBbox ? std::max(r.s_h, r.s_w) : r.head_size;
  if (ref <= 0.0) throw ValidationError("reference size must be positive");
  return ref;
}

struct JointEval {
  double pck = 0.0;
  double localization = 0.0;
  double joint_confusion = 0.0;
  double background = 0.0;
  long long count = 0;  // visible ground-truth joints scored
};

struct EvalResult {
  std::vector<JointEval> per_joint;
  double mean_pck = 0.0;
};

namespace detail {

inline void validate_eval_inputs(const std::vector<Pose>& preds,
                                 const std::vector<Pose>& gts,
                                 const std::vector<EvalRef>& refs) {
  if (preds.size() != gts.size() || preds.size() != refs.size())
    throw ValidationError("eval: figure count mismatch");
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i].size() != gts[i].size() ||
        (i > 0 && gts[i].size() != gts[0].size()))
      throw ValidationError("eval: joint count mismatch");
}

inline void finalize_mean(EvalResult& res) {
  double sum = 0.0;
  int counted = 0;
  for (auto& j : res.per_joint)
    if (j.count > 0) {
      sum += j.pck;
      ++counted;
    }
  res.mean_pck = counted > 0 ? sum / counted : 0.0;
}

}  // namespace detail

// Percentage of correct keypoints: a prediction is correct when its Euclidean
// distance to the ground truth is <= alpha * reference (closed boundary).
// Invisible ground-truth joints are excluded from the counts.
inline EvalResult pck(const std::vector<Pose>& preds,
                      const std::vector<Pose>& gts,
                      const std::vector<EvalRef>& refs, PckMode mode,
                      double alpha) {
  if (alpha <= 0.0) throw ValidationError("pck: alpha must be positive");
  detail::validate_eval_inputs(preds, gts, refs);
  EvalResult res;
  if (preds.empty()) return res;
  res.per_joint.resize(gts[0].size());
  std::vector<long long> correct(gts[0].size(), 0);
  for (std::size_t f = 0; f < preds.size(); ++f) {
    double thr = alpha * reference_size(refs[f], mode);
    for (std::size_t j = 0; j < gts[f].size(); ++j) {
      if (!gts[f][j].visible) continue;
      ++res.per_joint[j].count;
      double d = std::hypot(preds[f][j].x - gts[f][j].x,
                            preds[f][j].y - gts[f][j].y);
      if (d <= thr) ++correct[j];
    }
  }
  for (std::size_t j = 0; j < correct.size(); ++j)
    if (res.per_joint[j].count > 0)
      res.per_joint[j].pck = static_cast<double>(correct[j]) /
                             static_cast<double>(res.per_joint[j].count);
  detail::finalize_mean(res);
  return res;
}

// Three-class error taxonomy over the incorrect predictions, in priority
// order: localization if the distance lands in (alpha, beta] * ref; joint
// confusion if the prediction is within alpha * ref of any OTHER joint of the
// same figure; background otherwise. Together with the correct class the four
// rates partition each joint's scored predictions.
inline EvalResult error_analysis(const std::vector<Pose>& preds,
                                 const std::vector<Pose>& gts,
                                 const std::vector<EvalRef>& refs,
                                 PckMode mode, double alpha, double beta) {
  if (!(beta > alpha && alpha > 0.0))
    throw ValidationError("error_analysis: need beta > alpha > 0");
  detail::validate_eval_inputs(preds, gts, refs);
  EvalResult res;
  if (preds.empty()) return res;
  std::size_t joints = gts[0].size();
  res.per_joint.resize(joints);
  std::vector<long long> correct(joints, 0), loc(joints, 0), conf(joints, 0),
      bg(joints, 0);
  for (std::size_t f = 0; f < preds.size(); ++f) {
    double ref = reference_size(refs[f], mode);
    for (std::size_t j = 0; j < joints; ++j) {
      if (!gts[f][j].visible) continue;
      ++res.per_joint[j].count;
      double d = std::hypot(preds[f][j].x - gts[f][j].x,
                            preds[f][j].y - gts[f][j].y);
      if (d <= alpha * ref) {
        ++correct[j];
      } else if (d <= beta * ref) {
        ++loc[j];
      } else {
        bool near_other = false;
        for (std::size_t k = 0; k < joints && !near_other; ++k) {
          if (k == j) continue;
          double dk = std::hypot(preds[f][j].x - gts[f][k].x,
                                 preds[f][j].y - gts[f][k].y);
          near_other = dk <= alpha * ref;
        }
        if (near_other)
          ++conf[j];
        else
          ++bg[j];
      }
    }
  }
  for (std::size_t j = 0; j < joints; ++j) {
    auto n = res.per_joint[j].count;
    if (n == 0) continue;
    res.per_joint[j].pck = static_cast<double>(correct[j]) / n;
    res.per_joint[j].localization = static_cast<double>(loc[j]) / n;
    res.per_joint[j].joint_confusion = static_cast<double>(conf[j]) / n;
    res.per_joint[j].background = static_cast<double>(bg[j]) / n;
  }
  detail::finalize_mean(res);
  return res;
}

// CSV table plus a structured-text summary, both with fixed 6-decimal
// formatting so golden comparisons are byte-exact.
inline void write_report(const EvalResult& res,
                         const std::vector<std::string>& joint_names,
                         const std::string& csv_path,
                         const std::string& summary_path) {
  if (joint_names.size() != res.per_joint.size())
    throw ValidationError("write_report: name count mismatch");
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw ValidationError("write_report: cannot open " + csv_path);
  csv << "joint,pck,localization,joint_confusion,background\n";
  for (std::size_t j = 0; j < res.per_joint.size(); ++j) {
    auto& e = res.per_joint[j];
    csv << joint_names[j] << ',' << fmt(e.pck) << ',' << fmt(e.localization)
        << ',' << fmt(e.joint_confusion) << ',' << fmt(e.background) << '\n';
  }
  if (!csv) throw ValidationError("write_report: write failed " + csv_path);

  std::ofstream txt(summary_path, std::ios::trunc);
  if (!txt) throw ValidationError("write_report: cannot open " + summary_path);
  txt << "mean_pck " << fmt(res.mean_pck) << '\n';
  txt << "joints " << res.per_joint.size() << '\n';
  for (std::size_t j = 0; j < res.per_joint.size(); ++j) {
    auto& e = res.per_joint[j];
    txt << joint_names[j] << " pck=" << fmt(e.pck) << " count=" << e.count
        << '\n';
  }
  if (!txt) throw ValidationError("write_report: write failed " + summary_path);
}

// Binary PPM (P6) with a min-max normalized heat colormap. A constant map
// renders as uniform mid-gray. Optional pose overlay drawn as white crosses
// (heatmap is nearest-neighbor upscaled by `scale` first).
inline void emit_heatmap_image(const TensorPtr& heatmap, const Pose* overlay,
                               int scale, const std::string& path) {
  if (scale < 1) throw ValidationError("emit_heatmap_image: bad scale");
  int h = heatmap->dim(static_cast<int>(heatmap->dims.size()) - 2);
  int w = heatmap->dims.back();
  std::size_t plane = static_cast<std::size_t>(h) * w;
  if (heatmap->numel() != plane)
    throw ShapeError("emit_heatmap_image: expects a single-channel map");
  check_finite(*heatmap, "emit_heatmap_image");

  double mn = heatmap->data[0], mx = heatmap->data[0];
  for (double v : heatmap->data) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  bool flat = mx - mn <= 0.0;

  int oh = h * scale, ow = w * scale;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(oh) * ow * 3);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      unsigned char r, g, b;
      if (flat) {
        r = g = b = 128;
      } else {
        double t =
            (heatmap->data[static_cast<std::size_t>(y / scale) * w + x / scale] -
             mn) /
            (mx - mn);
        auto chan = [](double v) {
          return static_cast<unsigned char>(
              std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
        };
        r = chan(3.0 * t);
        g = chan(3.0 * t - 1.0);
        b = chan(3.0 * t - 2.0);
      }
      std::size_t o = (static_cast<std::size_t>(y) * ow + x) * 3;
      rgb[o] = r;
      rgb[o + 1] = g;
      rgb[o + 2] = b;
    }

  if (overlay) {
    auto put = [&](int x, int y) {
      if (x < 0 || y < 0 || x >= ow || y >= oh) return;
      std::size_t o = (static_cast<std::size_t>(y) * ow + x) * 3;
      rgb[o] = rgb[o + 1] = rgb[o + 2] = 255;
    };
    for (auto& j : *overlay) {
      int x = static_cast<int>(std::lround(j.x));
      int y = static_cast<int>(std::lround(j.y));
      put(x, y);
      put(x - 1, y);
      put(x + 1, y);
      put(x, y - 1);
      put(x, y + 1);
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("emit_heatmap_image: cannot open " + path);
  out << "P6\n" << ow << ' ' << oh << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()),
            static_cast<std::streamsize>(rgb.size()));
  if (!out) throw ValidationError("emit_heatmap_image: write failed " + path);
}

}  // namespace chainpred
