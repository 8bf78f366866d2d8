#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "chainpred/rng.hpp"
#include "chainpred/tensor.hpp"
#include "chainpred/types.hpp"

namespace chainpred {

// Joint order: head, neck, l_elbow, r_elbow, l_wrist, r_wrist, pelvis.
// Left and right limbs render identically. Upper arms hang in disjoint,
// mirror-image angle ranges, so elbow side is positionally determined; the
// forearms bend through a wide range, so wrists frequently cross the body
// midline and their sided labels cannot be read off position alone.
enum JointId {
  kHead = 0,
  kNeck = 1,
  kLElbow = 2,
  kRElbow = 3,
  kLWrist = 4,
  kRWrist = 5,
  kPelvis = 6,
  kJointCount = 7
};

inline const char* joint_name(int j) {
  static const char* names[] = {"head",    "neck",    "l_elbow", "r_elbow",
                                "l_wrist", "r_wrist", "pelvis"};
  return names[j];
}

// (left, right) channel pairs for horizontal-flip augmentation/averaging.
inline std::vector<std::pair<int, int>> flip_pairs() {
  return {{kLElbow, kRElbow}, {kLWrist, kRWrist}};
}

struct SceneConfig {
  int image_size = 64;
  int joints = kJointCount;
  double noise = 0.04;      // uniform pixel noise amplitude
  int clutter = 3;          // number of background strokes
  double occlusion_rate = 0.0;  // video: full-arm dropout probability
  double occlusion_persistence = 0.6;  // video: burst continuation prob
  double forearm_rate = 1.0;    // video: per-frame forearm visibility prob
  double max_angle_step = 0.12; // video: per-frame random-walk bound (rad)
  double max_shift_step = 1.0;  // video: pelvis drift bound (px)
};

struct Scene {
  TensorPtr image;  // [1,H,W], grayscale in [0,1]
  Pose pose;        // image pixel coordinates
  double s_h = 0.0, s_w = 0.0;  // tight bbox of the joints
  double head_size = 0.0;
  std::uint32_t seed = 0;
};

namespace detail {

// Round to the nearest float32 value. Kept out of line: GCC 11's -O3
// vectorizer drops the scalar tail of the strided double->float->double
// loop over Joint structs, leaving the last joint unquantized.
#if defined(__GNUC__)
__attribute__((noinline))
#endif
inline double
quantize32(double v) {
  return static_cast<double>(static_cast<float>(v));
}

struct Figure {
  double px, py;        // pelvis
  double phi;           // torso tilt from vertical
  double torso, neck_head, head_r;
  double upper[2], fore[2];   // [left, right] bone lengths
  double alpha[2], beta[2];   // shoulder and elbow angles (left, right)
  bool occlude[2] = {false, false};  // drop an entire arm
  bool occlude_body = false;         // drop the whole figure (video bursts)
  bool forearms = true;  // draw the faint forearm strokes this frame
};

// Shoulder angles live in disjoint mirror ranges: the left upper arm swings
// toward one side of the body, the right toward the other, so elbows never
// cross. Wrist ambiguity comes from the elbow bend instead (see
// sample_figure), which lets forearms reach across the midline.
inline constexpr double kShoulderMin = 0.15;
inline constexpr double kShoulderMax = 0.6;
inline constexpr double kElbowBendMin = 0.9;
inline constexpr double kElbowBendMax = 3.1;

// Forearms are drawn much fainter than the rest of the skeleton. The bright
// hand blobs make wrists easy to localize, but deciding which hand belongs
// to which side requires following the faint forearm back to its elbow --
// a relational cue that conditioning on already-predicted joints shortcuts.
inline constexpr double kForearmIntensity = 0.35;

inline void arm_angles(Rng& rng, double& al, double& ar) {
  al = rng.uniform(kShoulderMin, kShoulderMax);
  ar = -rng.uniform(kShoulderMin, kShoulderMax);
}

inline Figure sample_figure(Rng& rng, const SceneConfig& cfg) {
  Figure f;
  double s = cfg.image_size / 64.0;
  f.px = cfg.image_size * 0.5 + rng.uniform(-6.0, 6.0) * s;
  f.py = cfg.image_size * 0.68 + rng.uniform(-4.0, 4.0) * s;
  f.phi = rng.uniform(-0.3, 0.3);
  f.torso = (22.0 + rng.uniform(-3.0, 3.0)) * s;
  f.neck_head = (7.5 + rng.uniform(-1.0, 1.0)) * s;
  f.head_r = (4.0 + rng.uniform(-0.5, 0.5)) * s;
  for (int side = 0; side < 2; ++side) {
    // short upper arm + long forearm: the wrist's reach is dominated by the
    // elbow bend, which is what makes wrist sides cross-ambiguous
    f.upper[side] = (8.0 + rng.uniform(-1.0, 1.0)) * s;
    f.fore[side] = (16.0 + rng.uniform(-1.5, 1.5)) * s;
    // a minimum bend keeps wrists well away from the "straight arm" pose,
    // so crossing configurations stay frequent
    double bend = rng.uniform(kElbowBendMin, kElbowBendMax);
    f.beta[side] = rng.uniform() < 0.5 ? bend : -bend;
  }
  arm_angles(rng, f.alpha[0], f.alpha[1]);
  return f;
}

inline Pose figure_pose(const Figure& f) {
  double ux = std::sin(f.phi), uy = -std::cos(f.phi);  // up along torso
  double nx = f.px + f.torso * ux, ny = f.py + f.torso * uy;
  double hx = nx + f.neck_head * ux, hy = ny + f.neck_head * uy;
  Pose pose(kJointCount);
  bool bvis = !f.occlude_body;
  pose[kHead] = {hx, hy, bvis};
  pose[kNeck] = {nx, ny, bvis};
  pose[kPelvis] = {f.px, f.py, bvis};
  // Arm direction: body-frame "down" rotated by alpha.
  double dx = -ux, dy = -uy;
  for (int side = 0; side < 2; ++side) {
    double a = f.alpha[side];
    double ax = dx * std::cos(a) - dy * std::sin(a);
    double ay = dx * std::sin(a) + dy * std::cos(a);
    double ex = nx + f.upper[side] * ax, ey = ny + f.upper[side] * ay;
    double b = f.alpha[side] + f.beta[side];
    double wx2 = dx * std::cos(b) - dy * std::sin(b);
    double wy2 = dx * std::sin(b) + dy * std::cos(b);
    double wx = ex + f.fore[side] * wx2, wy = ey + f.fore[side] * wy2;
    bool vis = !f.occlude[side] && !f.occlude_body;
    pose[side == 0 ? kLElbow : kRElbow] = {ex, ey, vis};
    pose[side == 0 ? kLWrist : kRWrist] = {wx, wy, vis};
  }
  return pose;
}

inline bool in_frame(const Pose& pose, int size, double margin) {
  for (auto& j : pose)
    if (j.x < margin || j.y < margin || j.x > size - 1 - margin ||
        j.y > size - 1 - margin)
      return false;
  return true;
}

// Anti-aliased line segment, max-blended into the image.
inline void draw_segment(std::vector<double>& img, int size, double x0,
                         double y0, double x1, double y1, double intensity) {
  double minx = std::min(x0, x1) - 2, maxx = std::max(x0, x1) + 2;
  double miny = std::min(y0, y1) - 2, maxy = std::max(y0, y1) + 2;
  int ax = std::max(0, static_cast<int>(std::floor(minx)));
  int bx = std::min(size - 1, static_cast<int>(std::ceil(maxx)));
  int ay = std::max(0, static_cast<int>(std::floor(miny)));
  int by = std::min(size - 1, static_cast<int>(std::ceil(maxy)));
  double vx = x1 - x0, vy = y1 - y0;
  double len2 = vx * vx + vy * vy;
  for (int y = ay; y <= by; ++y)
    for (int x = ax; x <= bx; ++x) {
      double t = len2 > 0 ? ((x - x0) * vx + (y - y0) * vy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      double dx = x - (x0 + t * vx), dy = y - (y0 + t * vy);
      double d = std::sqrt(dx * dx + dy * dy);
      double v = intensity * std::clamp(1.3 - d, 0.0, 1.0);
      auto& px = img[static_cast<std::size_t>(y) * size + x];
      px = std::max(px, v);
    }
}

inline void draw_disk(std::vector<double>& img, int size, double cx, double cy,
                      double r, double intensity) {
  int ax = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  int bx = std::min(size - 1, static_cast<int>(std::ceil(cx + r + 1)));
  int ay = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  int by = std::min(size - 1, static_cast<int>(std::ceil(cy + r + 1)));
  for (int y = ay; y <= by; ++y)
    for (int x = ax; x <= bx; ++x) {
      double d = std::hypot(x - cx, y - cy);
      double v = intensity * std::clamp(r + 0.5 - d, 0.0, 1.0);
      auto& px = img[static_cast<std::size_t>(y) * size + x];
      px = std::max(px, v);
    }
}

inline Scene render(const Figure& f, const SceneConfig& cfg, Rng& rng,
                    std::uint32_t seed) {
  int size = cfg.image_size;
  std::vector<double> img(static_cast<std::size_t>(size) * size, 0.0);
  Pose pose = figure_pose(f);

  // A fully-occluded frame keeps its clutter and noise: the figure is
  // hidden behind something, the camera is still running.
  if (!f.occlude_body) {
    draw_segment(img, size, pose[kPelvis].x, pose[kPelvis].y, pose[kNeck].x,
                 pose[kNeck].y, 1.0);
    draw_disk(img, size, pose[kHead].x, pose[kHead].y, f.head_r, 1.0);
    for (int side = 0; side < 2; ++side) {
      if (f.occlude[side]) continue;
      int e = side == 0 ? kLElbow : kRElbow;
      int w = side == 0 ? kLWrist : kRWrist;
      // identical stroke intensity on both sides
      draw_segment(img, size, pose[kNeck].x, pose[kNeck].y, pose[e].x,
                   pose[e].y, 1.0);
      if (f.forearms)
        draw_segment(img, size, pose[e].x, pose[e].y, pose[w].x, pose[w].y,
                     kForearmIntensity);
      // identical "hand" blobs: wrists are localizable, but nothing about
      // the blob itself says which side it belongs to
      draw_disk(img, size, pose[w].x, pose[w].y, 1.6 * (size / 64.0), 1.0);
    }
  }
  for (int c = 0; c < cfg.clutter; ++c) {
    double x0 = rng.uniform(2.0, size - 3.0), y0 = rng.uniform(2.0, size - 3.0);
    double ang = rng.uniform(0.0, 6.2831853);
    double len = rng.uniform(4.0, 10.0);
    draw_segment(img, size, x0, y0, x0 + len * std::cos(ang),
                 y0 + len * std::sin(ang), 0.8);
  }
  if (cfg.noise > 0.0)
    for (auto& v : img)
      v = std::clamp(v + rng.uniform(-cfg.noise, cfg.noise), 0.0, 1.0);

  Scene sc;
  sc.image = tensor({1, size, size});
  // quantize to float32 so dataset round trips are bit exact
  for (std::size_t i = 0; i < img.size(); ++i)
    sc.image->data[i] = quantize32(img[i]);
  for (auto& j : pose) {
    j.x = quantize32(j.x);
    j.y = quantize32(j.y);
  }
  sc.pose = pose;
  double minx = 1e300, maxx = -1e300, miny = 1e300, maxy = -1e300;
  for (auto& j : pose) {
    minx = std::min(minx, j.x);
    maxx = std::max(maxx, j.x);
    miny = std::min(miny, j.y);
    maxy = std::max(maxy, j.y);
  }
  sc.s_w = quantize32(maxx - minx);
  sc.s_h = quantize32(maxy - miny);
  sc.head_size = quantize32(2.0 * f.head_r);
  sc.seed = seed;
  return sc;
}

}  // namespace detail

// Deterministic in (seed, config).
inline Scene generate_scene(std::uint32_t seed, const SceneConfig& cfg) {
  Rng rng(0x9e3779b97f4a7c15ull ^ (static_cast<std::uint64_t>(seed) * 0x2545f4914f6cdd1dull + 1));
  for (int attempt = 0; attempt < 100; ++attempt) {
    detail::Figure f = detail::sample_figure(rng, cfg);
    Pose pose = detail::figure_pose(f);
    if (detail::in_frame(pose, cfg.image_size, 2.0))
      return detail::render(f, cfg, rng, seed);
  }
  throw ValidationError("generate_scene: cannot place figure in frame");
}

// Temporally coherent sequence: bounded random walk on the figure angles,
// with optional whole-arm occlusion frames.
inline std::vector<Scene> generate_video(std::uint32_t seed,
                                         const SceneConfig& cfg, int frames) {
  if (frames < 1) throw ValidationError("generate_video: frames < 1");
  Rng rng(0xda942042e4dd58b5ull ^ (static_cast<std::uint64_t>(seed) * 0x9e3779b97f4a7c15ull + 7));
  detail::Figure f;
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    f = detail::sample_figure(rng, cfg);
    placed = detail::in_frame(detail::figure_pose(f), cfg.image_size, 3.0);
  }
  if (!placed)
    throw ValidationError("generate_video: cannot place figure in frame");

  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    if (t > 0) {
      detail::Figure next = f;
      for (int attempt = 0; attempt < 100; ++attempt) {
        next = f;
        next.px += rng.uniform(-cfg.max_shift_step, cfg.max_shift_step);
        next.py += rng.uniform(-cfg.max_shift_step, cfg.max_shift_step);
        next.phi = std::clamp(
            next.phi + rng.uniform(-cfg.max_angle_step, cfg.max_angle_step),
            -0.3, 0.3);
        for (int s = 0; s < 2; ++s) {
          next.alpha[s] += rng.uniform(-cfg.max_angle_step, cfg.max_angle_step);
          double nb = next.beta[s] +
                      rng.uniform(-cfg.max_angle_step, cfg.max_angle_step);
          double mag = std::clamp(std::abs(nb), detail::kElbowBendMin,
                                  detail::kElbowBendMax);
          next.beta[s] = std::copysign(mag, nb != 0.0 ? nb : next.beta[s]);
        }
        next.alpha[0] = std::clamp(next.alpha[0], detail::kShoulderMin,
                                   detail::kShoulderMax);
        next.alpha[1] = std::clamp(next.alpha[1], -detail::kShoulderMax,
                                   -detail::kShoulderMin);
        if (detail::in_frame(detail::figure_pose(next), cfg.image_size, 2.0))
          break;
      }
      f = next;
    }
    // Occlusion comes in bursts (first-order Markov with continuation
    // probability `occlusion_persistence`) whose stationary marginal
    // equals `occlusion_rate`; the occluded side stays fixed for the
    // whole burst. Multi-frame occlusion is what separates temporal
    // models: the longer a limb stays hidden, the further back a model
    // must reach for its last observed position.
    // The faint forearm strokes -- the only per-frame handedness cue -- are
    // drawn intermittently in video. On blank frames the two identical hand
    // blobs are geometrically swappable, so handedness must be carried over
    // from the last cue frame; that is the memory the temporal models trade
    // on.
    f.forearms =
        cfg.forearm_rate >= 1.0 || rng.uniform() < cfg.forearm_rate;
    double c = cfg.occlusion_persistence;
    double r = std::min(cfg.occlusion_rate, 1.0);
    bool was_occluded = f.occlude[0] || f.occlude[1];
    int side = f.occlude[1] ? 1 : 0;
    f.occlude[0] = f.occlude[1] = false;
    if (r >= 1.0) {
      f.occlude[t == 0 || !was_occluded ? (rng.uniform() < 0.5 ? 0 : 1)
                                        : side] = true;
    } else if (r > 0.0) {
      if (t > 0 && was_occluded && rng.uniform() < c) {
        f.occlude[side] = true;  // burst continues on the same side
      } else if ((t == 0 || !was_occluded) &&
                 rng.uniform() <
                     (t == 0 ? r : r * (1.0 - c) / (1.0 - r))) {
        f.occlude[rng.uniform() < 0.5 ? 0 : 1] = true;  // burst starts
      }
    }
    out.push_back(detail::render(f, cfg, rng,
                                 static_cast<std::uint32_t>(seed + 1000003u * t)));
  }
  return out;
}

// Descending sort by detection rate; ties keep canonical joint order.
inline std::vector<int> compute_ordering(const std::vector<double>& rates) {
  std::vector<int> order(rates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return rates[static_cast<std::size_t>(a)] > rates[static_cast<std::size_t>(b)];
  });
  return order;
}

// ---------------------------------------------------------------------------
// Dataset serialization
// ---------------------------------------------------------------------------
// magic "CPSD", u32 version=1, u32 count; per scene: u32 seed, u16 H, u16 W,
// u8 joints, per joint (f32 x, f32 y, u8 visible), f32 s_h, f32 s_w,
// f32 head_size, H*W f32 pixels. Little-endian throughout.

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t& off) {
  if (off + sizeof(T) > buf.size())
    throw DatasetError("dataset truncated at byte offset " +
                       std::to_string(off));
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline void write_dataset(const std::vector<Scene>& scenes,
                          const std::string& path) {
  std::string buf;
  buf.append("CPSD", 4);
  detail::put<std::uint32_t>(buf, 1);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(scenes.size()));
  for (const auto& sc : scenes) {
    int h = sc.image->dim(1), w = sc.image->dim(2);
    detail::put<std::uint32_t>(buf, sc.seed);
    detail::put<std::uint16_t>(buf, static_cast<std::uint16_t>(h));
    detail::put<std::uint16_t>(buf, static_cast<std::uint16_t>(w));
    detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(sc.pose.size()));
    for (const auto& j : sc.pose) {
      detail::put<float>(buf, static_cast<float>(j.x));
      detail::put<float>(buf, static_cast<float>(j.y));
      detail::put<std::uint8_t>(buf, j.visible ? 1 : 0);
    }
    detail::put<float>(buf, static_cast<float>(sc.s_h));
    detail::put<float>(buf, static_cast<float>(sc.s_w));
    detail::put<float>(buf, static_cast<float>(sc.head_size));
    for (double v : sc.image->data)
      detail::put<float>(buf, static_cast<float>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DatasetError("write failed: " + path);
}

inline std::vector<Scene> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  std::size_t off = 0;
  if (buf.size() < 4 || buf.compare(0, 4, "CPSD") != 0)
    throw DatasetError("bad magic at byte offset 0");
  off = 4;
  auto version = detail::get<std::uint32_t>(buf, off);
  if (version != 1)
    throw DatasetError("unsupported version at byte offset 4");
  auto count = detail::get<std::uint32_t>(buf, off);
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Scene sc;
    sc.seed = detail::get<std::uint32_t>(buf, off);
    int h = detail::get<std::uint16_t>(buf, off);
    int w = detail::get<std::uint16_t>(buf, off);
    int joints = detail::get<std::uint8_t>(buf, off);
    sc.pose.resize(static_cast<std::size_t>(joints));
    for (auto& j : sc.pose) {
      j.x = detail::get<float>(buf, off);
      j.y = detail::get<float>(buf, off);
      j.visible = detail::get<std::uint8_t>(buf, off) != 0;
    }
    sc.s_h = detail::get<float>(buf, off);
    sc.s_w = detail::get<float>(buf, off);
    sc.head_size = detail::get<float>(buf, off);
    sc.image = tensor({1, h, w});
    for (auto& v : sc.image->data) v = detail::get<float>(buf, off);
    scenes.push_back(std::move(sc));
  }
  if (off != buf.size())
    throw DatasetError("trailing bytes at byte offset " + std::to_string(off));
  return scenes;
}

}  // namespace chainpred
