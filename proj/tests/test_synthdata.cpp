#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "chainpred/synthdata.hpp"
#include "doctest.h"

using namespace chainpred;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool scenes_equal(const Scene& a, const Scene& b) {
  if (a.image->data != b.image->data) return false;
  if (a.pose.size() != b.pose.size()) return false;
  for (std::size_t i = 0; i < a.pose.size(); ++i)
    if (a.pose[i].x != b.pose[i].x || a.pose[i].y != b.pose[i].y ||
        a.pose[i].visible != b.pose[i].visible)
      return false;
  return a.s_h == b.s_h && a.s_w == b.s_w && a.head_size == b.head_size &&
         a.seed == b.seed;
}

}  // namespace

TEST_SUITE("test_synthdata") {
  TEST_CASE("same seed gives bit-identical scenes") {
    SceneConfig cfg;
    for (std::uint32_t seed : {0u, 1u, 17u, 4242u})
      CHECK(scenes_equal(generate_scene(seed, cfg), generate_scene(seed, cfg)));
  }

  TEST_CASE("scene invariants: joints in frame, positive sizes, f32 values") {
    SceneConfig cfg;
    for (std::uint32_t seed = 0; seed < 200; ++seed) {
      auto sc = generate_scene(seed, cfg);
      for (auto& j : sc.pose) {
        CHECK(j.x >= 2.0);
        CHECK(j.y >= 2.0);
        CHECK(j.x <= cfg.image_size - 3.0);
        CHECK(j.y <= cfg.image_size - 3.0);
      }
      CHECK(sc.s_h > 0.0);
      CHECK(sc.s_w > 0.0);
      CHECK(sc.head_size > 0.0);
      for (double v : sc.image->data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == static_cast<double>(static_cast<float>(v)));
      }
    }
  }

  TEST_CASE("clean config renders only the skeleton") {
    SceneConfig cfg;
    cfg.noise = 0.0;
    cfg.clutter = 0;
    auto sc = generate_scene(7, cfg);
    int lit = 0;
    for (double v : sc.image->data)
      if (v > 0.0) ++lit;
    // a stick figure lights some but far from all pixels
    CHECK(lit > 50);
    CHECK(lit < 64 * 64 / 2);
    // clutter strictly adds ink
    SceneConfig noisy = cfg;
    noisy.clutter = 5;
    auto sc2 = generate_scene(7, noisy);
    int lit2 = 0;
    for (double v : sc2.image->data)
      if (v > 0.0) ++lit2;
    CHECK(lit2 > lit);
  }

  TEST_CASE("left/right labels are not separable by position alone") {
    SceneConfig cfg;
    int left_arm_on_right = 0, left_arm_on_left = 0;
    for (std::uint32_t seed = 0; seed < 400; ++seed) {
      auto sc = generate_scene(seed, cfg);
      if (sc.pose[kLWrist].x > sc.pose[kRWrist].x)
        ++left_arm_on_right;
      else
        ++left_arm_on_left;
    }
    // both configurations must occur in bulk, otherwise a per-joint
    // detector could cheat on sided labels
    CHECK(left_arm_on_right > 40);
    CHECK(left_arm_on_left > 40);
  }

  TEST_CASE("joint positions cover a wide share of the image") {
    SceneConfig cfg;
    const int bins = 16;  // 4x4-pixel bins on a 64x64 image
    std::vector<int> hit(bins * bins, 0);
    for (std::uint32_t seed = 0; seed < 3000; ++seed) {
      auto sc = generate_scene(seed, cfg);
      for (auto& j : sc.pose) {
        int bx = std::min(bins - 1, static_cast<int>(j.x) / 4);
        int by = std::min(bins - 1, static_cast<int>(j.y) / 4);
        hit[static_cast<std::size_t>(by) * bins + bx] = 1;
      }
    }
    int covered = 0;
    for (int v : hit) covered += v;
    // guard against a degenerate pose distribution; the minimum elbow bend
    // intentionally removes fully-extended arm poses, so "wide" is ~55%+
    CHECK(covered >= static_cast<int>(0.55 * bins * bins));
  }

  TEST_CASE("videos are deterministic with bounded frame-to-frame motion") {
    SceneConfig cfg;
    auto a = generate_video(11, cfg, 6);
    auto b = generate_video(11, cfg, 6);
    REQUIRE(a.size() == 6);
    for (std::size_t t = 0; t < a.size(); ++t)
      CHECK(scenes_equal(a[t], b[t]));
    for (std::size_t t = 1; t < a.size(); ++t)
      for (std::size_t j = 0; j < a[t].pose.size(); ++j) {
        double d = std::hypot(a[t].pose[j].x - a[t - 1].pose[j].x,
                              a[t].pose[j].y - a[t - 1].pose[j].y);
        CHECK(d <= 10.0);
      }
  }

  TEST_CASE("occlusion drops exactly one arm's visibility per frame") {
    SceneConfig cfg;
    cfg.occlusion_rate = 1.0;
    auto video = generate_video(13, cfg, 5);
    for (auto& sc : video) {
      bool left_hidden = !sc.pose[kLElbow].visible && !sc.pose[kLWrist].visible;
      bool right_hidden = !sc.pose[kRElbow].visible && !sc.pose[kRWrist].visible;
      CHECK(left_hidden != right_hidden);
      CHECK(sc.pose[kHead].visible);
      CHECK(sc.pose[kNeck].visible);
      CHECK(sc.pose[kPelvis].visible);
    }
  }

  TEST_CASE("single-frame video is a valid scene") {
    SceneConfig cfg;
    auto video = generate_video(21, cfg, 1);
    REQUIRE(video.size() == 1);
    CHECK(video[0].pose.size() == static_cast<std::size_t>(kJointCount));
    CHECK_THROWS_AS(generate_video(21, cfg, 0), ValidationError);
  }

  TEST_CASE("ordering sorts detection rates descending with stable ties") {
    CHECK(compute_ordering({0.9, 0.5, 0.7}) == std::vector<int>{0, 2, 1});
    CHECK(compute_ordering({0.5, 0.5, 0.5}) == std::vector<int>{0, 1, 2});
    CHECK(compute_ordering({}) == std::vector<int>{});
  }

  TEST_CASE("dataset write/read round trip is bit exact") {
    SceneConfig cfg;
    std::vector<Scene> scenes;
    for (std::uint32_t seed = 0; seed < 100; ++seed)
      scenes.push_back(generate_scene(seed, cfg));
    auto path = temp_path("chainpred_test_roundtrip.cpsd");
    write_dataset(scenes, path);
    auto loaded = read_dataset(path);
    REQUIRE(loaded.size() == scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i)
      CHECK(scenes_equal(scenes[i], loaded[i]));
    std::remove(path.c_str());
  }

  TEST_CASE("empty dataset round trips") {
    auto path = temp_path("chainpred_test_empty.cpsd");
    write_dataset({}, path);
    CHECK(read_dataset(path).empty());
    std::remove(path.c_str());
  }

  TEST_CASE("corrupt files give parse errors, not crashes") {
    auto path = temp_path("chainpred_test_corrupt.cpsd");
    {
      std::ofstream out(path, std::ios::binary);
      out << "NOPE";
    }
    CHECK_THROWS_AS(read_dataset(path), DatasetError);

    SceneConfig cfg;
    write_dataset({generate_scene(1, cfg)}, path);
    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    CHECK_THROWS_WITH_AS(read_dataset(path),
                         doctest::Contains("byte offset"), DatasetError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_dataset(path), DatasetError);
  }
}
