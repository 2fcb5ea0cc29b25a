#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "apex/data_synth.hpp"

using apex::SceneSpec;
using apex::VideoEpisode;

namespace fs = std::filesystem;

namespace {

SceneSpec base_spec(uint64_t seed) {
  SceneSpec s;
  s.rng_seed = seed;
  return s;
}

}  // namespace

TEST(GenerateEpisode, DeterministicUnderSeed) {
  VideoEpisode a = apex::generate_episode(base_spec(7));
  VideoEpisode b = apex::generate_episode(base_spec(7));
  EXPECT_EQ(a.frames.data, b.frames.data);
  EXPECT_EQ(a.gt_masks.data, b.gt_masks.data);
  EXPECT_EQ(a.gt_depth.data, b.gt_depth.data);
  VideoEpisode c = apex::generate_episode(base_spec(8));
  EXPECT_NE(a.frames.data, c.frames.data);
}

TEST(GenerateEpisode, StaticSceneHasConstantMasks) {
  SceneSpec s = base_spec(3);
  s.num_objects = 1;
  s.arm_enabled = false;
  VideoEpisode ep = apex::generate_episode(s);
  for (int t = 1; t < ep.length(); ++t)
    for (int y = 0; y < ep.height(); ++y)
      for (int x = 0; x < ep.width(); ++x)
        ASSERT_EQ(ep.gt_masks.at(t, y, x), ep.gt_masks.at(0, y, x));
}

TEST(GenerateEpisode, InvariantsHold) {
  for (uint64_t seed : {1ull, 2ull, 5ull, 11ull}) {
    VideoEpisode ep = apex::generate_episode(base_spec(seed));
    // depth positive everywhere; exactly one label per pixel by construction
    for (int64_t i = 0; i < ep.gt_depth.numel(); ++i) ASSERT_GT(ep.gt_depth[i], 0.0f);
    // id set never grows (no re-birth)
    std::set<int64_t> prev_ids;
    bool first = true;
    for (int t = 0; t < ep.length(); ++t) {
      std::set<int64_t> ids;
      for (auto& [l, id] : ep.gt_track_ids[t]) ids.insert(id);
      if (!first) {
        for (int64_t id : ids)
          if (!prev_ids.count(id)) {
            // the arm may enter the scene later; sprites may not reappear
            ASSERT_EQ(id, ep.spec.num_objects + 1) << "seed " << seed << " t " << t;
          }
      }
      // a persistent id maps to exactly one label per frame
      std::set<int64_t> uniq;
      for (auto& [l, id] : ep.gt_track_ids[t]) ASSERT_TRUE(uniq.insert(id).second);
      prev_ids.insert(ids.begin(), ids.end());
      first = false;
    }
  }
}

// independent scalar re-implementation of the push rule
namespace {

struct Box {
  int x0, x1, y0, y1;
};

int push_displacement(const Box& arm, const Box& sprite, int dir) {
  const int ox = std::min(arm.x1, sprite.x1) - std::max(arm.x0, sprite.x0) + 1;
  const int oy = std::min(arm.y1, sprite.y1) - std::max(arm.y0, sprite.y0) + 1;
  if (ox <= 0 || oy <= 0) return 0;
  return dir > 0 ? ox : -ox;
}

}  // namespace

TEST(GenerateEpisode, PushMatchesScalarOracle) {
  // single disc in the arm's path; replay the push rule frame by frame
  SceneSpec spec = base_spec(3);
  spec.num_objects = 1;
  apex::RngStream rng(apex::mix_seed(spec.rng_seed, 0x5ce9e5u));
  apex::SceneInstance scene = apex::spawn_scene(spec, rng);
  ASSERT_TRUE(scene.arm.has_value());
  // drop the sprite straight onto the arm's sweep line so contact must happen
  scene.sprites[0].cy = scene.arm->cy;
  apex::SceneInstance replay = scene;

  bool touched = false;
  for (int t = 1; t < spec.episode_length; ++t) {
    // oracle prediction for this frame
    const auto& s = replay.sprites[0];
    const auto& a = *replay.arm;
    const int dir = a.vx >= 0 ? 1 : -1;
    const Box arm_after{a.cx + a.vx - a.half_w, a.cx + a.vx + a.half_w, a.cy - a.half_h,
                        a.cy + a.half_h};
    const Box sbox{s.cx - s.r, s.cx + s.r, s.cy - s.r, s.cy + s.r};
    const int want_dx = push_displacement(arm_after, sbox, dir);
    const int cx_before = s.cx;

    apex::step_scene(replay);
    ASSERT_EQ(replay.sprites[0].cx, cx_before + want_dx) << "t=" << t;
    if (want_dx != 0) touched = true;
  }
  EXPECT_TRUE(touched);
}

TEST(GenerateEpisode, RejectsOverDenseSpec) {
  SceneSpec s = base_spec(1);
  s.image_height = 20;
  s.image_width = 20;
  s.num_objects = 3;  // three large sprites cannot fit a 20x20 board
  EXPECT_THROW(apex::generate_episode(s), std::runtime_error);
}

TEST(Dataset, WriteReadRoundTrip) {
  const std::string root = (fs::temp_directory_path() / "apex_ds_test").string();
  fs::remove_all(root);
  std::vector<VideoEpisode> eps;
  for (uint64_t i = 0; i < 5; ++i) {
    SceneSpec s = base_spec(100 + i);
    s.episode_length = 4;
    eps.push_back(apex::generate_episode(s));
  }
  apex::DatasetManifest man = apex::write_dataset(eps, root, {3, 1, 1});
  EXPECT_EQ(man.train, 3);
  EXPECT_EQ(man.val, 1);
  EXPECT_EQ(man.test, 1);

  auto train = apex::read_dataset(root, "train");
  ASSERT_EQ(train.size(), 3u);
  for (int e = 0; e < 3; ++e) {
    EXPECT_EQ(train[e].frames.data, eps[e].frames.data);
    EXPECT_EQ(train[e].gt_masks.data, eps[e].gt_masks.data);
    EXPECT_EQ(train[e].gt_depth.data, eps[e].gt_depth.data);
    EXPECT_EQ(train[e].gt_track_ids, eps[e].gt_track_ids);
  }
  auto test_split = apex::read_dataset(root, "test");
  ASSERT_EQ(test_split.size(), 1u);
  EXPECT_EQ(test_split[0].frames.data, eps[4].frames.data);
  fs::remove_all(root);
}

TEST(Dataset, SplitArithmetic) {
  std::vector<VideoEpisode> eps;
  for (uint64_t i = 0; i < 12; ++i) {
    SceneSpec s = base_spec(i);
    s.episode_length = 2;
    s.num_objects = 1;
    eps.push_back(apex::generate_episode(s));
  }
  const std::string root = (fs::temp_directory_path() / "apex_ds_split").string();
  fs::remove_all(root);
  apex::DatasetManifest man = apex::write_dataset(eps, root);
  EXPECT_EQ(man.train, 10);
  EXPECT_EQ(man.val, 1);
  EXPECT_EQ(man.test, 1);
  fs::remove_all(root);
}

TEST(Dataset, MissingMaskFileNamesEpisode) {
  const std::string root = (fs::temp_directory_path() / "apex_ds_err").string();
  fs::remove_all(root);
  std::vector<VideoEpisode> eps;
  for (uint64_t i = 0; i < 3; ++i) {
    SceneSpec s = base_spec(i);
    s.episode_length = 3;
    eps.push_back(apex::generate_episode(s));
  }
  apex::write_dataset(eps, root, {1, 1, 1});
  fs::remove(fs::path(root) / "val" / "ep_00000" / "mask_001.png");
  try {
    apex::read_dataset(root, "val");
    FAIL() << "expected read error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("ep_00000"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(SceneSpec, Validation) {
  SceneSpec s;
  s.num_objects = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = SceneSpec{};
  s.episode_length = 1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}
