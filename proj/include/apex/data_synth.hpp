#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apex/png_io.hpp"
#include "apex/rng.hpp"
#include "apex/tensor.hpp"

// Ground-truthed synthetic episodes: coloured sprites on a table plane plus a
// sweeping arm bar that pushes whatever it touches. Rasterisation is pure
// integer arithmetic so episodes are bit-identical across platforms.

namespace apex {

enum class SpriteShape { kDisc, kSquare, kTriangle, kCup };

inline const char* shape_name(SpriteShape s) {
  switch (s) {
    case SpriteShape::kDisc: return "disc";
    case SpriteShape::kSquare: return "square";
    case SpriteShape::kTriangle: return "triangle";
    case SpriteShape::kCup: return "cup";
  }
  return "?";
}

inline SpriteShape shape_from_name(const std::string& n) {
  if (n == "disc") return SpriteShape::kDisc;
  if (n == "square") return SpriteShape::kSquare;
  if (n == "triangle") return SpriteShape::kTriangle;
  if (n == "cup") return SpriteShape::kCup;
  throw std::invalid_argument("unknown sprite shape: " + n);
}

struct Rgb8 {
  uint8_t r = 0, g = 0, b = 0;
};

enum class SpriteMotion { kStaticUntilPushed, kDrift };

struct SceneSpec {
  int image_height = 64;
  int image_width = 64;
  int num_objects = 3;
  std::vector<SpriteShape> sprite_shapes = {SpriteShape::kDisc, SpriteShape::kSquare,
                                            SpriteShape::kTriangle, SpriteShape::kCup};
  std::vector<Rgb8> palette = {{230, 60, 60},  {60, 200, 70},  {70, 90, 235},
                               {235, 200, 50}, {210, 70, 220}, {60, 210, 210}};
  bool arm_enabled = true;
  int episode_length = 20;
  uint64_t rng_seed = 0;
  SpriteMotion motion = SpriteMotion::kStaticUntilPushed;

  void validate() const {
    if (num_objects < 1 || num_objects > 3)
      throw std::invalid_argument("SceneSpec: num_objects must be in [1,3]");
    if (episode_length < 2) throw std::invalid_argument("SceneSpec: episode_length must be >= 2");
    if (image_height < 16 || image_width < 16)
      throw std::invalid_argument("SceneSpec: image too small");
    if (sprite_shapes.empty() || palette.size() < static_cast<size_t>(num_objects))
      throw std::invalid_argument("SceneSpec: need shapes and enough palette colours");
  }

  uint64_t hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    mix(image_height);
    mix(image_width);
    mix(num_objects);
    for (auto s : sprite_shapes) mix(static_cast<uint64_t>(s) + 17);
    for (auto c : palette) mix((uint64_t(c.r) << 16) | (uint64_t(c.g) << 8) | c.b);
    mix(arm_enabled ? 2 : 3);
    mix(episode_length);
    mix(static_cast<uint64_t>(motion) + 29);
    return h;
  }
};

struct CameraMeta {
  double extent_x = 1.0;  // table extent in world units
  double extent_y = 1.0;
  double table_depth = 1.0;
};

struct VideoEpisode {
  Tensor<float> frames;                          // [T, H, W, 3] in [0,1]
  Tensor<int> gt_masks;                          // [T, H, W], 0 = background
  std::vector<std::map<int, int64_t>> gt_track_ids;  // per frame: label -> persistent id
  Tensor<float> gt_depth;                        // [T, H, W], > 0
  CameraMeta camera_meta;
  std::map<int, double> label_heights;  // label -> height above the table plane
  SceneSpec spec;

  int length() const { return frames.shape[0]; }
  int height() const { return frames.shape[1]; }
  int width() const { return frames.shape[2]; }

  // frame t as a channel-major tensor [3,H,W]
  template <typename T>
  Tensor<T> frame_chw(int t) const {
    const int H = height(), W = width();
    Tensor<T> out(Shape{3, H, W});
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<T>(frames.at(t, y, x, c));
    return out;
  }
};

// ---- scene instance: sprites + arm with integer state ----

struct Sprite {
  SpriteShape shape = SpriteShape::kDisc;
  int cx = 0, cy = 0;  // centre, pixels
  int r = 5;           // half size, pixels
  int vx = 0, vy = 0;  // drift velocity, pixels/frame
  Rgb8 color;
  int label = 0;        // stable gt label
  double height = 0.1;  // world-unit height above the table
};

struct ArmBar {
  int cx = 0, cy = 0;   // centre of the bar
  int half_w = 3, half_h = 14;
  int vx = 4;           // pixels/frame along the horizontal sweep line
  Rgb8 color{204, 204, 204};
  int label = 0;
  double height = 0.25;
};

struct SceneInstance {
  int H = 64, W = 64;
  Rgb8 bg_color{38, 43, 48};
  std::vector<Sprite> sprites;
  std::optional<ArmBar> arm;
};

namespace detail {

inline bool sprite_covers(const Sprite& s, int x, int y) {
  const int dx = x - s.cx, dy = y - s.cy;
  const int r = s.r;
  switch (s.shape) {
    case SpriteShape::kDisc:
      return dx * dx + dy * dy <= r * r;
    case SpriteShape::kSquare:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case SpriteShape::kTriangle: {
      // apex at the top, base at the bottom
      const int depth = y - (s.cy - r);
      return depth >= 0 && depth <= 2 * r && 2 * std::abs(dx) <= depth;
    }
    case SpriteShape::kCup: {
      if (std::abs(dx) > r || std::abs(dy) > r) return false;
      const int t = std::max(2, (r + 1) / 2);  // wall thickness
      const bool cavity = std::abs(dx) <= r - t && y <= s.cy + r - t - 1;
      return !cavity;
    }
  }
  return false;
}

struct Aabb {
  int x0, x1, y0, y1;  // inclusive
};

inline Aabb sprite_box(const Sprite& s) { return {s.cx - s.r, s.cx + s.r, s.cy - s.r, s.cy + s.r}; }
inline Aabb arm_box(const ArmBar& a) {
  return {a.cx - a.half_w, a.cx + a.half_w, a.cy - a.half_h, a.cy + a.half_h};
}

inline int overlap_1d(int a0, int a1, int b0, int b1) {
  return std::min(a1, b1) - std::max(a0, b0) + 1;
}

// Push rule: when two boxes overlap, translate the pushee along x by exactly
// the x-overlap, in the pusher's travel direction (minimum separating vector
// along the sweep axis).
inline bool resolve_push(const Aabb& pusher, Sprite& pushee, int dir) {
  const Aabb pb = sprite_box(pushee);
  const int ox = overlap_1d(pusher.x0, pusher.x1, pb.x0, pb.x1);
  const int oy = overlap_1d(pusher.y0, pusher.y1, pb.y0, pb.y1);
  if (ox <= 0 || oy <= 0) return false;
  pushee.cx += dir > 0 ? ox : -ox;
  return true;
}

}  // namespace detail

// advance the scene by one frame: drift, arm sweep, push cascade
inline void step_scene(SceneInstance& scene) {
  for (auto& s : scene.sprites) {
    s.cx += s.vx;
    s.cy += s.vy;
  }
  if (!scene.arm) return;
  ArmBar& arm = *scene.arm;
  arm.cx += arm.vx;
  const int dir = arm.vx >= 0 ? 1 : -1;
  // arm pushes sprites, pushed sprites push others; cascade terminates because
  // every push strictly advances a sprite along the sweep direction
  for (size_t pass = 0; pass <= scene.sprites.size() + 1; ++pass) {
    bool moved = false;
    for (auto& s : scene.sprites)
      moved |= detail::resolve_push(detail::arm_box(arm), s, dir);
    // order sprites along the sweep so chains resolve front-to-back
    std::vector<int> order(scene.sprites.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return dir > 0 ? scene.sprites[a].cx > scene.sprites[b].cx
                     : scene.sprites[a].cx < scene.sprites[b].cx;
    });
    for (int i : order)
      for (int j : order) {
        if (i == j) continue;
        // the sprite nearer the arm along the sweep acts as the pusher
        const bool i_behind = dir > 0 ? scene.sprites[i].cx <= scene.sprites[j].cx
                                      : scene.sprites[i].cx >= scene.sprites[j].cx;
        if (!i_behind) continue;
        moved |= detail::resolve_push(detail::sprite_box(scene.sprites[i]), scene.sprites[j], dir);
      }
    if (!moved) break;
  }
}

// rasterise: topmost object wins (sprites in index order, arm on top)
inline void render_scene(const SceneInstance& scene, Image8& rgb, std::vector<int>& labels) {
  rgb.height = scene.H;
  rgb.width = scene.W;
  rgb.channels = 3;
  rgb.data.assign(static_cast<size_t>(scene.H) * scene.W * 3, 0);
  labels.assign(static_cast<size_t>(scene.H) * scene.W, 0);
  for (int y = 0; y < scene.H; ++y)
    for (int x = 0; x < scene.W; ++x) {
      Rgb8 c = scene.bg_color;
      int label = 0;
      for (const auto& s : scene.sprites)
        if (detail::sprite_covers(s, x, y)) {
          c = s.color;
          label = s.label;
        }
      if (scene.arm) {
        const auto b = detail::arm_box(*scene.arm);
        if (x >= b.x0 && x <= b.x1 && y >= b.y0 && y <= b.y1) {
          c = scene.arm->color;
          label = scene.arm->label;
        }
      }
      rgb.at(y, x, 0) = c.r;
      rgb.at(y, x, 1) = c.g;
      rgb.at(y, x, 2) = c.b;
      labels[static_cast<size_t>(y) * scene.W + x] = label;
    }
}

// spawn sprites without initial overlap; throws after 1000 failed attempts
inline SceneInstance spawn_scene(const SceneSpec& spec, RngStream& rng) {
  SceneInstance scene;
  scene.H = spec.image_height;
  scene.W = spec.image_width;
  const int jitter = 12;
  scene.bg_color.r = static_cast<uint8_t>(38 + rng.next_int(-jitter, jitter));
  scene.bg_color.g = static_cast<uint8_t>(43 + rng.next_int(-jitter, jitter));
  scene.bg_color.b = static_cast<uint8_t>(48 + rng.next_int(-jitter, jitter));

  std::vector<int> color_order(spec.palette.size());
  for (size_t i = 0; i < color_order.size(); ++i) color_order[i] = static_cast<int>(i);
  for (size_t i = color_order.size(); i > 1; --i)
    std::swap(color_order[i - 1], color_order[rng.next_below(i)]);

  const int rmin = std::max(4, spec.image_height / 13);
  const int rmax = std::max(rmin + 1, spec.image_height / 8);
  for (int i = 0; i < spec.num_objects; ++i) {
    Sprite s;
    s.shape = spec.sprite_shapes[rng.next_below(spec.sprite_shapes.size())];
    s.r = rng.next_int(rmin, rmax);
    s.color = spec.palette[color_order[i]];
    s.label = i + 1;
    s.height = 0.10 + 0.02 * i;
    if (spec.motion == SpriteMotion::kDrift) {
      s.vx = rng.next_int(-1, 1);
      s.vy = rng.next_int(-1, 1);
    }
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      s.cx = rng.next_int(s.r, scene.W - 1 - s.r);
      s.cy = rng.next_int(s.r, scene.H - 1 - s.r);
      placed = true;
      for (const auto& other : scene.sprites) {
        const auto a = detail::sprite_box(s), b = detail::sprite_box(other);
        if (detail::overlap_1d(a.x0 - 1, a.x1 + 1, b.x0, b.x1) > 0 &&
            detail::overlap_1d(a.y0 - 1, a.y1 + 1, b.y0, b.y1) > 0)
          placed = false;
      }
    }
    if (!placed)
      throw std::runtime_error("spawn_scene: could not place sprites without overlap (spec too dense)");
    scene.sprites.push_back(s);
  }

  if (spec.arm_enabled) {
    ArmBar arm;
    arm.half_w = std::max(2, spec.image_width / 21);
    arm.half_h = std::max(6, spec.image_height / 5);
    arm.cy = rng.next_int(arm.half_h, scene.H - 1 - arm.half_h);
    arm.label = spec.num_objects + 1;
    const bool from_left = rng.next_below(2) == 0;
    const int speed = rng.next_int(3, 5);
    if (from_left) {
      arm.cx = -arm.half_w - 1;
      arm.vx = speed;
    } else {
      arm.cx = scene.W + arm.half_w;
      arm.vx = -speed;
    }
    scene.arm = arm;
  }
  return scene;
}

inline VideoEpisode generate_episode(const SceneSpec& spec) {
  spec.validate();
  RngStream rng(mix_seed(spec.rng_seed, 0x5ce9e5u));
  SceneInstance scene = spawn_scene(spec, rng);

  const int T = spec.episode_length, H = spec.image_height, W = spec.image_width;
  VideoEpisode ep;
  ep.spec = spec;
  ep.frames = Tensor<float>(Shape{T, H, W, 3});
  ep.gt_masks = Tensor<int>(Shape{T, H, W});
  ep.gt_depth = Tensor<float>(Shape{T, H, W});
  ep.gt_track_ids.resize(T);

  for (const auto& s : scene.sprites) ep.label_heights[s.label] = s.height;
  if (scene.arm) ep.label_heights[scene.arm->label] = scene.arm->height;

  Image8 rgb;
  std::vector<int> labels;
  for (int t = 0; t < T; ++t) {
    if (t > 0) step_scene(scene);
    render_scene(scene, rgb, labels);
    std::map<int, bool> seen;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int l = labels[static_cast<size_t>(y) * W + x];
        ep.gt_masks.at(t, y, x) = l;
        seen[l] = true;
        for (int c = 0; c < 3; ++c)
          ep.frames.at(t, y, x, c) = static_cast<float>(rgb.at(y, x, c)) / 255.0f;
        const double h = l == 0 ? 0.0 : ep.label_heights.at(l);
        ep.gt_depth.at(t, y, x) = static_cast<float>(ep.camera_meta.table_depth - h);
      }
    // persistent id == stable label for synthetic scenes
    for (auto& [l, present] : seen)
      if (l != 0 && present) ep.gt_track_ids[t][l] = l;
  }
  return ep;
}

// ---- on-disk dataset ----

struct DatasetManifest {
  int train = 0, val = 0, test = 0;
  uint64_t spec_hash = 0;
  int format_version = 1;

  int total() const { return train + val + test; }
};

namespace detail {

inline std::string ep_dir_name(int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ep_%05d", idx);
  return buf;
}

inline std::string frame_name(const char* stem, int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%03d.png", stem, t);
  return buf;
}

inline nlohmann::json spec_to_json(const SceneSpec& s) {
  nlohmann::json j;
  j["image_height"] = s.image_height;
  j["image_width"] = s.image_width;
  j["num_objects"] = s.num_objects;
  std::vector<std::string> shapes;
  for (auto sh : s.sprite_shapes) shapes.push_back(shape_name(sh));
  j["sprite_shapes"] = shapes;
  std::vector<std::array<int, 3>> pal;
  for (auto c : s.palette) pal.push_back({c.r, c.g, c.b});
  j["palette"] = pal;
  j["arm_enabled"] = s.arm_enabled;
  j["episode_length"] = s.episode_length;
  j["rng_seed"] = s.rng_seed;
  j["motion"] = s.motion == SpriteMotion::kDrift ? "drift" : "static";
  return j;
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.image_height = j.at("image_height");
  s.image_width = j.at("image_width");
  s.num_objects = j.at("num_objects");
  s.sprite_shapes.clear();
  for (const auto& n : j.at("sprite_shapes")) s.sprite_shapes.push_back(shape_from_name(n));
  s.palette.clear();
  for (const auto& c : j.at("palette"))
    s.palette.push_back({static_cast<uint8_t>(c[0].get<int>()), static_cast<uint8_t>(c[1].get<int>()),
                         static_cast<uint8_t>(c[2].get<int>())});
  s.arm_enabled = j.at("arm_enabled");
  s.episode_length = j.at("episode_length");
  s.rng_seed = j.at("rng_seed").get<uint64_t>();
  s.motion = j.at("motion") == "drift" ? SpriteMotion::kDrift : SpriteMotion::kStaticUntilPushed;
  return s;
}

}  // namespace detail

inline const char* split_name(int split) { return split == 0 ? "train" : (split == 1 ? "val" : "test"); }

// Splits episodes train/val/test by the given ratio parts and writes
// root/{split}/ep_xxxxx/{frame_ttt.png, mask_ttt.png, meta.json} + manifest.
inline DatasetManifest write_dataset(const std::vector<VideoEpisode>& episodes,
                                     const std::string& root_path,
                                     std::array<int, 3> ratio = {10, 1, 1}) {
  namespace fs = std::filesystem;
  const int n = static_cast<int>(episodes.size());
  const int parts = ratio[0] + ratio[1] + ratio[2];
  DatasetManifest man;
  man.val = n * ratio[1] / parts;
  man.test = n * ratio[2] / parts;
  man.train = n - man.val - man.test;
  if (n > 0) man.spec_hash = episodes[0].spec.hash();

  fs::create_directories(root_path);
  int idx = 0;
  for (int split = 0; split < 3; ++split) {
    const int count = split == 0 ? man.train : (split == 1 ? man.val : man.test);
    for (int e = 0; e < count; ++e, ++idx) {
      const VideoEpisode& ep = episodes[idx];
      const fs::path dir = fs::path(root_path) / split_name(split) / detail::ep_dir_name(e);
      fs::create_directories(dir);
      const int T = ep.length(), H = ep.height(), W = ep.width();
      Image8 rgb{H, W, 3, {}};
      rgb.data.resize(static_cast<size_t>(H) * W * 3);
      Image8 gray{H, W, 1, {}};
      gray.data.resize(static_cast<size_t>(H) * W);
      for (int t = 0; t < T; ++t) {
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            for (int c = 0; c < 3; ++c)
              rgb.at(y, x, c) =
                  static_cast<uint8_t>(std::lround(ep.frames.at(t, y, x, c) * 255.0f));
            gray.at(y, x, 0) = static_cast<uint8_t>(ep.gt_masks.at(t, y, x));
          }
        write_png((dir / detail::frame_name("frame", t)).string(), rgb);
        write_png((dir / detail::frame_name("mask", t)).string(), gray);
      }
      nlohmann::json meta;
      meta["spec"] = detail::spec_to_json(ep.spec);
      meta["camera"] = {{"extent_x", ep.camera_meta.extent_x},
                        {"extent_y", ep.camera_meta.extent_y},
                        {"table_depth", ep.camera_meta.table_depth}};
      nlohmann::json heights = nlohmann::json::object();
      for (auto& [l, h] : ep.label_heights) heights[std::to_string(l)] = h;
      meta["label_heights"] = heights;
      nlohmann::json tracks = nlohmann::json::array();
      for (const auto& frame_map : ep.gt_track_ids) {
        nlohmann::json fm = nlohmann::json::object();
        for (auto& [l, id] : frame_map) fm[std::to_string(l)] = id;
        tracks.push_back(fm);
      }
      meta["gt_track_ids"] = tracks;
      std::ofstream mf(dir / "meta.json");
      mf << meta.dump(1);
      if (!mf) throw std::runtime_error("write_dataset: failed writing meta for episode " +
                                        std::to_string(idx));
    }
  }

  nlohmann::json j;
  j["train"] = man.train;
  j["val"] = man.val;
  j["test"] = man.test;
  j["spec_hash"] = man.spec_hash;
  j["format_version"] = man.format_version;
  std::ofstream mf(fs::path(root_path) / "manifest.json");
  mf << j.dump(1);
  return man;
}

inline DatasetManifest read_manifest(const std::string& root_path) {
  std::ifstream f(std::filesystem::path(root_path) / "manifest.json");
  if (!f) throw std::runtime_error("read_dataset: missing manifest at " + root_path);
  nlohmann::json j = nlohmann::json::parse(f);
  DatasetManifest m;
  m.train = j.at("train");
  m.val = j.at("val");
  m.test = j.at("test");
  m.spec_hash = j.at("spec_hash").get<uint64_t>();
  m.format_version = j.at("format_version");
  return m;
}

inline VideoEpisode read_episode(const std::string& root_path, const std::string& split, int e) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root_path) / split / detail::ep_dir_name(e);
  const std::string where = split + "/" + detail::ep_dir_name(e);
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw std::runtime_error("read_dataset: missing meta.json for episode " + where);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(mf);
  } catch (const std::exception& ex) {
    throw std::runtime_error("read_dataset: corrupt meta.json for episode " + where + ": " +
                             ex.what());
  }
  VideoEpisode ep;
  ep.spec = detail::spec_from_json(meta.at("spec"));
  ep.camera_meta.extent_x = meta.at("camera").at("extent_x");
  ep.camera_meta.extent_y = meta.at("camera").at("extent_y");
  ep.camera_meta.table_depth = meta.at("camera").at("table_depth");
  for (auto& [k, v] : meta.at("label_heights").items())
    ep.label_heights[std::stoi(k)] = v.get<double>();
  const int T = ep.spec.episode_length, H = ep.spec.image_height, W = ep.spec.image_width;
  ep.frames = Tensor<float>(Shape{T, H, W, 3});
  ep.gt_masks = Tensor<int>(Shape{T, H, W});
  ep.gt_depth = Tensor<float>(Shape{T, H, W});
  ep.gt_track_ids.resize(T);
  for (int t = 0; t < T; ++t) {
    Image8 rgb, gray;
    try {
      rgb = read_png((dir / detail::frame_name("frame", t)).string());
      gray = read_png((dir / detail::frame_name("mask", t)).string());
    } catch (const std::exception& ex) {
      throw std::runtime_error("read_dataset: episode " + where + ": " + ex.what());
    }
    if (rgb.height != H || rgb.width != W || rgb.channels != 3 || gray.height != H ||
        gray.width != W)
      throw std::runtime_error("read_dataset: episode " + where + ": unexpected image size");
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        for (int c = 0; c < 3; ++c)
          ep.frames.at(t, y, x, c) = static_cast<float>(rgb.at(y, x, c)) / 255.0f;
        const int l = gray.at(y, x, 0);
        ep.gt_masks.at(t, y, x) = l;
        const double h = l == 0 ? 0.0 : ep.label_heights.at(l);
        ep.gt_depth.at(t, y, x) = static_cast<float>(ep.camera_meta.table_depth - h);
      }
  }
  const auto& tracks = meta.at("gt_track_ids");
  for (int t = 0; t < T && t < static_cast<int>(tracks.size()); ++t)
    for (auto& [k, v] : tracks[t].items()) ep.gt_track_ids[t][std::stoi(k)] = v.get<int64_t>();
  return ep;
}

inline std::vector<VideoEpisode> read_dataset(const std::string& root_path,
                                              const std::string& split,
                                              int limit = -1) {
  const DatasetManifest man = read_manifest(root_path);
  int count = split == "train" ? man.train : (split == "val" ? man.val : man.test);
  if (limit >= 0) count = std::min(count, limit);
  std::vector<VideoEpisode> out;
  out.reserve(count);
  for (int e = 0; e < count; ++e) out.push_back(read_episode(root_path, split, e));
  return out;
}

}  // namespace apex
