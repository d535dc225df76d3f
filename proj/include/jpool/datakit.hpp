#pragma once

// Videos, clips, joint noise, the synthetic generator, and dataset files.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "jpool/error.hpp"
#include "jpool/jointmap.hpp"
#include "jpool/json_io.hpp"
#include "jpool/seeding.hpp"
#include "jpool/tensor.hpp"
#include "jpool/tensor_io.hpp"

namespace jpool {

/// frames: C x T x H x W; joints cover the same T frames.
struct VideoSample {
  Tensor frames;
  JointTrack joints;
  int label = -1;
  std::string id;
  std::string split;

  std::size_t n_frames() const { return frames.dim(1); }
};

struct Clip {
  Tensor frames;  // C x L x H x W
  JointTrack joints;
  std::size_t start = 0;
};

/// Frames [start, start + len) of a C x T x H x W tensor.
inline Tensor slice_frames(const Tensor& frames, std::size_t start, std::size_t len) {
  if (frames.rank() != 4) throw ShapeError("video tensor must be C x T x H x W");
  const std::size_t C = frames.dim(0), T = frames.dim(1), HW = frames.dim(2) * frames.dim(3);
  if (len == 0 || start + len > T) throw ShapeError("frame slice out of range");
  Tensor out({C, len, frames.dim(2), frames.dim(3)});
  for (std::size_t c = 0; c < C; ++c) {
    const double* src = frames.data() + (c * T + start) * HW;
    std::copy(src, src + len * HW, out.data() + c * len * HW);
  }
  return out;
}

inline Clip make_clip(const VideoSample& v, std::size_t start, std::size_t len) {
  return {slice_frames(v.frames, start, len), v.joints.slice(start, len), start};
}

/// Standard windows every clip_len - overlap frames, plus a tail window flush to the end.
inline std::vector<std::size_t> clip_starts(std::size_t n_frames, std::size_t clip_len = 16,
                                            std::size_t overlap = 8) {
  if (clip_len == 0 || overlap >= clip_len) throw ConfigError("clip_len must exceed overlap");
  if (n_frames < clip_len)
    throw ShapeError("video has " + std::to_string(n_frames) + " frames, clip needs " +
                     std::to_string(clip_len));
  const std::size_t step = clip_len - overlap;
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + clip_len <= n_frames; s += step) starts.push_back(s);
  if (starts.back() + clip_len < n_frames) starts.push_back(n_frames - clip_len);
  return starts;
}

inline std::vector<Clip> split_clips(const VideoSample& v, std::size_t clip_len = 16,
                                     std::size_t overlap = 8) {
  std::vector<Clip> out;
  for (std::size_t s : clip_starts(v.n_frames(), clip_len, overlap))
    out.push_back(make_clip(v, s, clip_len));
  return out;
}

/// First, middle and last windows.
inline std::vector<std::size_t> three_clip_starts(std::size_t n_frames, std::size_t clip_len = 16) {
  if (n_frames < clip_len)
    throw ShapeError("video has " + std::to_string(n_frames) + " frames, clip needs " +
                     std::to_string(clip_len));
  return {0, (n_frames - clip_len) / 2, n_frames - clip_len};
}

inline std::vector<Clip> sample_three_clips(const VideoSample& v, std::size_t clip_len = 16) {
  std::vector<Clip> out;
  for (std::size_t s : three_clip_starts(v.n_frames(), clip_len))
    out.push_back(make_clip(v, s, clip_len));
  return out;
}

struct NoiseSpec {
  double alpha = 0.0;
  std::uint64_t seed = 0;
};

/// x += N(0, alpha * W), y += N(0, alpha * H) per joint per frame; frames in order, x before y.
/// Draws are unit normals scaled by sigma, so one seed gives nested perturbations across alphas.
inline JointTrack add_joint_noise(const JointTrack& joints, const NoiseSpec& spec, double width,
                                  double height) {
  if (!(spec.alpha >= 0.0)) throw ConfigError("noise alpha must be >= 0");
  JointTrack out = joints;
  if (spec.alpha == 0.0) return out;
  const double sx = spec.alpha * width, sy = spec.alpha * height;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t t = 0; t < out.n_frames(); ++t)
    for (std::size_t i = 0; i < out.n_joints(); ++i) {
      auto& o = out.at(i, t);
      o.x += sx * z(rng);
      o.y += sy * z(rng);
    }
  return out;
}

inline JointTrack add_joint_noise(const JointTrack& joints, const NoiseSpec& spec) {
  return add_joint_noise(joints, spec, joints.frame_width(), joints.frame_height());
}

// Synthetic videos. Each class assigns a vertical direction (up or down) to every joint;
// the patterns are chosen so that every class moves the same number of blobs each way.
// Which joint moves which way is only visible with joint identities, so joint-agnostic
// pooling cannot separate the classes.

struct SynthSpec {
  std::size_t n_classes = 3;
  std::size_t n_videos = 30;
  std::size_t n_joints = 4;
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_frames = 16;
  std::size_t max_frames = 32;
  double blob_sigma = 1.5;
  double travel = 16.0;  // vertical pixels covered over the whole video
  double margin = 3.0;   // joints stay this far inside the frame
  std::uint64_t seed = 1;
};

/// Sign per joint (+1 down, -1 up) for each class. Balanced subsets of "up" joints come
/// first in lexicographic order, then progressively unbalanced ones.
inline std::vector<std::vector<int>> synth_class_patterns(std::size_t n_joints,
                                                          std::size_t n_classes) {
  if (n_joints == 0 || n_joints > 16) throw ConfigError("synthetic data needs 1..16 joints");
  std::vector<unsigned> masks;
  for (unsigned m = 0; m < (1u << n_joints); ++m) masks.push_back(m);
  auto rank = [&](unsigned m) {
    const long ups = std::popcount(m);
    return std::abs(2 * ups - static_cast<long>(n_joints));
  };
  auto lex_key = [&](unsigned m) {
    // Subsets compare by their sorted member lists, so {0,1} < {0,2} < {1,2}.
    std::vector<unsigned> v;
    for (unsigned i = 0; i < n_joints; ++i)
      if (m & (1u << i)) v.push_back(i);
    return v;
  };
  std::stable_sort(masks.begin(), masks.end(), [&](unsigned a, unsigned b) {
    if (rank(a) != rank(b)) return rank(a) < rank(b);
    if (std::popcount(a) != std::popcount(b)) return std::popcount(a) < std::popcount(b);
    return lex_key(a) < lex_key(b);
  });
  if (n_classes < 2) throw ConfigError("synthetic data needs >= 2 classes");
  if (n_classes > masks.size())
    throw ConfigError(std::to_string(n_joints) + " joints support at most " +
                      std::to_string(masks.size()) + " synthetic classes");
  std::vector<std::vector<int>> out;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<int> s(n_joints);
    for (std::size_t i = 0; i < n_joints; ++i) s[i] = (masks[c] >> i) & 1u ? -1 : +1;
    out.push_back(s);
  }
  return out;
}

inline VideoSample synth_video(const SynthSpec& spec, const std::vector<int>& pattern, int label,
                               std::uint64_t seed, std::string id) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  const std::size_t T = spec.min_frames + rng() % (spec.max_frames - spec.min_frames + 1);
  const std::size_t H = spec.height, W = spec.width, N = spec.n_joints;
  const double lo_y = spec.margin, hi_y = static_cast<double>(H) - 1.0 - spec.margin;
  const double lo_x = spec.margin, hi_x = static_cast<double>(W) - 1.0 - spec.margin;
  if (hi_y - lo_y < spec.travel) throw ConfigError("synthetic travel does not fit the frame");

  VideoSample v;
  v.label = label;
  v.id = std::move(id);
  v.joints = JointTrack(N, T, static_cast<double>(W), static_cast<double>(H));
  for (std::size_t i = 0; i < N; ++i) v.joints.names().push_back("joint" + std::to_string(i));

  const double wobble = 1.5;
  for (std::size_t i = 0; i < N; ++i) {
    const int s = pattern[i];
    const double y0 = s < 0 ? uniform(lo_y + spec.travel, hi_y) : uniform(lo_y, hi_y - spec.travel);
    const double x0 = uniform(lo_x + wobble, hi_x - wobble);
    const double phase = uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t t = 0; t < T; ++t) {
      const double f = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
      const double y = y0 + s * spec.travel * f + uniform(-0.25, 0.25);
      const double x = x0 + wobble * std::sin(2.0 * std::numbers::pi * f + phase);
      v.joints.at(i, t) = {std::clamp(x, lo_x, hi_x), std::clamp(y, lo_y, hi_y), true};
    }
  }

  std::vector<double> background(H * W);
  for (double& b : background) b = uniform(0.0, 0.25);
  v.frames = Tensor({spec.channels, T, H, W});
  const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
  std::vector<double> frame(H * W);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < H * W; ++k) frame[k] = background[k] + uniform(0.0, 0.05);
    for (std::size_t i = 0; i < N; ++i) {
      const auto& o = v.joints.at(i, t);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dx = static_cast<double>(x) - o.x, dy = static_cast<double>(y) - o.y;
          frame[y * W + x] = std::max(frame[y * W + x], std::exp(-(dx * dx + dy * dy) * inv2s2));
        }
    }
    for (std::size_t c = 0; c < spec.channels; ++c)
      std::copy(frame.begin(), frame.end(), v.frames.data() + (c * T + t) * H * W);
  }
  return v;
}

/// Labels cycle through classes (video k has label k mod n_classes); ids are "v0000", ...
inline std::vector<VideoSample> synth_generate(const SynthSpec& spec) {
  if (spec.min_frames == 0 || spec.min_frames > spec.max_frames)
    throw ConfigError("synthetic frame range is empty");
  const auto patterns = synth_class_patterns(spec.n_joints, spec.n_classes);
  std::vector<VideoSample> out;
  out.reserve(spec.n_videos);
  for (std::size_t k = 0; k < spec.n_videos; ++k) {
    char id[16];
    std::snprintf(id, sizeof id, "v%04zu", k);
    const int label = static_cast<int>(k % spec.n_classes);
    out.push_back(synth_video(spec, patterns[static_cast<std::size_t>(label)], label,
                              mix_seed(spec.seed, k), id));
  }
  return out;
}

// Skeleton files.

inline nlohmann::json skeleton_to_json(const JointTrack& tr) {
  nlohmann::json positions = nlohmann::json::array();
  for (std::size_t t = 0; t < tr.n_frames(); ++t) {
    nlohmann::json frame = nlohmann::json::array();
    for (std::size_t i = 0; i < tr.n_joints(); ++i) {
      const auto& o = tr.at(i, t);
      frame.push_back({o.x, o.y, o.visible ? 1 : 0});
    }
    positions.push_back(std::move(frame));
  }
  return {{"frames", tr.n_frames()},  {"joints", tr.n_joints()},   {"joint_names", tr.names()},
          {"width", tr.frame_width()}, {"height", tr.frame_height()}, {"positions", positions}};
}

inline JointTrack skeleton_from_json(const nlohmann::json& j, const std::string& origin) {
  return with_json_context(origin, [&] {
    const auto T = j.at("frames").get<std::size_t>();
    const auto N = j.at("joints").get<std::size_t>();
    const auto W = j.at("width").get<double>();
    const auto H = j.at("height").get<double>();
    if (T == 0 || N == 0) throw ParseError(origin + ": frames and joints must be >= 1");
    if (!(W > 0) || !(H > 0)) throw ParseError(origin + ": width and height must be positive");
    JointTrack tr(N, T, W, H);
    if (j.contains("joint_names")) {
      tr.names() = j.at("joint_names").get<std::vector<std::string>>();
      if (tr.names().size() != N)
        throw ParseError(origin + ": " + std::to_string(tr.names().size()) + " joint names for " +
                         std::to_string(N) + " joints");
    }
    const auto& pos = j.at("positions");
    if (!pos.is_array() || pos.size() != T)
      throw ParseError(origin + ": /positions must list " + std::to_string(T) + " frames");
    for (std::size_t t = 0; t < T; ++t) {
      const auto& frame = pos[t];
      if (!frame.is_array() || frame.size() != N)
        throw ParseError(origin + ": /positions/" + std::to_string(t) + " must list " +
                         std::to_string(N) + " joints");
      for (std::size_t i = 0; i < N; ++i) {
        const auto& e = frame[i];
        const std::string where = origin + ": /positions/" + std::to_string(t) + "/" + std::to_string(i);
        if (!e.is_array() || e.size() != 3) throw ParseError(where + " must be [x, y, visible]");
        const double x = e[0].get<double>(), y = e[1].get<double>();
        if (!std::isfinite(x) || !std::isfinite(y)) throw ParseError(where + ": non-finite coordinate");
        bool vis;
        if (e[2].is_boolean())
          vis = e[2].get<bool>();
        else if (e[2].is_number_integer() && (e[2].get<int>() == 0 || e[2].get<int>() == 1))
          vis = e[2].get<int>() == 1;
        else
          throw ParseError(where + ": visible must be 0, 1, true or false");
        tr.at(i, t) = {x, y, vis};
      }
    }
    return tr;
  });
}

inline void write_skeleton(const std::filesystem::path& path, const JointTrack& tr) {
  write_json_file(path, skeleton_to_json(tr));
}

inline JointTrack read_skeleton(const std::filesystem::path& path) {
  return skeleton_from_json(read_json_file(path), path.string());
}

// Video tensors.

inline void write_video_tensor(const std::filesystem::path& path, const Tensor& frames) {
  if (frames.rank() != 4) throw ShapeError("video tensor must be C x T x H x W");
  write_tensor(path, frames);
}

inline Tensor read_video_tensor(const std::filesystem::path& path) {
  Tensor t = read_tensor(path);
  if (t.rank() != 4)
    throw ParseError(path.string() + ": video tensor must have 4 dims, got " + to_string(t.dims()));
  return t;
}

// Dataset manifests: {"seed": s, "videos": [{id, video, skeleton, label, split}]} or a bare
// list of entries. Relative paths resolve against the manifest's directory.

struct ManifestEntry {
  std::string id;
  std::filesystem::path video;
  std::filesystem::path skeleton;
  int label = -1;
  std::string split;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> videos;

  std::size_t n_classes() const {
    int hi = -1;
    for (const auto& e : videos) hi = std::max(hi, e.label);
    return static_cast<std::size_t>(hi + 1);
  }

  std::vector<std::size_t> indices(std::string_view split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < videos.size(); ++i)
      if (split.empty() || videos[i].split == split) out.push_back(i);
    return out;
  }
};

inline DatasetManifest read_dataset_manifest(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  const auto root = path.parent_path();
  DatasetManifest m;
  const nlohmann::json* list = &j;
  with_json_context(path, [&] {
    if (j.is_object()) {
      m.seed = j.value("seed", std::uint64_t{0});
      list = &j.at("videos");
    }
    if (!list->is_array()) throw ParseError(path.string() + ": expected a list of videos");
    for (const auto& e : *list) {
      ManifestEntry me;
      me.id = e.at("id").get<std::string>();
      me.video = e.at("video").get<std::string>();
      me.skeleton = e.at("skeleton").get<std::string>();
      me.label = e.at("label").get<int>();
      me.split = e.value("split", std::string("train"));
      if (me.label < 0) throw ParseError(path.string() + ": video '" + me.id + "' has a negative label");
      if (me.video.is_relative()) me.video = root / me.video;
      if (me.skeleton.is_relative()) me.skeleton = root / me.skeleton;
      for (const auto& f : {me.video, me.skeleton})
        if (!std::filesystem::exists(f))
          throw ConfigError(path.string() + ": video '" + me.id + "' references missing file " +
                            f.string());
      m.videos.push_back(std::move(me));
    }
  });
  return m;
}

inline void write_dataset_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  const auto root = path.parent_path();
  nlohmann::json videos = nlohmann::json::array();
  for (const auto& e : m.videos) {
    auto rel = [&](const std::filesystem::path& p) {
      return (root.empty() ? p : std::filesystem::relative(p, root)).generic_string();
    };
    videos.push_back({{"id", e.id},
                      {"video", rel(e.video)},
                      {"skeleton", rel(e.skeleton)},
                      {"label", e.label},
                      {"split", e.split}});
  }
  write_json_file(path, {{"seed", m.seed}, {"videos", videos}});
}

inline VideoSample load_video(const ManifestEntry& e) {
  VideoSample v;
  v.frames = read_video_tensor(e.video);
  v.joints = read_skeleton(e.skeleton);
  v.label = e.label;
  v.id = e.id;
  v.split = e.split;
  if (v.joints.n_frames() != v.n_frames())
    throw ParseError(e.skeleton.string() + ": skeleton has " + std::to_string(v.joints.n_frames()) +
                     " frames, video '" + e.id + "' has " + std::to_string(v.n_frames()));
  return v;
}

/// Writes <dir>/videos/<id>.jpt, <dir>/skeletons/<id>.json and <dir>/manifest.json.
inline DatasetManifest write_dataset(const std::filesystem::path& dir,
                                     const std::vector<VideoSample>& videos, std::uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  for (const auto& v : videos) {
    ManifestEntry e{v.id, dir / "videos" / (v.id + ".jpt"), dir / "skeletons" / (v.id + ".json"),
                    v.label, v.split.empty() ? "train" : v.split};
    write_video_tensor(e.video, v.frames);
    write_skeleton(e.skeleton, v.joints);
    m.videos.push_back(std::move(e));
  }
  write_dataset_manifest(dir / "manifest.json", m);
  return m;
}

}  // namespace jpool
