#pragma once

// Body-joint coordinates and their mapping onto feature-map voxels.
//
// Two schemes: ratio scaling multiplies each coordinate by the ratio of map extent
// to clip extent; coordinate mapping folds every layer's kernel/stride/padding
// through x' = (x + pad - (k - 1) / 2) / stride. Both round once, at the end, with
// floor(v + 0.5), then clamp into the map.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "jpool/error.hpp"
#include "jpool/net3d/layer_spec.hpp"

namespace jpool {

struct JointObservation {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;
  bool operator==(const JointObservation&) const = default;
};

/// Per-video joint positions: N joints x T frames, pixel coordinates with the origin
/// at the top-left of a frame_width x frame_height frame.
class JointTrack {
 public:
  JointTrack() = default;
  JointTrack(std::size_t n_joints, std::size_t n_frames, double frame_width, double frame_height)
      : n_joints_(n_joints),
        n_frames_(n_frames),
        frame_width_(frame_width),
        frame_height_(frame_height),
        obs_(n_joints * n_frames) {
    if (n_joints == 0 || n_frames == 0) throw ShapeError("joint track needs >= 1 joint and frame");
  }

  std::size_t n_joints() const { return n_joints_; }
  std::size_t n_frames() const { return n_frames_; }
  double frame_width() const { return frame_width_; }
  double frame_height() const { return frame_height_; }

  JointObservation& at(std::size_t joint, std::size_t frame) {
    return obs_.at(frame * n_joints_ + joint);
  }
  const JointObservation& at(std::size_t joint, std::size_t frame) const {
    return obs_.at(frame * n_joints_ + joint);
  }

  std::vector<std::string>& names() { return names_; }
  const std::vector<std::string>& names() const { return names_; }

  /// Frames [start, start + length), re-based so the first frame is 0.
  JointTrack slice(std::size_t start, std::size_t length) const {
    if (start + length > n_frames_) throw ShapeError("joint track slice out of range");
    JointTrack out(n_joints_, length, frame_width_, frame_height_);
    out.names_ = names_;
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t i = 0; i < n_joints_; ++i) out.at(i, t) = at(i, start + t);
    return out;
  }

  /// Multiplies coordinates into a width x height frame.
  JointTrack rescaled(double width, double height) const {
    JointTrack out = *this;
    out.frame_width_ = width;
    out.frame_height_ = height;
    const double rx = width / frame_width_, ry = height / frame_height_;
    for (auto& o : out.obs_) {
      o.x *= rx;
      o.y *= ry;
    }
    return out;
  }

  bool operator==(const JointTrack&) const = default;

 private:
  std::size_t n_joints_ = 0;
  std::size_t n_frames_ = 0;
  double frame_width_ = 0.0;
  double frame_height_ = 0.0;
  std::vector<JointObservation> obs_;  // frame-major
  std::vector<std::string> names_;
};

/// A joint in clip coordinates (x_v, y_v, t_v); t is the frame index within the clip.
struct JointPoint {
  double x = 0.0, y = 0.0, t = 0.0;
};

/// Real-valued coordinate carried through the layer chain.
struct Point3 {
  double x = 0.0, y = 0.0, t = 0.0;
};

struct GridPoint {
  std::size_t x = 0, y = 0, t = 0;
  Point3 raw;            // before rounding
  bool clamped = false;  // input or output had to be moved into range
  bool operator==(const GridPoint& o) const { return x == o.x && y == o.y && t == o.t; }
};

enum class MappingScheme { kRatio, kCoordinate };

inline MappingScheme parse_scheme(std::string_view s) {
  if (s == "ratio") return MappingScheme::kRatio;
  if (s == "coordinate") return MappingScheme::kCoordinate;
  throw ConfigError("unknown mapping scheme '" + std::string(s) + "' (ratio|coordinate)");
}

inline double round_half_up(double v) { return std::floor(v + 0.5); }

namespace detail {

inline std::size_t round_and_clamp(double v, std::size_t extent, bool& clamped) {
  const double r = round_half_up(v);
  if (r < 0.0) {
    clamped = true;
    return 0;
  }
  if (r > static_cast<double>(extent - 1)) {
    clamped = true;
    return extent - 1;
  }
  return static_cast<std::size_t>(r);
}

inline double clamp_coord(double v, std::size_t extent, bool& clamped) {
  const double hi = static_cast<double>(extent) - 1.0;
  if (!std::isfinite(v)) {
    clamped = true;
    return v > 0 ? hi : 0.0;
  }
  if (v < 0.0) {
    clamped = true;
    return 0.0;
  }
  if (v > hi) {
    clamped = true;
    return hi;
  }
  return v;
}

inline JointPoint clamp_to_clip(JointPoint p, const net3d::VolumeShape& clip, bool& clamped) {
  return {clamp_coord(p.x, clip.w, clamped), clamp_coord(p.y, clip.h, clamped),
          clamp_coord(p.t, clip.l, clamped)};
}

inline GridPoint finish(Point3 raw, const net3d::VolumeShape& map, bool clamped) {
  GridPoint g;
  g.raw = raw;
  g.clamped = clamped;
  g.x = round_and_clamp(raw.x, map.w, g.clamped);
  g.y = round_and_clamp(raw.y, map.h, g.clamped);
  g.t = round_and_clamp(raw.t, map.l, g.clamped);
  return g;
}

}  // namespace detail

/// Ratio scaling: coordinate * (map extent / clip extent) per axis.
inline GridPoint ratio_scale(const JointPoint& joint, const net3d::VolumeShape& clip,
                             const net3d::VolumeShape& map) {
  bool clamped = false;
  const JointPoint p = detail::clamp_to_clip(joint, clip, clamped);
  const Point3 raw{p.x * static_cast<double>(map.w) / static_cast<double>(clip.w),
                   p.y * static_cast<double>(map.h) / static_cast<double>(clip.h),
                   p.t * static_cast<double>(map.l) / static_cast<double>(clip.l)};
  return detail::finish(raw, map, clamped);
}

/// One layer of coordinate mapping. Activations leave coordinates unchanged.
inline Point3 map_through_layer(const Point3& p, const net3d::LayerSpec& spec) {
  using net3d::LayerKind;
  switch (spec.kind) {
    case LayerKind::kConv3d:
    case LayerKind::kPool3d: {
      auto axis = [](double v, std::size_t k, std::size_t s, std::size_t pad) {
        return (v + static_cast<double>(pad) - (static_cast<double>(k) - 1.0) / 2.0) /
               static_cast<double>(s);
      };
      return {axis(p.x, spec.kernel.x, spec.stride.x, spec.padding.x),
              axis(p.y, spec.kernel.y, spec.stride.y, spec.padding.y),
              axis(p.t, spec.kernel.t, spec.stride.t, spec.padding.t)};
    }
    case LayerKind::kRelu:
    case LayerKind::kSigmoid:
      return p;
    case LayerKind::kFc:
    case LayerKind::kSoftmax:
      break;
  }
  throw ConfigError("layer '" + spec.name + "' (" + std::string(net3d::kind_name(spec.kind)) +
                    ") has no spatial grid to map onto");
}

/// Pre-rounding coordinate in the output of `layer`, folding all preceding layers.
inline Point3 map_to_layer_raw(const Point3& p, const net3d::NetworkConfig& cfg,
                               std::string_view layer) {
  const std::size_t last = cfg.index_of(layer);
  Point3 q = p;
  for (std::size_t i = 0; i <= last; ++i) q = map_through_layer(q, cfg.layers[i]);
  return q;
}

/// Coordinate mapping onto the voxel grid of `layer`'s output.
inline GridPoint map_to_layer(const JointPoint& joint, const net3d::NetworkConfig& cfg,
                              std::string_view layer) {
  bool clamped = false;
  const JointPoint p = detail::clamp_to_clip(joint, cfg.input, clamped);
  const Point3 raw = map_to_layer_raw({p.x, p.y, p.t}, cfg, layer);
  return detail::finish(raw, cfg.shape_after(layer), clamped);
}

/// Dispatches on the scheme.
inline GridPoint map_joint(const JointPoint& joint, const net3d::NetworkConfig& cfg,
                           std::string_view layer, MappingScheme scheme) {
  if (scheme == MappingScheme::kRatio) {
    // Validates the layer the same way coordinate mapping does.
    (void)map_to_layer_raw({}, cfg, layer);
    return ratio_scale(joint, cfg.input, cfg.shape_after(layer));
  }
  return map_to_layer(joint, cfg, layer);
}

// Closed forms for the C3D pattern (3x3x3 s1 p1 convs, pool1 1x2x2, later pools 2x2x2 s2),
// indexed by conv group i (conv1a is group 1, conv5a/conv5b group 5).

/// Spatial closed form: (v - (2^(i-1) - 1) / 2) / 2^(i-1). Valid for i >= 1.
inline double closed_form_c3d_spatial(double v, int group) {
  if (group < 1) throw ConfigError("spatial closed form needs conv group >= 1");
  const double d = std::ldexp(1.0, group - 1);
  return (v - (d - 1.0) / 2.0) / d;
}

/// Temporal closed form: (t - (2^(i-2) - 1) / 2) / 2^(i-2). Valid for i >= 2, since pool1
/// does not downsample time.
inline double closed_form_c3d_temporal(double t, int group) {
  if (group < 2) throw ConfigError("temporal closed form needs conv group >= 2");
  const double d = std::ldexp(1.0, group - 2);
  return (t - (d - 1.0) / 2.0) / d;
}

inline Point3 closed_form_c3d(const JointPoint& joint, int group) {
  if (group < 2) throw ConfigError("closed form triple needs conv group >= 2");
  return {closed_form_c3d_spatial(joint.x, group), closed_form_c3d_spatial(joint.y, group),
          closed_form_c3d_temporal(joint.t, group)};
}

/// Conv group of a C3D layer name such as "conv5b" or "relu4a"; 0 if not a conv group layer.
inline int c3d_conv_group(std::string_view layer) {
  for (std::string_view prefix : {"conv", "relu"}) {
    if (layer.size() == prefix.size() + 2 && layer.substr(0, prefix.size()) == prefix) {
      const char d = layer[prefix.size()];
      const char s = layer[prefix.size() + 1];
      if (d >= '1' && d <= '9' && (s == 'a' || s == 'b')) return d - '0';
    }
  }
  return 0;
}

/// Grid points for every (frame, joint) of a clip-length track, frame-major: index t * N + i.
inline std::vector<GridPoint> map_track(const JointTrack& track, const net3d::NetworkConfig& cfg,
                                        std::string_view layer, MappingScheme scheme) {
  std::vector<GridPoint> out;
  out.reserve(track.n_frames() * track.n_joints());
  for (std::size_t t = 0; t < track.n_frames(); ++t)
    for (std::size_t i = 0; i < track.n_joints(); ++i) {
      const auto& o = track.at(i, t);
      GridPoint g = map_joint({o.x, o.y, static_cast<double>(t)}, cfg, layer, scheme);
      if (!o.visible) g.clamped = true;
      out.push_back(g);
    }
  return out;
}

}  // namespace jpool
