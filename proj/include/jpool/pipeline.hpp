#pragma once

// Video -> descriptor pipeline shared by the CLI and the acceptance suite.
//
// Feature maps are computed once per clip and cached; descriptors for different joint
// tracks (ground truth, noisy, predicted) are then pooled from the cache.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "jpool/aggregate.hpp"
#include "jpool/classify.hpp"
#include "jpool/datakit.hpp"
#include "jpool/jointmap.hpp"
#include "jpool/net3d/network.hpp"
#include "jpool/parallel.hpp"
#include "jpool/poolgen.hpp"
#include "jpool/seeding.hpp"

namespace jpool {

enum class PoolMethod { kSample, kBilinear };

struct ExtractOptions {
  std::string layer = "conv5b";
  MappingScheme scheme = MappingScheme::kCoordinate;
  int neighborhood = 1;
  AggKind agg = AggKind::kBasic;
  PoolMethod method = PoolMethod::kSample;
  std::size_t clip_len = 16;
  std::size_t overlap = 8;
};

/// The layer whose output is pooled: a conv layer's in-place ReLU when one follows it.
inline std::string activation_layer(const net3d::NetworkConfig& cfg, std::string_view layer) {
  const std::size_t i = cfg.index_of(layer);
  if (cfg.layers[i].kind == net3d::LayerKind::kConv3d && i + 1 < cfg.layers.size() &&
      cfg.layers[i + 1].kind == net3d::LayerKind::kRelu)
    return cfg.layers[i + 1].name;
  return std::string(layer);
}

struct VideoFeatures {
  std::string id;
  int label = -1;
  std::string split;
  std::vector<std::size_t> starts;  // clip start frames
  std::vector<Tensor> maps;         // C x l x h x w per clip
  JointTrack joints;                // full-video ground truth
};

inline VideoFeatures compute_features(const net3d::Network& net, const VideoSample& v,
                                      const ExtractOptions& opt) {
  if (v.frames.dim(2) != net.config().input.h || v.frames.dim(3) != net.config().input.w ||
      v.frames.dim(0) != net.config().input.c)
    throw ShapeError("video '" + v.id + "' frames " + to_string(v.frames.dims()) +
                     " do not match network input " + to_string(net.config().input));
  VideoFeatures f{v.id, v.label, v.split, clip_starts(v.n_frames(), opt.clip_len, opt.overlap), {},
                  v.joints};
  const std::string layer = activation_layer(net.config(), opt.layer);
  for (std::size_t s : f.starts) f.maps.push_back(net.forward(slice_frames(v.frames, s, opt.clip_len), layer));
  return f;
}

inline std::vector<VideoFeatures> compute_features(const net3d::Network& net,
                                                   const std::vector<VideoSample>& videos,
                                                   const ExtractOptions& opt,
                                                   std::size_t threads = thread_count()) {
  std::vector<VideoFeatures> out(videos.size());
  parallel_for(videos.size(), [&](std::size_t i) { out[i] = compute_features(net, videos[i], opt); },
               threads);
  return out;
}

/// Pooled matrix of one clip for a clip-local joint track.
inline PooledMatrix pool_clip(const Tensor& maps, const JointTrack& clip_joints,
                              const net3d::NetworkConfig& cfg, const ExtractOptions& opt) {
  const auto points = map_track(clip_joints, cfg, opt.layer, opt.scheme);
  if (opt.method == PoolMethod::kBilinear) {
    if (opt.neighborhood != 1) throw ConfigError("bilinear pooling samples single voxels");
    const auto stack = hard_heatmaps(points, clip_joints.n_joints(), clip_joints.n_frames(),
                                     net3d::volume_of(maps));
    return pool_bilinear(stack, maps, opt.layer);
  }
  return sample_pool_all(maps, points, clip_joints.n_joints(), clip_joints.n_frames(),
                         opt.neighborhood, opt.layer);
}

/// Joint-pooled descriptor of a video using `joints` (full-video track, possibly noisy).
inline Descriptor jdd_descriptor(const VideoFeatures& f, const JointTrack& joints,
                                 const net3d::NetworkConfig& cfg, const ExtractOptions& opt) {
  std::vector<PooledMatrix> clips;
  for (std::size_t k = 0; k < f.starts.size(); ++k)
    clips.push_back(pool_clip(f.maps[k], joints.slice(f.starts[k], opt.clip_len), cfg, opt));
  Descriptor d = aggregate(clips, opt.agg);
  d.id = f.id;
  d.label = f.label;
  return d;
}

inline Descriptor jdd_descriptor(const VideoFeatures& f, const net3d::NetworkConfig& cfg,
                                 const ExtractOptions& opt) {
  return jdd_descriptor(f, f.joints, cfg, opt);
}

/// Joint-agnostic baseline: per-clip channel means over the whole map, averaged over clips,
/// then L2-normalized.
inline Descriptor gap_descriptor(const VideoFeatures& f) {
  std::vector<std::vector<double>> clips;
  for (const Tensor& m : f.maps) {
    const std::size_t C = m.dim(0), vol = m.size() / C;
    std::vector<double> v(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < vol; ++k) v[c] += m[c * vol + k];
      v[c] /= static_cast<double>(vol);
    }
    clips.push_back(std::move(v));
  }
  Descriptor d;
  d.values = video_descriptor_basic(clips);
  d.kind = AggKind::kBasic;
  d.channels = f.maps.front().dim(0);
  d.n_joints = 1;
  d.clip_len = 1;
  d.id = f.id;
  d.label = f.label;
  return d;
}

struct SplitResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  CvResult cv;
  std::vector<int> test_pred;
  std::vector<int> test_labels;
  LinearModel model;
};

/// Selects lambda by cross-validation on `train`, refits on all of it, scores `test`.
inline SplitResult train_and_test(const std::vector<Descriptor>& train,
                                  const std::vector<Descriptor>& test, std::size_t n_classes,
                                  const LinearOptions& base,
                                  const std::vector<double>& grid = default_lambda_grid()) {
  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  for (const auto& d : train) {
    xs.push_back(d.values);
    ys.push_back(d.label);
  }
  SplitResult r;
  r.cv = select_lambda(xs, ys, n_classes, grid, base);
  LinearOptions opt = base;
  opt.lambda = r.cv.lambda;
  r.model = train_linear(xs, ys, n_classes, opt).model;
  std::vector<int> train_pred;
  for (const auto& x : xs) train_pred.push_back(predict_label(r.model, x));
  r.train_accuracy = accuracy(train_pred, ys);
  for (const auto& d : test) {
    r.test_pred.push_back(predict_label(r.model, d.values));
    r.test_labels.push_back(d.label);
  }
  if (!test.empty()) r.test_accuracy = accuracy(r.test_pred, r.test_labels);
  return r;
}

/// Splits descriptors by the videos' split tags and runs train_and_test.
template <typename MakeDescriptor>
SplitResult evaluate_split(const std::vector<VideoFeatures>& feats, MakeDescriptor&& make,
                           std::size_t n_classes, const LinearOptions& base,
                           const std::vector<double>& grid = default_lambda_grid(),
                           std::size_t threads = thread_count()) {
  std::vector<Descriptor> all(feats.size());
  parallel_for(feats.size(), [&](std::size_t i) { all[i] = make(feats[i]); }, threads);
  std::vector<Descriptor> train, test;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].split == "train") train.push_back(std::move(all[i]));
    else if (feats[i].split == "test") test.push_back(std::move(all[i]));
  }
  if (train.empty()) throw ConfigError("no videos in the train split");
  return train_and_test(train, test, n_classes, base, grid);
}

/// Joint track with noise of ratio alpha; the draw depends only on (seed, video id).
inline JointTrack noisy_joints(const VideoFeatures& f, double alpha, std::uint64_t noise_seed) {
  if (alpha == 0.0) return f.joints;
  return add_joint_noise(f.joints, {alpha, mix_seed(noise_seed, std::string_view(f.id))});
}

struct SweepPoint {
  double alpha = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double lambda = 0.0;
};

/// JDD accuracy with noisy joints (train and test) for each alpha.
inline std::vector<SweepPoint> noise_sweep(const std::vector<VideoFeatures>& feats,
                                           const net3d::NetworkConfig& cfg, const ExtractOptions& opt,
                                           const std::vector<double>& alphas, std::uint64_t noise_seed,
                                           std::size_t n_classes, const LinearOptions& base,
                                           std::size_t threads = thread_count()) {
  std::vector<SweepPoint> out;
  for (double a : alphas) {
    const auto r = evaluate_split(
        feats, [&](const VideoFeatures& f) { return jdd_descriptor(f, noisy_joints(f, a, noise_seed), cfg, opt); },
        n_classes, base, default_lambda_grid(), threads);
    out.push_back({a, r.train_accuracy, r.test_accuracy, r.cv.lambda});
  }
  return out;
}

}  // namespace jpool
