#pragma once

// Clip and video descriptors built from pooled matrices, plus late score fusion.
//
// Basic: each clip contributes its M x C pooled rows concatenated (length C*N*L);
// clips are averaged, then L2-normalized. Advanced: max+min over the L per-frame
// vectors of a clip (length 2*C*N), max+min again over clips (4*C*N), normalized.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "jpool/error.hpp"
#include "jpool/poolgen.hpp"
#include "jpool/tensor.hpp"
#include "jpool/tensor_io.hpp"

namespace jpool {

enum class AggKind { kBasic, kAdvanced };

inline std::string_view agg_name(AggKind k) { return k == AggKind::kBasic ? "basic" : "advanced"; }

inline AggKind parse_agg(std::string_view s) {
  if (s == "basic") return AggKind::kBasic;
  if (s == "advanced") return AggKind::kAdvanced;
  throw ConfigError("unknown aggregation '" + std::string(s) + "' (basic|advanced)");
}

struct Descriptor {
  std::vector<double> values;
  AggKind kind = AggKind::kBasic;
  std::size_t channels = 0;
  std::size_t n_joints = 0;
  std::size_t clip_len = 0;
  std::string id;
  int label = -1;

  static std::size_t expected_length(AggKind kind, std::size_t c, std::size_t n, std::size_t l) {
    return kind == AggKind::kBasic ? c * n * l : 4 * c * n;
  }
};

/// Rows of P concatenated in frame-major, joint-minor order.
inline std::vector<double> clip_vector_basic(const PooledMatrix& pm) { return pm.p.storage(); }

/// L vectors f^t of length N*C: the joints of frame t side by side.
inline std::vector<std::vector<double>> frame_groups(const PooledMatrix& pm) {
  const std::size_t width = pm.n_joints * pm.channels();
  const auto& v = pm.p.storage();
  std::vector<std::vector<double>> out(pm.clip_len);
  for (std::size_t t = 0; t < pm.clip_len; ++t)
    out[t].assign(v.begin() + static_cast<long>(t * width),
                  v.begin() + static_cast<long>((t + 1) * width));
  return out;
}

/// Elementwise mean over clips, then L2 normalization.
inline std::vector<double> video_descriptor_basic(const std::vector<std::vector<double>>& clips) {
  if (clips.empty()) throw ShapeError("video descriptor: no clips");
  const std::size_t d = clips.front().size();
  std::vector<double> sum(d, 0.0);
  for (const auto& c : clips) {
    if (c.size() != d) throw ShapeError("video descriptor: clip vectors differ in length");
    for (std::size_t i = 0; i < d; ++i) sum[i] += c[i];
  }
  const double k = static_cast<double>(clips.size());
  for (double& v : sum) v /= k;
  return l2_normalize(sum);
}

/// [elementwise max, elementwise min].
inline std::vector<double> maxmin_pool(const std::vector<std::vector<double>>& vs) {
  if (vs.empty()) throw ShapeError("maxmin_pool: empty list");
  const std::size_t d = vs.front().size();
  std::vector<double> out(2 * d);
  std::copy(vs.front().begin(), vs.front().end(), out.begin());
  std::copy(vs.front().begin(), vs.front().end(), out.begin() + static_cast<long>(d));
  for (const auto& v : vs) {
    if (v.size() != d) throw ShapeError("maxmin_pool: vectors differ in length");
    for (std::size_t i = 0; i < d; ++i) {
      out[i] = std::max(out[i], v[i]);
      out[d + i] = std::min(out[d + i], v[i]);
    }
  }
  return out;
}

/// Per clip max+min over frames, then max+min over clips, then L2 normalization.
inline std::vector<double> video_descriptor_advanced(
    const std::vector<std::vector<std::vector<double>>>& clip_frames) {
  if (clip_frames.empty()) throw ShapeError("video descriptor: no clips");
  std::vector<std::vector<double>> per_clip;
  per_clip.reserve(clip_frames.size());
  for (const auto& frames : clip_frames) per_clip.push_back(maxmin_pool(frames));
  return l2_normalize(maxmin_pool(per_clip));
}

/// Video descriptor from the pooled matrices of its clips.
inline Descriptor aggregate(const std::vector<PooledMatrix>& clips, AggKind kind) {
  if (clips.empty()) throw ShapeError("aggregate: no clips");
  const PooledMatrix& f = clips.front();
  Descriptor d;
  d.kind = kind;
  d.channels = f.channels();
  d.n_joints = f.n_joints;
  d.clip_len = f.clip_len;
  for (const auto& c : clips)
    if (c.channels() != d.channels || c.n_joints != d.n_joints || c.clip_len != d.clip_len)
      throw ShapeError("aggregate: clips have different layouts");
  if (kind == AggKind::kBasic) {
    std::vector<std::vector<double>> vs;
    for (const auto& c : clips) vs.push_back(clip_vector_basic(c));
    d.values = video_descriptor_basic(vs);
  } else {
    std::vector<std::vector<std::vector<double>>> groups;
    for (const auto& c : clips) groups.push_back(frame_groups(c));
    d.values = video_descriptor_advanced(groups);
  }
  return d;
}

/// Weighted elementwise sum of per-model class scores. Empty weights means equal weights.
inline std::vector<double> fuse_scores(const std::vector<std::vector<double>>& scores,
                                       std::vector<double> weights = {}) {
  if (scores.empty()) throw ShapeError("fuse_scores: no score lists");
  if (weights.empty()) weights.assign(scores.size(), 1.0 / static_cast<double>(scores.size()));
  if (weights.size() != scores.size()) throw ConfigError("fuse_scores: one weight per model");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("fuse_scores: weights must sum to 1");
  const std::size_t k = scores.front().size();
  std::vector<double> out(k, 0.0);
  for (std::size_t m = 0; m < scores.size(); ++m) {
    if (scores[m].size() != k) throw ShapeError("fuse_scores: class counts differ");
    for (std::size_t c = 0; c < k; ++c) out[c] += weights[m] * scores[m][c];
  }
  return out;
}

inline void write_descriptor(const std::filesystem::path& path, const Descriptor& d) {
  write_tensor(path, Tensor({d.values.size()}, d.values));
  write_sidecar(path, {{"kind", std::string(agg_name(d.kind))},
                       {"C", d.channels},
                       {"N", d.n_joints},
                       {"L", d.clip_len},
                       {"id", d.id},
                       {"label", d.label}});
}

inline Descriptor read_descriptor(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  const auto j = read_sidecar(path);
  Descriptor d;
  try {
    d.kind = parse_agg(j.at("kind").get<std::string>());
    d.channels = j.at("C").get<std::size_t>();
    d.n_joints = j.at("N").get<std::size_t>();
    d.clip_len = j.at("L").get<std::size_t>();
    d.id = j.at("id").get<std::string>();
    d.label = j.at("label").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(sidecar_path(path).string() + ": " + e.what());
  }
  if (t.rank() != 1 ||
      t.size() != Descriptor::expected_length(d.kind, d.channels, d.n_joints, d.clip_len))
    throw ParseError(path.string() + ": descriptor length " + std::to_string(t.size()) +
                     " disagrees with sidecar layout");
  d.values = t.storage();
  return d;
}

}  // namespace jpool
