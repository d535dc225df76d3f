#pragma once

// Heat maps and pooling of feature maps at joint grid points.
//
// Hard pooling samples C-vectors at grid points (a single voxel, or the max over a
// 3x3x3 cube). The same result for the single-voxel case comes out of the bilinear
// product P = A B^T, where A stacks one-hot heat maps (M x lhw) and B is the
// flattened feature map (C x lhw). The generalized form P = A W B^T adds a learned
// K1 x K2 matrix between the two streams.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "jpool/error.hpp"
#include "jpool/gradcheck.hpp"
#include "jpool/jointmap.hpp"
#include "jpool/json_io.hpp"
#include "jpool/net3d/layer_spec.hpp"
#include "jpool/tensor.hpp"
#include "jpool/tensor_io.hpp"

namespace jpool {

/// M = N x L volumes of shape l x h x w, stored as one (M, l, h, w) tensor.
/// Channel m belongs to frame t = m / N and joint i = m % N.
struct HeatMapStack {
  Tensor maps;
  std::size_t n_joints = 0;
  std::size_t clip_len = 0;

  std::size_t channels() const { return n_joints * clip_len; }
  std::size_t volume() const { return maps.size() / channels(); }
  Matrix matrix() const { return Matrix::from_tensor(maps); }
};

/// M x C pooled rows in heat-map channel order.
struct PooledMatrix {
  Matrix p;
  std::size_t n_joints = 0;
  std::size_t clip_len = 0;
  std::string layer;

  std::size_t channels() const { return p.cols(); }
};

inline std::size_t heatmap_channel(std::size_t frame, std::size_t joint, std::size_t n_joints) {
  return frame * n_joints + joint;
}

/// One-hot stack from grid points in frame-major order (index t * N + i).
inline HeatMapStack hard_heatmaps(const std::vector<GridPoint>& points, std::size_t n_joints,
                                  std::size_t clip_len, const net3d::VolumeShape& map) {
  if (points.size() != n_joints * clip_len)
    throw ShapeError("hard_heatmaps: " + std::to_string(points.size()) + " points for N=" +
                     std::to_string(n_joints) + " L=" + std::to_string(clip_len));
  HeatMapStack s{Tensor({points.size(), map.l, map.h, map.w}), n_joints, clip_len};
  for (std::size_t m = 0; m < points.size(); ++m) {
    const GridPoint& g = points[m];
    if (g.t >= map.l || g.y >= map.h || g.x >= map.w)
      throw ShapeError("hard_heatmaps: grid point outside " + to_string(map));
    s.maps.at({m, g.t, g.y, g.x}) = 1.0;
  }
  return s;
}

/// Hard heat maps for the first L frames of a track at the given layer.
inline HeatMapStack make_heatmaps(const JointTrack& joints, const net3d::NetworkConfig& cfg,
                                  std::string_view layer, std::size_t clip_len,
                                  MappingScheme scheme = MappingScheme::kCoordinate) {
  if (joints.n_frames() < clip_len)
    throw ShapeError("make_heatmaps: track has " + std::to_string(joints.n_frames()) +
                     " frames, clip needs " + std::to_string(clip_len));
  const JointTrack clip = joints.n_frames() == clip_len ? joints : joints.slice(0, clip_len);
  return hard_heatmaps(map_track(clip, cfg, layer, scheme), joints.n_joints(), clip_len,
                       cfg.shape_after(layer));
}

namespace detail {

inline void check_feature_map(const Tensor& feat) {
  if (feat.rank() != 4)
    throw ShapeError("feature map must be C x l x h x w, got " + to_string(feat.dims()));
}

}  // namespace detail

/// C-vector at p (neighborhood 1) or per-channel max over the in-bounds 3x3x3 cube (3).
inline std::vector<double> sample_pool(const Tensor& feat, const GridPoint& p, int neighborhood) {
  detail::check_feature_map(feat);
  const std::size_t C = feat.dim(0), L = feat.dim(1), H = feat.dim(2), W = feat.dim(3);
  if (p.t >= L || p.y >= H || p.x >= W) throw ShapeError("sample_pool: grid point out of range");
  std::vector<double> out(C);
  if (neighborhood == 1) {
    for (std::size_t c = 0; c < C; ++c) out[c] = feat.at({c, p.t, p.y, p.x});
    return out;
  }
  if (neighborhood != 3) throw ConfigError("neighborhood must be 1 or 3");
  auto lo = [](std::size_t v) { return v == 0 ? 0 : v - 1; };
  auto hi = [](std::size_t v, std::size_t n) { return std::min(v + 1, n - 1); };
  for (std::size_t c = 0; c < C; ++c) {
    double best = feat.at({c, p.t, p.y, p.x});
    for (std::size_t t = lo(p.t); t <= hi(p.t, L); ++t)
      for (std::size_t y = lo(p.y); y <= hi(p.y, H); ++y)
        for (std::size_t x = lo(p.x); x <= hi(p.x, W); ++x) best = std::max(best, feat.at({c, t, y, x}));
    out[c] = best;
  }
  return out;
}

/// Samples every grid point into an M x C matrix, one row per point.
inline PooledMatrix sample_pool_all(const Tensor& feat, const std::vector<GridPoint>& points,
                                    std::size_t n_joints, std::size_t clip_len, int neighborhood,
                                    std::string layer = {}) {
  detail::check_feature_map(feat);
  if (points.size() != n_joints * clip_len) throw ShapeError("sample_pool_all: point count");
  PooledMatrix out{Matrix(points.size(), feat.dim(0)), n_joints, clip_len, std::move(layer)};
  for (std::size_t m = 0; m < points.size(); ++m) {
    const auto v = sample_pool(feat, points[m], neighborhood);
    std::copy(v.begin(), v.end(), out.p.row(m).begin());
  }
  return out;
}

/// P = A B^T, A: M x K, B: C x K.
inline Matrix bilinear_product(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeError("bilinear_product: heat maps have " + std::to_string(a.cols()) +
                     " voxels, feature maps " + std::to_string(b.cols()));
  return matmul_bt(a, b);
}

inline PooledMatrix pool_bilinear(const HeatMapStack& stack, const Tensor& feat,
                                  std::string layer = {}) {
  detail::check_feature_map(feat);
  return {bilinear_product(stack.matrix(), Matrix::from_tensor(feat)), stack.n_joints,
          stack.clip_len, std::move(layer)};
}

/// P = A W B^T, A: M x K1, W: K1 x K2, B: C x K2.
inline Matrix bilinear_general_fwd(const Matrix& a, const Matrix& w, const Matrix& b) {
  if (a.cols() != w.rows() || w.cols() != b.cols())
    throw ShapeError("bilinear: A is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     ", W is " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()) +
                     ", B is " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  return matmul_bt(matmul(a, w), b);
}

struct BilinearGrads {
  Matrix d_a;
  Matrix d_w;
  Matrix d_b;
};

/// dA = dP B W^T, dB = dP^T A W, dW = A^T dP B.
inline BilinearGrads bilinear_general_bwd(const Matrix& d_p, const Matrix& a, const Matrix& w,
                                          const Matrix& b) {
  if (a.cols() != w.rows() || w.cols() != b.cols() || d_p.rows() != a.rows() ||
      d_p.cols() != b.rows())
    throw ShapeError("bilinear backward: inconsistent shapes");
  const Matrix dp_b = matmul(d_p, b);  // M x K2
  const Matrix a_w = matmul(a, w);     // M x K2
  return {matmul_bt(dp_b, w), matmul_at(a, dp_b), matmul_at(d_p, a_w)};
}

/// Identity when square, else uniform in +-1e-2.
inline Matrix bilinear_init(std::size_t k1, std::size_t k2, std::mt19937_64& rng) {
  if (k1 == k2) return Matrix::identity(k1);
  Matrix w(k1, k2);
  std::uniform_real_distribution<double> d(-1e-2, 1e-2);
  for (double& v : w.storage()) v = d(rng);
  return w;
}

namespace gradcheck {

/// Scalar probe loss <R, A W B^T> on M=3, K1=4, K2=5, C=2.
inline GradcheckResult bilinear(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  auto rand = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    for (double& v : m.storage()) v = d(rng);
    return m;
  };
  Matrix a = rand(3, 4), w = rand(4, 5), b = rand(2, 5);
  const Matrix r = rand(3, 2);
  auto loss = [&] {
    const Matrix p = bilinear_general_fwd(a, w, b);
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += r.storage()[i] * p.storage()[i];
    return s;
  };
  const BilinearGrads g = bilinear_general_bwd(r, a, w, b);
  double err = relative_error(g.d_a.storage(), numeric_gradient(a.storage(), loss, kEps));
  err = std::max(err, relative_error(g.d_w.storage(), numeric_gradient(w.storage(), loss, kEps)));
  err = std::max(err, relative_error(g.d_b.storage(), numeric_gradient(b.storage(), loss, kEps)));
  return {"bilinear", err, kLayerThreshold};
}

}  // namespace gradcheck

// Serialization: tensor file plus a JSON sidecar at <path>.json.

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

inline void write_sidecar(const std::filesystem::path& path, const nlohmann::json& j) {
  write_json_file(sidecar_path(path), j);
}

inline nlohmann::json read_sidecar(const std::filesystem::path& path) {
  return read_json_file(sidecar_path(path));
}

inline void write_pooled(const std::filesystem::path& path, const PooledMatrix& pm) {
  write_tensor(path, pm.p.to_tensor());
  write_sidecar(path, {{"N", pm.n_joints}, {"L", pm.clip_len}, {"C", pm.channels()},
                       {"layer", pm.layer}});
}

inline PooledMatrix read_pooled(const std::filesystem::path& path) {
  const Tensor t = read_tensor(path);
  const auto j = read_sidecar(path);
  try {
    PooledMatrix pm{Matrix::from_tensor(t), j.at("N").get<std::size_t>(),
                    j.at("L").get<std::size_t>(), j.at("layer").get<std::string>()};
    if (t.rank() != 2 || pm.p.rows() != pm.n_joints * pm.clip_len ||
        pm.p.cols() != j.at("C").get<std::size_t>())
      throw ParseError(path.string() + ": sidecar layout disagrees with tensor " +
                       to_string(t.dims()));
    return pm;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(sidecar_path(path).string() + ": " + e.what());
  }
}

inline void write_heatmaps(const std::filesystem::path& path, const HeatMapStack& s,
                           std::string_view layer) {
  write_tensor(path, s.maps);
  write_sidecar(path, {{"N", s.n_joints}, {"L", s.clip_len}, {"C", s.channels()},
                       {"layer", std::string(layer)}});
}

inline HeatMapStack read_heatmaps(const std::filesystem::path& path) {
  Tensor t = read_tensor(path);
  const auto j = read_sidecar(path);
  try {
    HeatMapStack s{std::move(t), j.at("N").get<std::size_t>(), j.at("L").get<std::size_t>()};
    if (s.maps.rank() != 4 || s.maps.dim(0) != s.channels())
      throw ParseError(path.string() + ": sidecar layout disagrees with tensor " +
                       to_string(s.maps.dims()));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(sidecar_path(path).string() + ": " + e.what());
  }
}

}  // namespace jpool
