#pragma once

// Central finite differences and per-layer gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "jpool/net3d/layers.hpp"
#include "jpool/tensor.hpp"

namespace jpool {

/// Central-difference gradient of f with respect to every entry of `v` (perturbed in place).
inline std::vector<double> numeric_gradient(std::vector<double>& v, const std::function<double()>& f,
                                            double eps = 1e-5) {
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + eps;
    const double fp = f();
    v[i] = keep - eps;
    const double fm = f();
    v[i] = keep;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

/// max|a - n| / max(max|a|, max|n|).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale == 0.0 ? diff : diff / scale;
}

struct GradcheckResult {
  std::string name;
  double rel_error = 0.0;
  double threshold = 0.0;
  bool pass() const { return std::isfinite(rel_error) && rel_error < threshold; }
};

namespace detail {

inline Tensor uniform_tensor(Dims dims, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(dims));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.values()) v = d(rng);
  return t;
}

/// Magnitudes in [0.05, 1] with random sign: no value sits within eps of a ReLU kink.
inline Tensor signed_tensor(Dims dims, std::mt19937_64& rng) {
  Tensor t(std::move(dims));
  std::uniform_real_distribution<double> d(0.05, 1.0);
  std::bernoulli_distribution s(0.5);
  for (double& v : t.values()) v = s(rng) ? d(rng) : -d(rng);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

namespace gradcheck {

using net3d::LayerSpec;
using net3d::LayerState;

inline constexpr double kLayerThreshold = 1e-6;
inline constexpr double kEps = 1e-5;

/// Scalar probe loss <r, conv(x)>; checks d/dx, d/dW and d/db.
inline GradcheckResult conv3d(std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  const LayerSpec spec = LayerSpec::conv("conv", 3, {3, 3, 3}, {1, 2, 1}, {1, 1, 0});
  Tensor x = detail::uniform_tensor({2, 4, 4, 4}, rng, -1, 1);
  LayerState st{detail::uniform_tensor({3, 2, 3, 3, 3}, rng, -1, 1),
                detail::uniform_tensor({3}, rng, -1, 1)};
  const Tensor y0 = net3d::conv3d_fwd(x, st, spec);
  const Tensor r = detail::uniform_tensor(y0.dims(), rng, -1, 1);
  auto loss = [&] { return detail::dot(r, net3d::conv3d_fwd(x, st, spec)); };
  const auto g = net3d::conv3d_bwd(r, x, st, spec);
  double err = relative_error(g.d_input.values(), numeric_gradient(x.storage(), loss, kEps));
  err = std::max(err, relative_error(g.d_params.weight.values(),
                                     numeric_gradient(st.weight.storage(), loss, kEps)));
  err = std::max(err, relative_error(g.d_params.bias.values(),
                                     numeric_gradient(st.bias.storage(), loss, kEps)));
  return {"conv3d", err, kLayerThreshold};
}

inline GradcheckResult pool3d(std::uint64_t seed = 2) {
  std::mt19937_64 rng(seed);
  const LayerSpec spec = LayerSpec::pool("pool", {2, 2, 2}, {2, 2, 2});
  // Distinct values spaced well beyond eps so no window has a near-tie.
  Tensor x({2, 4, 4, 4});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01 * static_cast<double>(i);
  std::shuffle(x.storage().begin(), x.storage().end(), rng);
  const auto fwd = net3d::maxpool3d_fwd(x, spec);
  const Tensor r = detail::uniform_tensor(fwd.output.dims(), rng, -1, 1);
  auto loss = [&] { return detail::dot(r, net3d::maxpool3d_fwd(x, spec).output); };
  const Tensor dx = net3d::maxpool3d_bwd(r, fwd.argmax, net3d::volume_of(x));
  return {"pool3d", relative_error(dx.values(), numeric_gradient(x.storage(), loss, kEps)),
          kLayerThreshold};
}

inline GradcheckResult relu(std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  Tensor x = detail::signed_tensor({2, 3, 3, 3}, rng);
  const Tensor r = detail::uniform_tensor(x.dims(), rng, -1, 1);
  auto loss = [&] { return detail::dot(r, net3d::relu_fwd(x)); };
  const Tensor dx = net3d::relu_bwd(r, x);
  return {"relu", relative_error(dx.values(), numeric_gradient(x.storage(), loss, kEps)),
          kLayerThreshold};
}

inline GradcheckResult sigmoid(std::uint64_t seed = 4) {
  std::mt19937_64 rng(seed);
  Tensor x = detail::uniform_tensor({2, 3, 3, 3}, rng, -3, 3);
  const Tensor r = detail::uniform_tensor(x.dims(), rng, -1, 1);
  auto loss = [&] { return detail::dot(r, net3d::sigmoid_fwd(x)); };
  const Tensor dx = net3d::sigmoid_bwd(r, net3d::sigmoid_fwd(x));
  return {"sigmoid", relative_error(dx.values(), numeric_gradient(x.storage(), loss, kEps)),
          kLayerThreshold};
}

inline GradcheckResult fc(std::uint64_t seed = 5) {
  std::mt19937_64 rng(seed);
  const LayerSpec spec = LayerSpec::fc("fc", 4);
  Tensor x = detail::uniform_tensor({3, 2, 2, 2}, rng, -1, 1);
  LayerState st{detail::uniform_tensor({4, 24}, rng, -1, 1), detail::uniform_tensor({4}, rng, -1, 1)};
  const Tensor r = detail::uniform_tensor({4, 1, 1, 1}, rng, -1, 1);
  auto loss = [&] { return detail::dot(r, net3d::fc_fwd(x, st, spec)); };
  const auto g = net3d::fc_bwd(r, x, st);
  double err = relative_error(g.d_input.values(), numeric_gradient(x.storage(), loss, kEps));
  err = std::max(err, relative_error(g.d_params.weight.values(),
                                     numeric_gradient(st.weight.storage(), loss, kEps)));
  err = std::max(err, relative_error(g.d_params.bias.values(),
                                     numeric_gradient(st.bias.storage(), loss, kEps)));
  return {"fc", err, kLayerThreshold};
}

inline GradcheckResult softmax(std::uint64_t seed = 6) {
  std::mt19937_64 rng(seed);
  Tensor x = detail::uniform_tensor({5, 1, 1, 1}, rng, -2, 2);
  const Tensor r = detail::uniform_tensor(x.dims(), rng, -1, 1);
  auto loss = [&] { return detail::dot(r, net3d::softmax_fwd(x)); };
  const Tensor dx = net3d::softmax_bwd(r, net3d::softmax_fwd(x));
  return {"softmax", relative_error(dx.values(), numeric_gradient(x.storage(), loss, kEps)),
          kLayerThreshold};
}

inline std::vector<GradcheckResult> layers() {
  return {conv3d(), pool3d(), relu(), sigmoid(), fc(), softmax()};
}

}  // namespace gradcheck
}  // namespace jpool
