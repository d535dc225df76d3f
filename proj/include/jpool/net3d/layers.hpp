#pragma once

// Single-example forward/backward kernels. Activations are C x L x H x W tensors.
// Convolution is cross-correlation (no kernel flip) with zero padding.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "jpool/error.hpp"
#include "jpool/net3d/layer_spec.hpp"
#include "jpool/tensor.hpp"

namespace jpool::net3d {

/// Learnable parameters of one layer. Empty tensors for parameter-free layers.
/// conv3d: weight (C_out, C_in, k_t, k_y, k_x), bias (C_out).
/// fc:     weight (C_out, C_in * L * H * W),     bias (C_out).
struct LayerState {
  Tensor weight;
  Tensor bias;
  bool operator==(const LayerState&) const = default;
};

inline VolumeShape volume_of(const Tensor& t) {
  if (t.rank() != 4) throw ShapeError("expected a C x L x H x W tensor, got " + to_string(t.dims()));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

inline Tensor make_volume(const VolumeShape& s, double fill = 0.0) {
  return Tensor({s.c, s.l, s.h, s.w}, fill);
}

inline LayerState zero_state(const LayerSpec& spec, const VolumeShape& in) {
  LayerState st;
  if (spec.kind == LayerKind::kConv3d) {
    st.weight = Tensor({spec.channels_out, in.c, spec.kernel.t, spec.kernel.y, spec.kernel.x});
    st.bias = Tensor({spec.channels_out});
  } else if (spec.kind == LayerKind::kFc) {
    st.weight = Tensor({spec.channels_out, in.count()});
    st.bias = Tensor({spec.channels_out});
  }
  return st;
}

/// Zero bias; weights uniform in +-sqrt(6 / fan_in) for conv kernels (He, keeps ReLU
/// activations at unit scale through the trunk) and +-sqrt(6 / (fan_in + fan_out)) for fc.
template <typename Rng>
void init_weights(LayerState& st, Rng& rng) {
  if (st.weight.empty()) return;
  const std::size_t out = st.weight.dim(0);
  const std::size_t in = st.weight.dim(1);
  const std::size_t receptive = st.weight.size() / (out * in);
  const double fan_in = static_cast<double>(in * receptive);
  const double fan_out = static_cast<double>(out * receptive);
  const bool conv = st.weight.rank() == 5;
  const double limit = std::sqrt(6.0 / (conv ? fan_in : fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& w : st.weight.values()) w = dist(rng);
  st.bias.fill(0.0);
}

namespace detail {

/// Output indices o in [0, out_n) with 0 <= o*s + k - p < in_n.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_n, std::size_t in_n,
                                                       std::size_t s, std::size_t k,
                                                       std::size_t p) {
  // o*s + k >= p
  std::size_t lo = 0;
  if (p > k) lo = (p - k + s - 1) / s;
  // o*s + k - p <= in_n - 1
  std::size_t hi = 0;
  if (in_n + p > k) hi = std::min(out_n, (in_n + p - k - 1) / s + 1);
  if (hi < lo) hi = lo;
  return {lo, hi};
}

inline void check_input(const Tensor& x, const LayerSpec& spec, const VolumeShape& expected) {
  if (x.rank() != 4 || volume_of(x) != expected)
    throw ShapeError("layer '" + spec.name + "': input " + to_string(x.dims()) +
                     " does not match " + to_string(expected));
}

}  // namespace detail

// ---- conv3d ----

inline Tensor conv3d_fwd(const Tensor& x, const LayerState& st, const LayerSpec& spec) {
  const VolumeShape in = volume_of(x);
  if (st.weight.rank() != 5 || st.weight.dim(1) != in.c || st.weight.dim(0) != spec.channels_out ||
      st.weight.dim(2) != spec.kernel.t || st.weight.dim(3) != spec.kernel.y ||
      st.weight.dim(4) != spec.kernel.x)
    throw ShapeError("conv3d '" + spec.name + "': weight " + to_string(st.weight.dims()) +
                     " inconsistent with input " + to_string(in));
  const VolumeShape out = output_shape(spec, in);
  Tensor y = make_volume(out);
  const auto [kt_n, ky_n, kx_n] = spec.kernel;
  const auto [st_, sy, sx] = spec.stride;
  const auto [pt, py, px] = spec.padding;
  const double* xd = x.data();
  const double* wd = st.weight.data();
  double* yd = y.data();
  const std::size_t plane = out.spatial_count();

  for (std::size_t co = 0; co < out.c; ++co) {
    double* yo_base = yd + co * plane;
    std::fill(yo_base, yo_base + plane, st.bias[co]);
    for (std::size_t ci = 0; ci < in.c; ++ci) {
      const double* xc = xd + ci * in.spatial_count();
      for (std::size_t kt = 0; kt < kt_n; ++kt) {
        const auto [t_lo, t_hi] = detail::valid_range(out.l, in.l, st_, kt, pt);
        for (std::size_t ky = 0; ky < ky_n; ++ky) {
          const auto [y_lo, y_hi] = detail::valid_range(out.h, in.h, sy, ky, py);
          for (std::size_t kx = 0; kx < kx_n; ++kx) {
            const auto [x_lo, x_hi] = detail::valid_range(out.w, in.w, sx, kx, px);
            const double wv = wd[(((co * in.c + ci) * kt_n + kt) * ky_n + ky) * kx_n + kx];
            for (std::size_t to = t_lo; to < t_hi; ++to) {
              const std::size_t ti = to * st_ + kt - pt;
              for (std::size_t yo = y_lo; yo < y_hi; ++yo) {
                const std::size_t yi = yo * sy + ky - py;
                double* orow = yo_base + (to * out.h + yo) * out.w;
                const double* xrow = xc + (ti * in.h + yi) * in.w;
                if (sx == 1) {
                  for (std::size_t xo = x_lo; xo < x_hi; ++xo) orow[xo] += wv * xrow[xo + kx - px];
                } else {
                  for (std::size_t xo = x_lo; xo < x_hi; ++xo)
                    orow[xo] += wv * xrow[xo * sx + kx - px];
                }
              }
            }
          }
        }
      }
    }
  }
  return y;
}

struct ParamGrads {
  Tensor d_input;
  LayerState d_params;
};

/// Gradients of conv3d_fwd given the forward input `x`.
inline ParamGrads conv3d_bwd(const Tensor& d_out, const Tensor& x, const LayerState& st,
                             const LayerSpec& spec) {
  const VolumeShape in = volume_of(x);
  const VolumeShape out = output_shape(spec, in);
  if (volume_of(d_out) != out)
    throw ShapeError("conv3d_bwd '" + spec.name + "': gradient " + to_string(d_out.dims()) +
                     " does not match output " + to_string(out));
  ParamGrads g{make_volume(in), {Tensor(st.weight.dims()), Tensor(st.bias.dims())}};
  const auto [kt_n, ky_n, kx_n] = spec.kernel;
  const auto [st_, sy, sx] = spec.stride;
  const auto [pt, py, px] = spec.padding;
  const double* xd = x.data();
  const double* wd = st.weight.data();
  const double* gd = d_out.data();
  double* dxd = g.d_input.data();
  double* dwd = g.d_params.weight.data();
  const std::size_t plane = out.spatial_count();

  for (std::size_t co = 0; co < out.c; ++co) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += gd[co * plane + i];
    g.d_params.bias[co] = s;
  }

  for (std::size_t co = 0; co < out.c; ++co) {
    const double* gc = gd + co * plane;
    for (std::size_t ci = 0; ci < in.c; ++ci) {
      const double* xc = xd + ci * in.spatial_count();
      double* dxc = dxd + ci * in.spatial_count();
      for (std::size_t kt = 0; kt < kt_n; ++kt) {
        const auto [t_lo, t_hi] = detail::valid_range(out.l, in.l, st_, kt, pt);
        for (std::size_t ky = 0; ky < ky_n; ++ky) {
          const auto [y_lo, y_hi] = detail::valid_range(out.h, in.h, sy, ky, py);
          for (std::size_t kx = 0; kx < kx_n; ++kx) {
            const auto [x_lo, x_hi] = detail::valid_range(out.w, in.w, sx, kx, px);
            const std::size_t widx = (((co * in.c + ci) * kt_n + kt) * ky_n + ky) * kx_n + kx;
            const double wv = wd[widx];
            double dw = 0.0;
            for (std::size_t to = t_lo; to < t_hi; ++to) {
              const std::size_t ti = to * st_ + kt - pt;
              for (std::size_t yo = y_lo; yo < y_hi; ++yo) {
                const std::size_t yi = yo * sy + ky - py;
                const double* grow = gc + (to * out.h + yo) * out.w;
                const std::size_t row = (ti * in.h + yi) * in.w;
                const double* xrow = xc + row;
                double* dxrow = dxc + row;
                for (std::size_t xo = x_lo; xo < x_hi; ++xo) {
                  const std::size_t xi = xo * sx + kx - px;
                  dw += grow[xo] * xrow[xi];
                  dxrow[xi] += grow[xo] * wv;
                }
              }
            }
            dwd[widx] = dw;
          }
        }
      }
    }
  }
  return g;
}

// ---- pool3d (max) ----

struct PoolResult {
  Tensor output;
  /// Flat input index that produced each output value.
  std::vector<std::size_t> argmax;
};

/// Max pooling. Ties keep the first index in (t, y, x) scan order; padding never wins.
inline PoolResult maxpool3d_fwd(const Tensor& x, const LayerSpec& spec) {
  const VolumeShape in = volume_of(x);
  const VolumeShape out = output_shape(spec, in);
  PoolResult r{make_volume(out), std::vector<std::size_t>(out.count())};
  const auto [kt_n, ky_n, kx_n] = spec.kernel;
  const auto [st_, sy, sx] = spec.stride;
  const auto [pt, py, px] = spec.padding;
  std::size_t o = 0;
  for (std::size_t c = 0; c < out.c; ++c)
    for (std::size_t to = 0; to < out.l; ++to)
      for (std::size_t yo = 0; yo < out.h; ++yo)
        for (std::size_t xo = 0; xo < out.w; ++xo, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = std::numeric_limits<std::size_t>::max();
          for (std::size_t kt = 0; kt < kt_n; ++kt) {
            const std::size_t tp = to * st_ + kt;
            if (tp < pt || tp - pt >= in.l) continue;
            for (std::size_t ky = 0; ky < ky_n; ++ky) {
              const std::size_t yp = yo * sy + ky;
              if (yp < py || yp - py >= in.h) continue;
              for (std::size_t kx = 0; kx < kx_n; ++kx) {
                const std::size_t xp = xo * sx + kx;
                if (xp < px || xp - px >= in.w) continue;
                const std::size_t idx = ((c * in.l + tp - pt) * in.h + yp - py) * in.w + xp - px;
                if (best_idx == std::numeric_limits<std::size_t>::max() || x[idx] > best) {
                  best = x[idx];
                  best_idx = idx;
                }
              }
            }
          }
          r.output[o] = best_idx == std::numeric_limits<std::size_t>::max() ? 0.0 : best;
          r.argmax[o] = best_idx;
        }
  return r;
}

inline Tensor maxpool3d_bwd(const Tensor& d_out, const std::vector<std::size_t>& argmax,
                            const VolumeShape& in) {
  if (d_out.size() != argmax.size())
    throw ShapeError("maxpool3d_bwd: gradient size does not match forward output");
  Tensor dx = make_volume(in);
  for (std::size_t o = 0; o < argmax.size(); ++o)
    if (argmax[o] != std::numeric_limits<std::size_t>::max()) dx[argmax[o]] += d_out[o];
  return dx;
}

// ---- pointwise ----

inline Tensor relu_fwd(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

inline Tensor relu_bwd(const Tensor& d_out, const Tensor& x) {
  if (d_out.dims() != x.dims()) throw ShapeError("relu_bwd: shape mismatch");
  Tensor dx = d_out;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(x[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Tensor sigmoid_fwd(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = sigmoid(v);
  return y;
}

/// Uses the forward output y = sigmoid(x).
inline Tensor sigmoid_bwd(const Tensor& d_out, const Tensor& y) {
  if (d_out.dims() != y.dims()) throw ShapeError("sigmoid_bwd: shape mismatch");
  Tensor dx = d_out;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= y[i] * (1.0 - y[i]);
  return dx;
}

// ---- fully connected ----

/// Flattens x and returns a (C_out, 1, 1, 1) volume.
inline Tensor fc_fwd(const Tensor& x, const LayerState& st, const LayerSpec& spec) {
  if (st.weight.rank() != 2 || st.weight.dim(1) != x.size() || st.weight.dim(0) != spec.channels_out)
    throw ShapeError("fc '" + spec.name + "': weight " + to_string(st.weight.dims()) +
                     " vs input of " + std::to_string(x.size()) + " values");
  const std::size_t n_out = st.weight.dim(0), n_in = st.weight.dim(1);
  Tensor y({n_out, 1, 1, 1});
  for (std::size_t o = 0; o < n_out; ++o) {
    const double* w = st.weight.data() + o * n_in;
    double s = 0.0;
    for (std::size_t i = 0; i < n_in; ++i) s += w[i] * x[i];
    y[o] = s + st.bias[o];
  }
  return y;
}

inline ParamGrads fc_bwd(const Tensor& d_out, const Tensor& x, const LayerState& st) {
  const std::size_t n_out = st.weight.dim(0), n_in = st.weight.dim(1);
  if (d_out.size() != n_out || x.size() != n_in) throw ShapeError("fc_bwd: shape mismatch");
  ParamGrads g{Tensor(x.dims()), {Tensor(st.weight.dims()), Tensor(st.bias.dims())}};
  for (std::size_t o = 0; o < n_out; ++o) {
    const double go = d_out[o];
    const double* w = st.weight.data() + o * n_in;
    double* dw = g.d_params.weight.data() + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) {
      dw[i] = go * x[i];
      g.d_input[i] += go * w[i];
    }
    g.d_params.bias[o] = go;
  }
  return g;
}

// ---- softmax ----

/// Softmax over all entries, stabilized by subtracting the maximum.
inline std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> p(z.begin(), z.end());
  if (p.empty()) return p;
  const double m = *std::max_element(p.begin(), p.end());
  double s = 0.0;
  for (double& v : p) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : p) v /= s;
  return p;
}

inline Tensor softmax_fwd(const Tensor& x) { return Tensor(x.dims(), softmax(x.values())); }

/// Vector-Jacobian product of softmax given its output y.
inline Tensor softmax_bwd(const Tensor& d_out, const Tensor& y) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += d_out[i] * y[i];
  Tensor dx(y.dims());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (d_out[i] - dot);
  return dx;
}

}  // namespace jpool::net3d
