#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "jpool/error.hpp"
#include "jpool/net3d/layer_spec.hpp"
#include "jpool/net3d/layers.hpp"
#include "jpool/tensor.hpp"
#include "jpool/tensor_io.hpp"

namespace jpool::net3d {

/// One LayerState per layer; also used to hold gradients and optimizer buffers.
using ParamSet = std::vector<LayerState>;

inline ParamSet zero_like(const ParamSet& p) {
  ParamSet z(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!p[i].weight.empty()) z[i].weight = Tensor(p[i].weight.dims());
    if (!p[i].bias.empty()) z[i].bias = Tensor(p[i].bias.dims());
  }
  return z;
}

/// Accumulates `src` into `dst` elementwise.
inline void accumulate(ParamSet& dst, const ParamSet& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    for (std::size_t k = 0; k < dst[i].weight.size(); ++k) dst[i].weight[k] += src[i].weight[k];
    for (std::size_t k = 0; k < dst[i].bias.size(); ++k) dst[i].bias[k] += src[i].bias[k];
  }
}

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardCache {
  std::vector<Tensor> inputs;   // inputs[i] is the input of layer i
  std::vector<Tensor> outputs;  // outputs[i] is the output of layer i
  std::vector<std::vector<std::size_t>> argmax;
  std::size_t last = std::numeric_limits<std::size_t>::max();

  bool valid() const { return last != std::numeric_limits<std::size_t>::max(); }
};

class Network {
 public:
  Network() = default;
  explicit Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto shapes = cfg_.shapes();
    states_.reserve(cfg_.layers.size());
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i)
      states_.push_back(zero_state(cfg_.layers[i], shapes[i]));
  }

  Network(NetworkConfig cfg, std::uint64_t seed) : Network(std::move(cfg)) { init(seed); }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& st : states_) init_weights(st, rng);
  }

  const NetworkConfig& config() const { return cfg_; }
  ParamSet& params() { return states_; }
  const ParamSet& params() const { return states_; }
  LayerState& state(std::string_view layer) { return states_[cfg_.index_of(layer)]; }
  const LayerState& state(std::string_view layer) const { return states_[cfg_.index_of(layer)]; }

  VolumeShape output_shape_at(std::size_t last) const { return cfg_.shapes().at(last + 1); }

  /// Runs layers [0, last]. Fills `cache` when given.
  Tensor forward(const Tensor& clip, std::size_t last, ForwardCache* cache = nullptr) const {
    if (last >= cfg_.layers.size()) throw ConfigError("forward: layer index out of range");
    if (volume_of(clip) != cfg_.input)
      throw ShapeError("forward: clip " + to_string(clip.dims()) + " does not match network input " +
                       to_string(cfg_.input));
    if (cache) {
      cache->inputs.assign(last + 1, Tensor());
      cache->outputs.assign(last + 1, Tensor());
      cache->argmax.assign(last + 1, {});
      cache->last = last;
    }
    Tensor x = clip;
    for (std::size_t i = 0; i <= last; ++i) {
      const LayerSpec& spec = cfg_.layers[i];
      Tensor y;
      switch (spec.kind) {
        case LayerKind::kConv3d:
          y = conv3d_fwd(x, states_[i], spec);
          break;
        case LayerKind::kPool3d: {
          auto r = maxpool3d_fwd(x, spec);
          y = std::move(r.output);
          if (cache) cache->argmax[i] = std::move(r.argmax);
          break;
        }
        case LayerKind::kRelu:
          y = relu_fwd(x);
          break;
        case LayerKind::kSigmoid:
          y = sigmoid_fwd(x);
          break;
        case LayerKind::kFc:
          y = fc_fwd(x, states_[i], spec);
          break;
        case LayerKind::kSoftmax:
          y = softmax_fwd(x);
          break;
      }
      if (cache) {
        cache->inputs[i] = std::move(x);
        cache->outputs[i] = y;
      }
      x = std::move(y);
    }
    return x;
  }

  Tensor forward(const Tensor& clip, std::string_view upto, ForwardCache* cache = nullptr) const {
    return forward(clip, cfg_.index_of(upto), cache);
  }

  Tensor forward(const Tensor& clip, ForwardCache* cache = nullptr) const {
    return forward(clip, cfg_.layers.size() - 1, cache);
  }

  /// Backpropagates `d_out` (gradient w.r.t. the output of cache.last) to the input.
  /// Parameter gradients are added into `grads` (same layout as params()); layers
  /// below `stop` are skipped and the returned input gradient is then empty.
  Tensor backward(const Tensor& d_out, const ForwardCache& cache, ParamSet& grads,
                  std::size_t stop = 0) const {
    if (!cache.valid()) throw Error("backward: no forward cache");
    if (grads.size() != states_.size()) throw ShapeError("backward: gradient set has wrong size");
    if (d_out.dims() != cache.outputs[cache.last].dims())
      throw ShapeError("backward: gradient " + to_string(d_out.dims()) + " does not match output " +
                       to_string(cache.outputs[cache.last].dims()));
    Tensor g = d_out;
    for (std::size_t ii = cache.last + 1; ii-- > stop;) {
      const LayerSpec& spec = cfg_.layers[ii];
      const Tensor& x = cache.inputs[ii];
      switch (spec.kind) {
        case LayerKind::kConv3d: {
          auto r = conv3d_bwd(g, x, states_[ii], spec);
          add_into(grads[ii], r.d_params);
          g = std::move(r.d_input);
          break;
        }
        case LayerKind::kPool3d:
          g = maxpool3d_bwd(g, cache.argmax[ii], volume_of(x));
          break;
        case LayerKind::kRelu:
          g = relu_bwd(g, x);
          break;
        case LayerKind::kSigmoid:
          g = sigmoid_bwd(g, cache.outputs[ii]);
          break;
        case LayerKind::kFc: {
          auto r = fc_bwd(g, x, states_[ii]);
          add_into(grads[ii], r.d_params);
          g = std::move(r.d_input);
          break;
        }
        case LayerKind::kSoftmax:
          g = softmax_bwd(g, cache.outputs[ii]);
          break;
      }
    }
    return stop == 0 ? g : Tensor();
  }

  ParamSet zero_grads() const { return zero_like(states_); }

  /// Weights directory: one <layer>.weight.jpt / <layer>.bias.jpt pair per parameterized layer.
  void save_weights(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < states_.size(); ++i) {
      if (states_[i].weight.empty()) continue;
      write_tensor(dir / (cfg_.layers[i].name + ".weight.jpt"), states_[i].weight);
      write_tensor(dir / (cfg_.layers[i].name + ".bias.jpt"), states_[i].bias);
    }
  }

  void load_weights(const std::filesystem::path& dir) {
    for (std::size_t i = 0; i < states_.size(); ++i) {
      if (states_[i].weight.empty()) continue;
      Tensor w = read_tensor(dir / (cfg_.layers[i].name + ".weight.jpt"));
      Tensor b = read_tensor(dir / (cfg_.layers[i].name + ".bias.jpt"));
      if (w.dims() != states_[i].weight.dims() || b.dims() != states_[i].bias.dims())
        throw ShapeError("load_weights: layer '" + cfg_.layers[i].name + "' has shape " +
                         to_string(w.dims()) + ", expected " + to_string(states_[i].weight.dims()));
      states_[i].weight = std::move(w);
      states_[i].bias = std::move(b);
    }
  }

 private:
  static void add_into(LayerState& dst, const LayerState& src) {
    for (std::size_t k = 0; k < dst.weight.size(); ++k) dst.weight[k] += src.weight[k];
    for (std::size_t k = 0; k < dst.bias.size(); ++k) dst.bias[k] += src.bias[k];
  }

  NetworkConfig cfg_;
  ParamSet states_;
};

}  // namespace jpool::net3d
