#pragma once

// Two-stream bilinear model: an attention stream regressing soft heat maps, a feature
// stream, their bilinear join P = A W B^T, and a softmax head. Training is plain SGD over
// JSON phase schedules with resumable checkpoints.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "jpool/datakit.hpp"
#include "jpool/error.hpp"
#include "jpool/json_io.hpp"
#include "jpool/net3d/network.hpp"
#include "jpool/parallel.hpp"
#include "jpool/pipeline.hpp"
#include "jpool/poolgen.hpp"
#include "jpool/seeding.hpp"
#include "jpool/tensor.hpp"
#include "jpool/tensor_io.hpp"

namespace jpool {

// ---------------------------------------------------------------------------------------
// Attention loss

struct AttentionLoss {
  double value = 0.0;
  Tensor grad;  // w.r.t. the pre-sigmoid logits
};

namespace detail {

/// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace detail

/// Sigmoid cross entropy summed over voxels and averaged over the M heat maps:
/// -(1/M) sum [p log s(z) + (1-p) log(1-s(z))]. Zero-weight terms are skipped so that
/// saturated logits on a perfect fit contribute exactly 0.
inline AttentionLoss attention_loss(const Tensor& logits, const Tensor& target) {
  if (logits.dims() != target.dims())
    throw ShapeError("attention_loss: logits " + to_string(logits.dims()) + " vs target " +
                     to_string(target.dims()));
  if (logits.rank() != 4) throw ShapeError("attention_loss: expected M x l x h x w");
  const double inv_m = 1.0 / static_cast<double>(logits.dim(0));
  AttentionLoss out{0.0, Tensor(logits.dims())};
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double z = logits[k], p = target[k];
    double term = 0.0;
    if (p != 0.0) term += p * detail::softplus(-z);
    if (p != 1.0) term += (1.0 - p) * detail::softplus(z);
    out.value += term;
    out.grad[k] = (net3d::sigmoid(z) - p) * inv_m;
  }
  out.value *= inv_m;
  return out;
}

// ---------------------------------------------------------------------------------------
// Streams

/// Feature trunk up to `layer`, with that conv resized to M outputs and followed by sigmoid.
inline net3d::NetworkConfig attention_config(const net3d::NetworkConfig& feature,
                                             std::string_view layer, std::size_t m) {
  net3d::NetworkConfig cfg = feature.prefix(layer);
  net3d::LayerSpec& last = cfg.layers.back();
  if (last.kind != net3d::LayerKind::kConv3d)
    throw ConfigError("attention stream must end at a conv layer, '" + std::string(layer) + "' is " +
                      std::string(net3d::kind_name(last.kind)));
  last.channels_out = m;
  cfg.layers.push_back(net3d::LayerSpec::sigmoid(last.name + "_sigmoid"));
  cfg.validate();
  return cfg;
}

class AttentionNet {
 public:
  AttentionNet() = default;
  AttentionNet(const net3d::NetworkConfig& feature, std::string layer, std::size_t n_joints,
               std::uint64_t seed)
      : net_(attention_config(feature, layer, n_joints * feature.input.l), seed),
        layer_(std::move(layer)),
        n_joints_(n_joints),
        clip_len_(feature.input.l) {}

  /// Copies every parameterized layer below the resized conv from `trunk`.
  void copy_trunk(const net3d::Network& trunk) {
    for (std::size_t i = 0; i < logits_index(); ++i) {
      const auto& spec = net_.config().layers[i];
      if (!spec.has_params()) continue;
      const auto& src = trunk.state(spec.name);
      if (src.weight.dims() != net_.params()[i].weight.dims())
        throw ShapeError("copy_trunk: layer '" + spec.name + "' shape mismatch");
      net_.params()[i] = src;
    }
  }

  net3d::Network& network() { return net_; }
  const net3d::Network& network() const { return net_; }
  const std::string& layer() const { return layer_; }
  std::size_t n_joints() const { return n_joints_; }
  std::size_t clip_len() const { return clip_len_; }
  std::size_t channels() const { return n_joints_ * clip_len_; }
  std::size_t logits_index() const { return net_.config().layers.size() - 2; }

  Tensor logits(const Tensor& clip, net3d::ForwardCache* cache = nullptr) const {
    return net_.forward(clip, logits_index(), cache);
  }

 private:
  net3d::Network net_;
  std::string layer_;
  std::size_t n_joints_ = 0;
  std::size_t clip_len_ = 0;
};

/// Soft heat maps in (0, 1), one per (frame, joint).
inline HeatMapStack attention_fwd(const AttentionNet& net, const Tensor& clip) {
  return {net.network().forward(clip), net.n_joints(), net.clip_len()};
}

/// Flattened M x C join -> optional hidden fc+relu layers -> fc to classes -> softmax.
inline net3d::NetworkConfig head_config(std::size_t m, std::size_t c, std::size_t n_classes,
                                        const std::vector<std::size_t>& hidden = {}) {
  net3d::NetworkConfig cfg{{m * c, 1, 1, 1}, {}};
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    cfg.layers.push_back(net3d::LayerSpec::fc("fc_h" + std::to_string(i + 1), hidden[i]));
    cfg.layers.push_back(net3d::LayerSpec::relu("relu_h" + std::to_string(i + 1)));
  }
  cfg.layers.push_back(net3d::LayerSpec::fc("fc_out", n_classes));
  cfg.layers.push_back(net3d::LayerSpec::softmax("prob"));
  cfg.validate();
  return cfg;
}

struct TwoStreamModel {
  AttentionNet attention;
  net3d::Network feature;  // trunk up to the activation of `layer`
  Matrix w;                // K x K, K = l*h*w at the join
  net3d::Network head;
  std::string layer;
  std::size_t n_classes = 0;
  bool normalize = true;  // L2-normalize the flattened join before the head

  std::size_t join_size() const { return w.rows(); }
};

/// Feature stream seeded with `seed` (so it matches an extraction net built from the same
/// config and seed), attention copied from it, W = identity.
inline TwoStreamModel make_two_stream(const net3d::NetworkConfig& cfg, const std::string& layer,
                                      std::size_t n_joints, std::size_t n_classes,
                                      std::uint64_t seed,
                                      const std::vector<std::size_t>& hidden = {}) {
  if (n_classes < 2) throw ConfigError("two-stream model needs at least 2 classes");
  net3d::NetworkConfig trunk = cfg.prefix(activation_layer(cfg, layer));
  for (const auto& l : trunk.layers)
    if (l.kind == net3d::LayerKind::kFc || l.kind == net3d::LayerKind::kSoftmax)
      throw ConfigError("feature stream must be convolutional, found '" + l.name + "'");
  TwoStreamModel m;
  m.layer = layer;
  m.n_classes = n_classes;
  m.feature = net3d::Network(trunk, seed);
  m.attention = AttentionNet(cfg, layer, n_joints, mix_seed(seed, 1));
  m.attention.copy_trunk(m.feature);
  const net3d::VolumeShape map = cfg.shape_after(layer);
  const std::size_t k = map.l * map.h * map.w;
  std::mt19937_64 rng(mix_seed(seed, 2));
  m.w = bilinear_init(k, k, rng);
  m.head = net3d::Network(head_config(m.attention.channels(), map.c, n_classes, hidden),
                          mix_seed(seed, 3));
  return m;
}

// ---------------------------------------------------------------------------------------
// Forward / backward

struct TwoStreamCache {
  net3d::ForwardCache attention, feature, head;
  Matrix a, b, p;
  double norm = 1.0;  // ||P|| when normalizing
  Tensor logits;
  std::vector<double> probs;
};

/// Class probabilities. `hard_attention` (M x K) replaces the attention stream when given.
inline std::vector<double> two_stream_fwd(const TwoStreamModel& m, const Tensor& clip,
                                          TwoStreamCache* cache = nullptr,
                                          const Matrix* hard_attention = nullptr) {
  TwoStreamCache local;
  TwoStreamCache& c = cache ? *cache : local;
  c.attention = {};
  c.a = hard_attention ? *hard_attention
                       : Matrix::from_tensor(m.attention.network().forward(clip, &c.attention));
  c.b = Matrix::from_tensor(m.feature.forward(clip, &c.feature));
  if (c.a.rows() != m.attention.channels())
    throw ShapeError("two_stream_fwd: attention has " + std::to_string(c.a.rows()) + " rows, expected " +
                     std::to_string(m.attention.channels()));
  c.p = bilinear_general_fwd(c.a, m.w, c.b);
  Tensor x({c.p.size(), 1, 1, 1}, c.p.storage());
  c.norm = 1.0;
  if (m.normalize) {
    c.norm = std::max(l2_norm(x.values()), 1e-12);
    for (double& v : x.values()) v /= c.norm;
  }
  c.logits = m.head.forward(x, m.head.config().layers.size() - 2, &c.head);
  c.probs = net3d::softmax(c.logits.values());
  return c.probs;
}

enum ParamGroup : unsigned {
  kGroupAttention = 1u,
  kGroupAttentionLast = 2u,  // the resized conv only
  kGroupFeature = 4u,
  kGroupBilinear = 8u,
  kGroupHead = 16u,
  kGroupAll = 31u,
};

inline unsigned parse_group(std::string_view s) {
  if (s == "attention") return kGroupAttention | kGroupAttentionLast;
  if (s == "attention_last") return kGroupAttentionLast;
  if (s == "feature") return kGroupFeature;
  if (s == "bilinear") return kGroupBilinear;
  if (s == "head") return kGroupHead;
  if (s == "all") return kGroupAll;
  throw ConfigError("unknown parameter group '" + std::string(s) +
                    "' (attention, attention_last, feature, bilinear, head, all)");
}

struct TwoStreamGrads {
  net3d::ParamSet attention, feature, head;
  Matrix w;
  double loss = 0.0;
};

namespace detail {

inline TwoStreamGrads zero_grads(const TwoStreamModel& m) {
  return {m.attention.network().zero_grads(), m.feature.zero_grads(), m.head.zero_grads(),
          Matrix(m.w.rows(), m.w.cols()), 0.0};
}

/// -log softmax(z)[label] via log-sum-exp.
inline double cross_entropy(const Tensor& logits, int label) {
  const auto z = logits.values();
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - zmax);
  return zmax + std::log(sum) - z[static_cast<std::size_t>(label)];
}

/// Head-only loss and gradients from a cached head input.
inline TwoStreamGrads head_grads(const TwoStreamModel& m, const Tensor& x, int label) {
  TwoStreamGrads g = zero_grads(m);
  net3d::ForwardCache cache;
  const Tensor logits = m.head.forward(x, m.head.config().layers.size() - 2, &cache);
  g.loss = cross_entropy(logits, label);
  Tensor d_logits(logits.dims(), net3d::softmax(logits.values()));
  d_logits[static_cast<std::size_t>(label)] -= 1.0;
  m.head.backward(d_logits, cache, g.head);
  return g;
}

}  // namespace detail

/// Softmax cross-entropy gradients for one labelled clip. Streams outside `groups` get
/// zero gradients and are not backpropagated.
inline TwoStreamGrads two_stream_bwd(const TwoStreamModel& m, const TwoStreamCache& c, int label,
                                     unsigned groups = kGroupAll) {
  if (!c.head.valid() || !c.feature.valid() || c.probs.empty())
    throw Error("two_stream_bwd: missing forward caches");
  if (label < 0 || static_cast<std::size_t>(label) >= c.probs.size())
    throw ConfigError("two_stream_bwd: label " + std::to_string(label) + " out of range");
  TwoStreamGrads g = detail::zero_grads(m);
  g.loss = detail::cross_entropy(c.logits, label);
  Tensor d_logits(c.logits.dims(), c.probs);
  d_logits[static_cast<std::size_t>(label)] -= 1.0;
  const Tensor d_x = m.head.backward(d_logits, c.head, g.head);
  const bool attention = (groups & (kGroupAttention | kGroupAttentionLast)) && c.attention.valid();
  if (!(groups & (kGroupFeature | kGroupBilinear)) && !attention) return g;

  Matrix d_p(c.p.rows(), c.p.cols(), d_x.storage());
  if (m.normalize) {
    // y = P / |P|: dP = (dy - y <y, dy>) / |P|
    double dot = 0.0;
    for (std::size_t k = 0; k < d_p.size(); ++k) dot += d_p.storage()[k] * c.p.storage()[k];
    dot /= c.norm;
    for (std::size_t k = 0; k < d_p.size(); ++k)
      d_p.storage()[k] = (d_p.storage()[k] - c.p.storage()[k] / c.norm * dot) / c.norm;
  }
  BilinearGrads bg = bilinear_general_bwd(d_p, c.a, m.w, c.b);
  if (groups & kGroupBilinear) g.w = std::move(bg.d_w);
  if (attention) {
    const Tensor& out = c.attention.outputs[c.attention.last];
    m.attention.network().backward(Tensor(out.dims(), std::move(bg.d_a.storage())), c.attention,
                                   g.attention);
  }
  if (groups & kGroupFeature) {
    const Tensor& out = c.feature.outputs[c.feature.last];
    m.feature.backward(Tensor(out.dims(), std::move(bg.d_b.storage())), c.feature, g.feature);
  }
  return g;
}

inline int two_stream_predict(const TwoStreamModel& m, const Tensor& clip) {
  return argmax(two_stream_fwd(m, clip));
}

// ---------------------------------------------------------------------------------------
// Datasets

struct AttentionExample {
  Tensor clip;
  Tensor target;  // hard stack, M x l x h x w
};

struct ClassExample {
  Tensor clip;
  int label = -1;
};

/// Clips of each video with hard heat-map targets at `layer`; at most `per_video` clips
/// per video (0 = all).
inline std::vector<AttentionExample> attention_examples(const std::vector<VideoSample>& videos,
                                                        const net3d::NetworkConfig& cfg,
                                                        std::string_view layer,
                                                        std::size_t per_video = 0,
                                                        std::size_t overlap = 8) {
  const std::size_t len = cfg.input.l;
  std::vector<AttentionExample> out;
  for (const auto& v : videos) {
    const auto starts = clip_starts(v.n_frames(), len, overlap);
    const std::size_t n = per_video == 0 ? starts.size() : std::min(per_video, starts.size());
    for (std::size_t k = 0; k < n; ++k) {
      const Clip c = make_clip(v, starts[k], len);
      out.push_back({c.frames, make_heatmaps(c.joints, cfg, layer, len).maps});
    }
  }
  return out;
}

inline std::vector<ClassExample> class_examples(const std::vector<VideoSample>& videos,
                                                std::size_t clip_len, std::size_t per_video = 0,
                                                std::size_t overlap = 8) {
  std::vector<ClassExample> out;
  for (const auto& v : videos) {
    const auto starts = clip_starts(v.n_frames(), clip_len, overlap);
    const std::size_t n = per_video == 0 ? starts.size() : std::min(per_video, starts.size());
    for (std::size_t k = 0; k < n; ++k) out.push_back({slice_frames(v.frames, starts[k], clip_len), v.label});
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// Schedules

struct Phase {
  std::string name;
  double lr = 1e-3;
  std::size_t steps = 0;
  unsigned groups = kGroupAll;
  std::size_t decay_every = 0;  // 0 = constant rate
  double decay_factor = 0.1;
};

struct Schedule {
  std::vector<Phase> phases;
  std::size_t batch_size = 4;  // 0 = full batch
  double momentum = 0.9;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0 = only at the end

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& p : phases) n += p.steps;
    return n;
  }

  /// Phase index for a global step, with the step the phase starts at.
  std::size_t phase_at(std::size_t step, std::size_t* start = nullptr) const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      if (step < s + phases[i].steps) {
        if (start) *start = s;
        return i;
      }
      s += phases[i].steps;
    }
    throw ConfigError("schedule: step " + std::to_string(step) + " past the last phase");
  }

  double lr_at(std::size_t step) const {
    std::size_t start = 0;
    const Phase& p = phases[phase_at(step, &start)];
    if (p.decay_every == 0) return p.lr;
    return p.lr * std::pow(p.decay_factor, static_cast<double>((step - start) / p.decay_every));
  }
};

inline nlohmann::json groups_to_json(unsigned g) {
  nlohmann::json out = nlohmann::json::array();
  if (g == kGroupAll) return nlohmann::json::array({"all"});
  if ((g & kGroupAttention) && (g & kGroupAttentionLast)) out.push_back("attention");
  else if (g & kGroupAttentionLast) out.push_back("attention_last");
  if (g & kGroupFeature) out.push_back("feature");
  if (g & kGroupBilinear) out.push_back("bilinear");
  if (g & kGroupHead) out.push_back("head");
  return out;
}

inline nlohmann::json to_json(const Schedule& s) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : s.phases)
    phases.push_back({{"name", p.name},
                      {"lr", p.lr},
                      {"steps", p.steps},
                      {"groups", groups_to_json(p.groups)},
                      {"decay_every", p.decay_every},
                      {"decay_factor", p.decay_factor}});
  return {{"phases", phases},
          {"batch_size", s.batch_size},
          {"momentum", s.momentum},
          {"seed", s.seed},
          {"checkpoint_every", s.checkpoint_every}};
}

inline Schedule schedule_from_json(const nlohmann::json& j) {
  Schedule s;
  s.batch_size = j.value("batch_size", s.batch_size);
  s.momentum = j.value("momentum", s.momentum);
  s.seed = j.value("seed", s.seed);
  s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
  for (const auto& pj : j.at("phases")) {
    Phase p;
    p.name = pj.value("name", "phase" + std::to_string(s.phases.size() + 1));
    p.lr = pj.at("lr").get<double>();
    p.steps = pj.at("steps").get<std::size_t>();
    if (pj.contains("groups")) {
      p.groups = 0;
      for (const auto& g : pj.at("groups")) p.groups |= parse_group(g.get<std::string>());
    }
    p.decay_every = pj.value("decay_every", std::size_t{0});
    p.decay_factor = pj.value("decay_factor", 0.1);
    if (!(p.lr >= 0.0) || !std::isfinite(p.lr))
      throw ConfigError("schedule phase '" + p.name + "': learning rate must be finite and >= 0");
    s.phases.push_back(std::move(p));
  }
  if (s.phases.empty()) throw ConfigError("schedule has no phases");
  if (s.momentum < 0.0 || s.momentum >= 1.0) throw ConfigError("schedule: momentum must be in [0, 1)");
  return s;
}

inline Schedule read_schedule(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  return with_json_context(path, [&] { return schedule_from_json(j); });
}

/// Desk-scale defaults: attention pre-training on all attention layers.
inline Schedule default_attention_schedule(std::size_t steps = 60) {
  Schedule s;
  s.phases.push_back({"attention", 0.05, steps, kGroupAttention | kGroupAttentionLast, 0, 0.1});
  s.batch_size = 8;
  return s;
}

/// Head only, then every parameter with a /10 step decay.
inline Schedule default_finetune_schedule(std::size_t head_steps = 1500, std::size_t all_steps = 20) {
  Schedule s;
  s.phases.push_back({"head", 0.3, head_steps, kGroupHead, 0, 0.1});
  s.phases.push_back({"all", 1e-4, all_steps, kGroupAll, std::max<std::size_t>(1, all_steps / 2), 0.1});
  s.batch_size = 4;
  return s;
}

/// Example indices for one step: epoch e visits a permutation seeded by (seed, e), so the
/// batch at any step is a pure function of (seed, step).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(batch == 0 ? n : batch), seed_(seed) {
    if (n == 0) throw ConfigError("training set is empty");
  }

  std::vector<std::size_t> indices(std::size_t step) {
    std::vector<std::size_t> out(batch_);
    for (std::size_t j = 0; j < batch_; ++j) {
      const std::size_t g = step * batch_ + j;
      out[j] = permutation(g / n_)[g % n_];
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) {
    if (epoch != epoch_) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      if (batch_ < n_) {
        std::mt19937_64 rng(mix_seed(seed_, epoch));
        std::shuffle(perm_.begin(), perm_.end(), rng);
      }
      epoch_ = epoch;
    }
    return perm_;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> perm_;
};

// ---------------------------------------------------------------------------------------
// Training loop

struct ParamRef {
  std::vector<double>* values = nullptr;
  unsigned groups = 0;
};

/// SGD with momentum: v = mu v + g, p -= lr v. Frozen parameters keep their velocity.
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}

  void step(const std::vector<ParamRef>& params, const std::vector<std::vector<double>>& grads,
            double lr, unsigned mask) {
    if (velocity_.empty())
      for (const auto& p : params) velocity_.emplace_back(p.values->size(), 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!(params[i].groups & mask)) continue;
      auto& v = velocity_[i];
      auto& p = *params[i].values;
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = momentum_ * v[k] + grads[i][k];
        p[k] -= lr * v[k];
      }
    }
  }

  std::vector<std::vector<double>>& velocity() { return velocity_; }

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty = no checkpoints
  bool resume = false;
  std::size_t stop_at = 0;  // stop after this many total steps (0 = run the schedule)
  std::size_t threads = thread_count();
  std::function<bool(std::size_t step, double loss)> on_step;  // false stops training
};

struct TrainReport {
  std::vector<double> losses;  // mean batch loss per step
  std::size_t steps = 0;
  std::string config_hash;
  bool resumed = false;
};

namespace detail {

inline void add_refs(std::vector<ParamRef>& refs, net3d::ParamSet& ps, unsigned groups,
                     std::size_t last_index = std::numeric_limits<std::size_t>::max(),
                     unsigned last_groups = 0) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].weight.empty()) continue;
    const unsigned g = i == last_index ? last_groups : groups;
    refs.push_back({&ps[i].weight.storage(), g});
    refs.push_back({&ps[i].bias.storage(), g});
  }
}

inline void flatten_into(std::vector<std::vector<double>>& out, net3d::ParamSet& ps) {
  for (auto& st : ps) {
    if (st.weight.empty()) continue;
    out.push_back(std::move(st.weight.storage()));
    out.push_back(std::move(st.bias.storage()));
  }
}

inline void round_to_float(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.json";
  return read_json_file(path);
}

/// Generic mini-batch loop. `grad(example, mask)` returns (loss, gradients aligned with refs).
/// Per-example gradients are computed in parallel and summed in batch order.
template <typename GradFn>
TrainReport run_schedule(const std::vector<ParamRef>& refs, std::size_t n_examples,
                         const Schedule& s, const TrainOptions& opt, const std::string& config_hash,
                         const std::string& kind, GradFn&& grad,
                         const std::function<void(const std::filesystem::path&)>& save_weights,
                         const std::function<void(const std::filesystem::path&)>& load_weights,
                         const std::function<void(unsigned mask)>& prepare = {}) {
  TrainReport rep;
  rep.config_hash = config_hash;
  Sgd sgd(s.momentum);
  std::size_t step = 0;
  const bool ckpt = !opt.checkpoint_dir.empty();

  if (ckpt && opt.resume && std::filesystem::exists(opt.checkpoint_dir / "checkpoint.json")) {
    const auto path = opt.checkpoint_dir / "checkpoint.json";
    const auto j = read_checkpoint_manifest(opt.checkpoint_dir);
    with_json_context(path, [&] {
      if (j.at("kind").get<std::string>() != kind)
        throw ConfigError(path.string() + ": checkpoint is a '" + j.at("kind").get<std::string>() +
                          "' run, expected '" + kind + "'");
      if (j.at("config_hash").get<std::string>() != config_hash)
        throw ConfigError(path.string() + ": config hash " + j.at("config_hash").get<std::string>() +
                          " does not match this run (" + config_hash + ")");
      step = j.at("step").get<std::size_t>();
      rep.losses = j.at("loss_history").get<std::vector<double>>();
    });
    load_weights(opt.checkpoint_dir);
    auto& vel = sgd.velocity();
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const Tensor v = read_tensor(opt.checkpoint_dir / "velocity" / ("v" + std::to_string(i) + ".jpt"));
      if (v.size() != refs[i].values->size())
        throw ShapeError("checkpoint velocity " + std::to_string(i) + " has wrong size");
      vel.push_back(v.storage());
    }
    rep.resumed = true;
  }

  auto write_checkpoint = [&](std::size_t done) {
    const auto& dir = opt.checkpoint_dir;
    save_weights(dir);
    auto& vel = sgd.velocity();
    if (vel.empty())
      for (const auto& r : refs) vel.emplace_back(r.values->size(), 0.0);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      const auto path = dir / "velocity" / ("v" + std::to_string(i) + ".jpt");
      std::filesystem::create_directories(path.parent_path());
      write_tensor(path, Tensor({vel[i].size()}, vel[i]));
    }
    write_json_file(dir / "checkpoint.json", {{"kind", kind},
                                              {"config_hash", config_hash},
                                              {"step", done},
                                              {"total_steps", s.total_steps()},
                                              {"schedule", to_json(s)},
                                              {"loss_history", rep.losses}});
    // Continue from exactly what a resumed run would load.
    for (const auto& r : refs) round_to_float(*r.values);
    for (auto& v : vel) round_to_float(v);
  };

  const std::size_t end = opt.stop_at == 0 ? s.total_steps() : std::min(opt.stop_at, s.total_steps());
  BatchSampler sampler(n_examples, s.batch_size, s.seed);
  for (; step < end; ++step) {
    const unsigned mask = s.phases[s.phase_at(step)].groups;
    const double lr = s.lr_at(step);
    const auto batch = sampler.indices(step);
    if (prepare) prepare(mask);
    std::vector<double> losses(batch.size());
    std::vector<std::vector<std::vector<double>>> per(batch.size());
    parallel_for(batch.size(), [&](std::size_t j) {
      auto r = grad(batch[j], mask);
      losses[j] = r.first;
      per[j] = std::move(r.second);
    }, opt.threads);
    std::vector<std::vector<double>> total = std::move(per[0]);
    for (std::size_t j = 1; j < per.size(); ++j)
      for (std::size_t i = 0; i < total.size(); ++i)
        for (std::size_t k = 0; k < total[i].size(); ++k) total[i][k] += per[j][i][k];
    const double inv = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (double l : losses) loss += l;
    loss *= inv;
    bool finite = std::isfinite(loss);
    for (auto& t : total)
      for (double& g : t) {
        g *= inv;
        finite = finite && std::isfinite(g);
      }
    if (!finite)
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (phase '" +
                            s.phases[s.phase_at(step)].name + "', lr " + std::to_string(lr) +
                            "): loss " + std::to_string(loss));
    sgd.step(refs, total, lr, mask);
    rep.losses.push_back(loss);
    if (opt.on_step && !opt.on_step(step, loss)) {
      ++step;
      break;
    }
    if (ckpt && s.checkpoint_every > 0 && (step + 1) % s.checkpoint_every == 0 && step + 1 < end)
      write_checkpoint(step + 1);
  }
  rep.steps = step;
  if (ckpt) write_checkpoint(step);
  return rep;
}

}  // namespace detail

inline std::string attention_config_hash(const AttentionNet& net, const Schedule& s) {
  const nlohmann::json j{{"network", net3d::to_json(net.network().config())},
                         {"layer", net.layer()},
                         {"n_joints", net.n_joints()},
                         {"schedule", to_json(s)}};
  return hex64(fnv1a64(j.dump()));
}

/// Mean attention loss over `data`.
inline double attention_eval_loss(const AttentionNet& net, const std::vector<AttentionExample>& data,
                                  std::size_t threads = thread_count()) {
  std::vector<double> l(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    l[i] = attention_loss(net.logits(data[i].clip), data[i].target).value;
  }, threads);
  double s = 0.0;
  for (double v : l) s += v;
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

/// Pre-trains the attention stream on hard heat-map targets.
inline TrainReport train_attention(AttentionNet& net, const std::vector<AttentionExample>& data,
                                   const Schedule& s, const TrainOptions& opt = {}) {
  for (const auto& ex : data)
    if (ex.target.rank() != 4 || ex.target.dim(0) != net.channels())
      throw ShapeError("train_attention: target " + to_string(ex.target.dims()) + ", network predicts " +
                       std::to_string(net.channels()) + " maps");
  auto& ps = net.network().params();
  std::vector<ParamRef> refs;
  detail::add_refs(refs, ps, kGroupAttention, net.logits_index(), kGroupAttention | kGroupAttentionLast);
  auto grad = [&](std::size_t i, unsigned mask) {
    net3d::ForwardCache cache;
    const Tensor z = net.logits(data[i].clip, &cache);
    AttentionLoss l = attention_loss(z, data[i].target);
    net3d::ParamSet g = net.network().zero_grads();
    // Only the resized conv is trainable: skip backprop below it.
    const std::size_t stop = (mask & kGroupAttention) ? 0 : net.logits_index();
    net.network().backward(l.grad, cache, g, stop);
    std::vector<std::vector<double>> flat;
    detail::flatten_into(flat, g);
    return std::make_pair(l.value, std::move(flat));
  };
  return detail::run_schedule(
      refs, data.size(), s, opt, attention_config_hash(net, s), "attention", grad,
      [&](const std::filesystem::path& dir) { net.network().save_weights(dir / "attention"); },
      [&](const std::filesystem::path& dir) { net.network().load_weights(dir / "attention"); });
}

inline std::string two_stream_config_hash(const TwoStreamModel& m, const Schedule& s) {
  const nlohmann::json j{{"attention", net3d::to_json(m.attention.network().config())},
                         {"feature", net3d::to_json(m.feature.config())},
                         {"head", net3d::to_json(m.head.config())},
                         {"layer", m.layer},
                         {"normalize", m.normalize},
                         {"schedule", to_json(s)}};
  return hex64(fnv1a64(j.dump()));
}

inline void save_two_stream(const TwoStreamModel& m, const std::filesystem::path& dir) {
  m.attention.network().save_weights(dir / "attention");
  m.feature.save_weights(dir / "feature");
  m.head.save_weights(dir / "head");
  write_tensor(dir / "bilinear.jpt", m.w.to_tensor());
}

inline void load_two_stream(TwoStreamModel& m, const std::filesystem::path& dir) {
  m.attention.network().load_weights(dir / "attention");
  m.feature.load_weights(dir / "feature");
  m.head.load_weights(dir / "head");
  const Tensor w = read_tensor(dir / "bilinear.jpt");
  if (w.rank() != 2 || w.dim(0) != m.w.rows() || w.dim(1) != m.w.cols())
    throw ShapeError("bilinear.jpt has shape " + to_string(w.dims()));
  m.w = Matrix(w.dim(0), w.dim(1), w.storage());
}

/// End-to-end fine-tuning under a phase schedule (e.g. head only, then everything).
inline TrainReport finetune_two_stream(TwoStreamModel& m, const std::vector<ClassExample>& data,
                                       const Schedule& s, const TrainOptions& opt = {}) {
  for (const auto& ex : data)
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= m.n_classes)
      throw ConfigError("finetune: label " + std::to_string(ex.label) + " out of range");
  std::vector<ParamRef> refs;
  detail::add_refs(refs, m.attention.network().params(), kGroupAttention, m.attention.logits_index(),
                   kGroupAttention | kGroupAttentionLast);
  detail::add_refs(refs, m.feature.params(), kGroupFeature);
  refs.push_back({&m.w.storage(), kGroupBilinear});
  detail::add_refs(refs, m.head.params(), kGroupHead);
  // While only the head trains, the streams and W are fixed: cache each example's head input.
  constexpr unsigned kBody = kGroupAttention | kGroupAttentionLast | kGroupFeature | kGroupBilinear;
  std::vector<Tensor> joins;
  auto prepare = [&](unsigned mask) {
    if (mask & kBody) {
      joins.clear();
      return;
    }
    if (!joins.empty()) return;
    joins.resize(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
      TwoStreamCache cache;
      two_stream_fwd(m, data[i].clip, &cache);
      joins[i] = cache.head.inputs[0];
    }, opt.threads);
  };
  auto grad = [&](std::size_t i, unsigned mask) {
    TwoStreamGrads g;
    if (mask & kBody) {
      TwoStreamCache cache;
      two_stream_fwd(m, data[i].clip, &cache);
      g = two_stream_bwd(m, cache, data[i].label, mask);
    } else {
      g = detail::head_grads(m, joins[i], data[i].label);
    }
    std::vector<std::vector<double>> flat;
    detail::flatten_into(flat, g.attention);
    detail::flatten_into(flat, g.feature);
    flat.push_back(std::move(g.w.storage()));
    detail::flatten_into(flat, g.head);
    return std::make_pair(g.loss, std::move(flat));
  };
  return detail::run_schedule(
      refs, data.size(), s, opt, two_stream_config_hash(m, s), "two_stream", grad,
      [&](const std::filesystem::path& dir) { save_two_stream(m, dir); },
      [&](const std::filesystem::path& dir) { load_two_stream(m, dir); }, prepare);
}

inline double two_stream_accuracy(const TwoStreamModel& m, const std::vector<ClassExample>& data,
                                  std::size_t threads = thread_count()) {
  std::vector<int> pred(data.size()), labels(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    pred[i] = two_stream_predict(m, data[i].clip);
    labels[i] = data[i].label;
  }, threads);
  return accuracy(pred, labels);
}

// ---------------------------------------------------------------------------------------
// Heat-map localization

struct HitRate {
  std::size_t count = 0;
  std::size_t within_one = 0;  // Chebyshev distance <= 1 grid cell
  std::size_t exact = 0;

  double within_rate() const { return count ? static_cast<double>(within_one) / static_cast<double>(count) : 0.0; }
  double exact_rate() const { return count ? static_cast<double>(exact) / static_cast<double>(count) : 0.0; }
};

/// Compares the argmax voxel of every predicted map with the target's hot voxel.
inline HitRate heatmap_hits(const AttentionNet& net, const std::vector<AttentionExample>& data,
                            std::size_t threads = thread_count()) {
  std::vector<HitRate> per(data.size());
  parallel_for(data.size(), [&](std::size_t e) {
    const Tensor pred = net.logits(data[e].clip);
    const Tensor& gt = data[e].target;
    const std::size_t l = gt.dim(1), h = gt.dim(2), w = gt.dim(3), vol = l * h * w;
    for (std::size_t m = 0; m < gt.dim(0); ++m) {
      std::size_t bp = 0, bg = 0;
      for (std::size_t k = 1; k < vol; ++k) {
        if (pred[m * vol + k] > pred[m * vol + bp]) bp = k;
        if (gt[m * vol + k] > gt[m * vol + bg]) bg = k;
      }
      auto dist = [](std::size_t a, std::size_t b) { return a > b ? a - b : b - a; };
      const std::size_t d = std::max({dist(bp / (h * w), bg / (h * w)),
                                      dist(bp / w % h, bg / w % h), dist(bp % w, bg % w)});
      ++per[e].count;
      if (d <= 1) ++per[e].within_one;
      if (d == 0) ++per[e].exact;
    }
  }, threads);
  HitRate r;
  for (const auto& p : per) {
    r.count += p.count;
    r.within_one += p.within_one;
    r.exact += p.exact;
  }
  return r;
}

namespace gradcheck {

/// Tiny two-stream model: input 1x4x8x8, feature layer conv3a (3 x 2x2x2), N=1 so M=4,
/// two classes. Every parameter is checked against central differences.
inline net3d::NetworkConfig tiny_two_stream_config() {
  using net3d::LayerSpec;
  net3d::NetworkConfig cfg{{1, 4, 8, 8}, {}};
  cfg.layers = {LayerSpec::conv("conv1a", 2),
                LayerSpec::relu("relu1a"),
                LayerSpec::pool("pool1", {1, 2, 2}, {1, 2, 2}),
                LayerSpec::conv("conv2a", 2),
                LayerSpec::relu("relu2a"),
                LayerSpec::pool("pool2", {2, 2, 2}, {2, 2, 2}),
                LayerSpec::conv("conv3a", 3),
                LayerSpec::relu("relu3a")};
  cfg.validate();
  return cfg;
}

inline GradcheckResult two_stream(std::uint64_t seed = 11) {
  TwoStreamModel m = make_two_stream(tiny_two_stream_config(), "conv3a", 1, 2, seed);
  std::mt19937_64 rng(mix_seed(seed, 9));
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : m.w.storage()) v += 0.2 * d(rng);
  for (auto& st : m.head.params())
    for (double& v : st.bias.storage()) v = 0.1 * d(rng);
  Tensor clip({1, 4, 8, 8});
  for (double& v : clip.values()) v = d(rng);
  const int label = 1;
  auto loss = [&] {
    const auto p = two_stream_fwd(m, clip);
    return -std::log(p[label]);
  };
  TwoStreamCache cache;
  two_stream_fwd(m, clip, &cache);
  TwoStreamGrads g = two_stream_bwd(m, cache, label);
  double err = 0.0;
  auto check = [&](std::vector<double>& values, const std::vector<double>& analytic) {
    err = std::max(err, relative_error(analytic, numeric_gradient(values, loss, 1e-5)));
  };
  auto check_set = [&](net3d::ParamSet& ps, const net3d::ParamSet& gs) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i].weight.empty()) continue;
      check(ps[i].weight.storage(), gs[i].weight.storage());
      check(ps[i].bias.storage(), gs[i].bias.storage());
    }
  };
  check_set(m.attention.network().params(), g.attention);
  check_set(m.feature.params(), g.feature);
  check(m.w.storage(), g.w.storage());
  check_set(m.head.params(), g.head);
  return {"two_stream", err, 1e-4};
}

}  // namespace gradcheck

}  // namespace jpool
