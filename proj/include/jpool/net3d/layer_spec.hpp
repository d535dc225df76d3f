#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "jpool/error.hpp"
#include "jpool/tensor.hpp"

namespace jpool::net3d {

enum class LayerKind { kConv3d, kPool3d, kRelu, kSigmoid, kFc, kSoftmax };

inline std::string_view kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv3d: return "conv3d";
    case LayerKind::kPool3d: return "pool3d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kFc: return "fc";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "?";
}

inline LayerKind parse_kind(std::string_view s) {
  for (auto k : {LayerKind::kConv3d, LayerKind::kPool3d, LayerKind::kRelu, LayerKind::kSigmoid,
                 LayerKind::kFc, LayerKind::kSoftmax})
    if (kind_name(k) == s) return k;
  throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

/// (t, y, x) triple: temporal depth first, then height, then width.
struct Extent3 {
  std::size_t t = 1, y = 1, x = 1;
  bool operator==(const Extent3&) const = default;
};

/// (channels, length, height, width) of one activation volume.
struct VolumeShape {
  std::size_t c = 1, l = 1, h = 1, w = 1;
  std::size_t count() const { return c * l * h * w; }
  std::size_t spatial_count() const { return l * h * w; }
  bool operator==(const VolumeShape&) const = default;
};

using jpool::to_string;

inline std::string to_string(const VolumeShape& s) {
  return "(" + std::to_string(s.c) + "," + std::to_string(s.l) + "," + std::to_string(s.h) +
         "," + std::to_string(s.w) + ")";
}

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kRelu;
  std::size_t channels_out = 0;  // conv3d / fc only
  Extent3 kernel;
  Extent3 stride;
  Extent3 padding{0, 0, 0};

  static LayerSpec conv(std::string name, std::size_t channels, Extent3 k = {3, 3, 3},
                        Extent3 s = {1, 1, 1}, Extent3 p = {1, 1, 1}) {
    return {std::move(name), LayerKind::kConv3d, channels, k, s, p};
  }
  static LayerSpec pool(std::string name, Extent3 k, Extent3 s, Extent3 p = {0, 0, 0}) {
    return {std::move(name), LayerKind::kPool3d, 0, k, s, p};
  }
  static LayerSpec relu(std::string name) { return plain(std::move(name), LayerKind::kRelu, 0); }
  static LayerSpec sigmoid(std::string name) {
    return plain(std::move(name), LayerKind::kSigmoid, 0);
  }
  static LayerSpec fc(std::string name, std::size_t n) {
    return plain(std::move(name), LayerKind::kFc, n);
  }
  static LayerSpec softmax(std::string name) {
    return plain(std::move(name), LayerKind::kSoftmax, 0);
  }

  static LayerSpec plain(std::string name, LayerKind kind, std::size_t channels) {
    LayerSpec l;
    l.name = std::move(name);
    l.kind = kind;
    l.channels_out = channels;
    return l;
  }

  bool has_window() const { return kind == LayerKind::kConv3d || kind == LayerKind::kPool3d; }
  bool has_params() const { return kind == LayerKind::kConv3d || kind == LayerKind::kFc; }

  void validate() const {
    if (has_window()) {
      if (kernel.t < 1 || kernel.y < 1 || kernel.x < 1 || stride.t < 1 || stride.y < 1 ||
          stride.x < 1)
        throw ConfigError("layer '" + name + "': kernel and stride extents must be >= 1");
    }
    if (has_params() && channels_out == 0)
      throw ConfigError("layer '" + name + "': channels must be >= 1");
  }

  bool operator==(const LayerSpec&) const = default;
};

namespace detail {

inline std::size_t window_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                              const std::string& layer) {
  const std::size_t span = in + 2 * p;
  if (span < k)
    throw ConfigError("layer '" + layer + "': kernel " + std::to_string(k) +
                      " exceeds padded input " + std::to_string(span));
  return (span - k) / s + 1;
}

}  // namespace detail

/// Shape produced by `spec` from `in`. Windows use floor((in + 2p - k) / s) + 1.
inline VolumeShape output_shape(const LayerSpec& spec, const VolumeShape& in) {
  spec.validate();
  switch (spec.kind) {
    case LayerKind::kConv3d:
    case LayerKind::kPool3d: {
      VolumeShape out;
      out.c = spec.kind == LayerKind::kConv3d ? spec.channels_out : in.c;
      out.l = detail::window_out(in.l, spec.kernel.t, spec.stride.t, spec.padding.t, spec.name);
      out.h = detail::window_out(in.h, spec.kernel.y, spec.stride.y, spec.padding.y, spec.name);
      out.w = detail::window_out(in.w, spec.kernel.x, spec.stride.x, spec.padding.x, spec.name);
      return out;
    }
    case LayerKind::kFc:
      return {spec.channels_out, 1, 1, 1};
    case LayerKind::kRelu:
    case LayerKind::kSigmoid:
    case LayerKind::kSoftmax:
      return in;
  }
  return in;
}

struct NetworkConfig {
  VolumeShape input;
  std::vector<LayerSpec> layers;

  /// Index of the named layer.
  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return i;
    throw ConfigError("unknown layer '" + std::string(name) + "'");
  }

  bool has_layer(std::string_view name) const {
    for (const auto& l : layers)
      if (l.name == name) return true;
    return false;
  }

  /// shapes[0] is the input; shapes[i + 1] is the output of layer i.
  std::vector<VolumeShape> shapes() const {
    std::vector<VolumeShape> out{input};
    for (const auto& l : layers) out.push_back(output_shape(l, out.back()));
    return out;
  }

  VolumeShape shape_after(std::string_view name) const { return shapes()[index_of(name) + 1]; }

  void validate() const {
    if (input.count() == 0) throw ConfigError("network input has a zero extent");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name.empty()) throw ConfigError("layer " + std::to_string(i) + " has no name");
      for (std::size_t j = 0; j < i; ++j)
        if (layers[j].name == layers[i].name)
          throw ConfigError("duplicate layer name '" + layers[i].name + "'");
    }
    (void)shapes();
  }

  /// Copy truncated after the named layer (inclusive).
  NetworkConfig prefix(std::string_view name) const {
    NetworkConfig c{input, {}};
    c.layers.assign(layers.begin(), layers.begin() + index_of(name) + 1);
    return c;
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// Full-width C3D: conv1a(64)-pool1-conv2a(128)-pool2-conv3a/b(256)-pool3-conv4a/b(512)-pool4-
/// conv5a/b(512)-pool5-fc6(4096)-fc7(4096)-fc8-softmax, ReLU after every conv and fc6/fc7.
inline NetworkConfig c3d_config(std::vector<std::size_t> widths, VolumeShape input,
                                std::size_t fc_width, std::size_t n_classes) {
  if (widths.size() != 8) throw ConfigError("c3d_config: expected 8 conv widths");
  static constexpr std::array<std::string_view, 8> kConvNames = {
      "1a", "2a", "3a", "3b", "4a", "4b", "5a", "5b"};
  NetworkConfig cfg{input, {}};
  auto conv = [&](std::size_t i) {
    const std::string n(kConvNames[i]);
    cfg.layers.push_back(LayerSpec::conv("conv" + n, widths[i]));
    cfg.layers.push_back(LayerSpec::relu("relu" + n));
  };
  conv(0);
  cfg.layers.push_back(LayerSpec::pool("pool1", {1, 2, 2}, {1, 2, 2}));
  conv(1);
  cfg.layers.push_back(LayerSpec::pool("pool2", {2, 2, 2}, {2, 2, 2}));
  conv(2);
  conv(3);
  cfg.layers.push_back(LayerSpec::pool("pool3", {2, 2, 2}, {2, 2, 2}));
  conv(4);
  conv(5);
  cfg.layers.push_back(LayerSpec::pool("pool4", {2, 2, 2}, {2, 2, 2}));
  conv(6);
  conv(7);
  cfg.layers.push_back(LayerSpec::pool("pool5", {2, 2, 2}, {2, 2, 2}));
  if (fc_width > 0) {
    cfg.layers.push_back(LayerSpec::fc("fc6", fc_width));
    cfg.layers.push_back(LayerSpec::relu("relu6"));
    cfg.layers.push_back(LayerSpec::fc("fc7", fc_width));
    cfg.layers.push_back(LayerSpec::relu("relu7"));
  }
  if (n_classes > 0) {
    cfg.layers.push_back(LayerSpec::fc("fc8", n_classes));
    cfg.layers.push_back(LayerSpec::softmax("prob"));
  }
  return cfg;
}

inline NetworkConfig c3d_full() {
  return c3d_config({64, 128, 256, 256, 512, 512, 512, 512}, {3, 16, 112, 112}, 4096, 487);
}

/// Reduced-width C3D with the same kernel/stride/padding pattern, for 1x16x32x32 clips.
inline NetworkConfig c3d_mini(std::size_t n_classes = 0) {
  return c3d_config({8, 16, 32, 32, 32, 32, 32, 32}, {1, 16, 32, 32}, 0, n_classes);
}

// ---- JSON ----

inline nlohmann::json to_json(const Extent3& e) { return nlohmann::json::array({e.t, e.y, e.x}); }

inline Extent3 extent_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(what + ": expected [t, y, x]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

inline nlohmann::json to_json(const NetworkConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) {
    nlohmann::json j{{"name", l.name}, {"kind", kind_name(l.kind)}};
    if (l.has_params()) j["channels"] = l.channels_out;
    if (l.has_window()) {
      j["kernel"] = to_json(l.kernel);
      j["stride"] = to_json(l.stride);
      j["padding"] = to_json(l.padding);
    }
    layers.push_back(std::move(j));
  }
  return {{"input", {cfg.input.c, cfg.input.l, cfg.input.h, cfg.input.w}}, {"layers", layers}};
}

inline NetworkConfig config_from_json(const nlohmann::json& j) {
  try {
    NetworkConfig cfg;
    const auto& in = j.at("input");
    if (!in.is_array() || in.size() != 4) throw ConfigError("input: expected [C, L, H, W]");
    cfg.input = {in[0].get<std::size_t>(), in[1].get<std::size_t>(), in[2].get<std::size_t>(),
                 in[3].get<std::size_t>()};
    for (const auto& lj : j.at("layers")) {
      LayerSpec l;
      l.name = lj.at("name").get<std::string>();
      l.kind = parse_kind(lj.at("kind").get<std::string>());
      if (l.has_params()) l.channels_out = lj.at("channels").get<std::size_t>();
      if (l.has_window()) {
        l.kernel = extent_from_json(lj.at("kernel"), l.name + ".kernel");
        l.stride = extent_from_json(lj.value("stride", to_json(l.kernel)), l.name + ".stride");
        l.padding = extent_from_json(lj.value("padding", nlohmann::json::array({0, 0, 0})),
                                     l.name + ".padding");
      }
      cfg.layers.push_back(std::move(l));
    }
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
}

inline NetworkConfig read_network_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open");
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": offset " + std::to_string(e.byte) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_network_config(const std::filesystem::path& path, const NetworkConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << to_json(cfg).dump(2) << '\n';
}

}  // namespace jpool::net3d
