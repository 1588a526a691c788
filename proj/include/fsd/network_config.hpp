#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "fsd/errors.hpp"

namespace fsd {

/// Activation shape. Flat vectors use channels = D, height = width = 1.
struct Shape {
  std::size_t channels = 0;
  std::size_t height = 1;
  std::size_t width = 1;
  bool spatial = false;

  static Shape flat(std::size_t dim) { return {dim, 1, 1, false}; }
  static Shape image(std::size_t c, std::size_t h, std::size_t w) { return {c, h, w, true}; }

  std::size_t numel() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return spatial ? fmt::format("{}x{}x{}", channels, height, width) : fmt::format("{}", channels);
  }
};

struct FullyConnected {
  std::size_t out_dim = 0;
  bool operator==(const FullyConnected&) const = default;
};

struct Conv {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool operator==(const Conv&) const = default;
};

struct Relu {
  bool operator==(const Relu&) const = default;
};

/// Non-overlapping average pooling (stride == window).
struct AvgPool {
  std::size_t window = 2;
  bool operator==(const AvgPool&) const = default;
};

struct Flatten {
  bool operator==(const Flatten&) const = default;
};

using LayerSpec = std::variant<FullyConnected, Conv, Relu, AvgPool, Flatten>;

struct NetworkConfig {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::size_t embedding_dim = 64;
  std::uint64_t seed = 0;

  bool operator==(const NetworkConfig&) const = default;
};

/// A layer with its shapes and parameter slice resolved against the input shape.
struct ResolvedLayer {
  LayerSpec spec;
  Shape in;
  Shape out;
  std::size_t param_offset = 0;
  std::size_t param_count = 0;
  std::size_t fan_in = 0;
};

/// Walks the layer chain, checking shape consistency. Throws ConfigError.
inline std::vector<ResolvedLayer> resolve_layers(const NetworkConfig& cfg) {
  if (cfg.input_shape.numel() == 0) throw ConfigError("input shape has zero elements");
  if (cfg.embedding_dim < 2) throw ConfigError(fmt::format("embedding_dim must be >= 2, got {}", cfg.embedding_dim));
  if (cfg.layers.empty()) throw ConfigError("network has no layers");

  std::vector<ResolvedLayer> plan;
  plan.reserve(cfg.layers.size());
  Shape cur = cfg.input_shape;
  std::size_t offset = 0;
  bool has_nonlinearity = false;

  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    ResolvedLayer r{cfg.layers[i], cur, cur, offset, 0, 0};
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, FullyConnected>) {
            if (cur.spatial) throw ConfigError(fmt::format("layer {}: fully-connected needs flat input, got {} (insert flatten)", i, cur.str()));
            if (layer.out_dim == 0) throw ConfigError(fmt::format("layer {}: out_dim must be positive", i));
            r.out = Shape::flat(layer.out_dim);
            r.fan_in = cur.channels;
            r.param_count = layer.out_dim * cur.channels + layer.out_dim;
          } else if constexpr (std::is_same_v<L, Conv>) {
            if (!cur.spatial) throw ConfigError(fmt::format("layer {}: conv needs image input, got flat {}", i, cur.str()));
            if (layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0)
              throw ConfigError(fmt::format("layer {}: conv out_channels, kernel and stride must be positive", i));
            const std::size_t ph = cur.height + 2 * layer.padding;
            const std::size_t pw = cur.width + 2 * layer.padding;
            if (ph < layer.kernel || pw < layer.kernel)
              throw ConfigError(fmt::format("layer {}: kernel {} larger than padded input {}", i, layer.kernel, cur.str()));
            r.out = Shape::image(layer.out_channels, (ph - layer.kernel) / layer.stride + 1, (pw - layer.kernel) / layer.stride + 1);
            r.fan_in = cur.channels * layer.kernel * layer.kernel;
            r.param_count = layer.out_channels * r.fan_in + layer.out_channels;
          } else if constexpr (std::is_same_v<L, Relu>) {
            has_nonlinearity = true;
          } else if constexpr (std::is_same_v<L, AvgPool>) {
            if (!cur.spatial) throw ConfigError(fmt::format("layer {}: pooling needs image input", i));
            if (layer.window == 0 || cur.height < layer.window || cur.width < layer.window)
              throw ConfigError(fmt::format("layer {}: pooling window {} does not fit {}", i, layer.window, cur.str()));
            r.out = Shape::image(cur.channels, cur.height / layer.window, cur.width / layer.window);
          } else {
            r.out = Shape::flat(cur.numel());
          }
        },
        cfg.layers[i]);
    offset += r.param_count;
    cur = r.out;
    plan.push_back(r);
  }

  if (!has_nonlinearity) throw ConfigError("network needs at least one nonlinearity");
  if (cur.spatial || cur.channels != cfg.embedding_dim)
    throw ConfigError(fmt::format("network output {} does not match embedding_dim {}", cur.str(), cfg.embedding_dim));
  return plan;
}

/// fc(hidden) -> relu -> ... -> fc(M). Default desk-scale net for vector data.
inline NetworkConfig mlp_config(std::size_t input_dim, std::vector<std::size_t> hidden = {64, 64},
                                std::size_t embedding_dim = 64, std::uint64_t seed = 0) {
  NetworkConfig cfg;
  cfg.input_shape = Shape::flat(input_dim);
  for (std::size_t h : hidden) {
    cfg.layers.emplace_back(FullyConnected{h});
    cfg.layers.emplace_back(Relu{});
  }
  cfg.layers.emplace_back(FullyConnected{embedding_dim});
  cfg.embedding_dim = embedding_dim;
  cfg.seed = seed;
  return cfg;
}

/// Four conv(3x3, pad 1) -> relu -> avgpool(2) blocks, flatten, fc(M).
inline NetworkConfig conv4_config(std::size_t channels, std::size_t height, std::size_t width,
                                  std::size_t embedding_dim = 64, std::size_t filters = 16,
                                  std::uint64_t seed = 0) {
  NetworkConfig cfg;
  cfg.input_shape = Shape::image(channels, height, width);
  for (int block = 0; block < 4; ++block) {
    cfg.layers.emplace_back(Conv{filters, 3, 1, 1});
    cfg.layers.emplace_back(Relu{});
    cfg.layers.emplace_back(AvgPool{2});
  }
  cfg.layers.emplace_back(Flatten{});
  cfg.layers.emplace_back(FullyConnected{embedding_dim});
  cfg.embedding_dim = embedding_dim;
  cfg.seed = seed;
  return cfg;
}

// JSON ----------------------------------------------------------------------

inline nlohmann::json layer_to_json(const LayerSpec& spec) {
  return std::visit(
      [](const auto& layer) -> nlohmann::json {
        using L = std::decay_t<decltype(layer)>;
        if constexpr (std::is_same_v<L, FullyConnected>) return {{"type", "fc"}, {"out_dim", layer.out_dim}};
        else if constexpr (std::is_same_v<L, Conv>)
          return {{"type", "conv"}, {"out_channels", layer.out_channels}, {"kernel", layer.kernel},
                  {"stride", layer.stride}, {"padding", layer.padding}};
        else if constexpr (std::is_same_v<L, Relu>) return {{"type", "relu"}};
        else if constexpr (std::is_same_v<L, AvgPool>) return {{"type", "avgpool"}, {"window", layer.window}};
        else return {{"type", "flatten"}};
      },
      spec);
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "fc") return FullyConnected{j.at("out_dim").get<std::size_t>()};
  if (type == "conv")
    return Conv{j.at("out_channels").get<std::size_t>(), j.value("kernel", std::size_t{3}),
                j.value("stride", std::size_t{1}), j.value("padding", std::size_t{0})};
  if (type == "relu") return Relu{};
  if (type == "avgpool") return AvgPool{j.value("window", std::size_t{2})};
  if (type == "flatten") return Flatten{};
  throw ConfigError(fmt::format("unknown layer type '{}'", type));
}

inline nlohmann::json to_json(const NetworkConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) layers.push_back(layer_to_json(l));
  nlohmann::json shape = cfg.input_shape.spatial
                             ? nlohmann::json::array({cfg.input_shape.channels, cfg.input_shape.height, cfg.input_shape.width})
                             : nlohmann::json::array({cfg.input_shape.channels});
  return {{"input_shape", shape}, {"layers", layers}, {"embedding_dim", cfg.embedding_dim}, {"seed", cfg.seed}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  try {
    NetworkConfig cfg;
    const auto dims = j.at("input_shape").get<std::vector<std::size_t>>();
    if (dims.size() == 1) cfg.input_shape = Shape::flat(dims[0]);
    else if (dims.size() == 3) cfg.input_shape = Shape::image(dims[0], dims[1], dims[2]);
    else throw ConfigError("input_shape must be [D] or [C,H,W]");
    for (const auto& l : j.at("layers")) cfg.layers.push_back(layer_from_json(l));
    cfg.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    cfg.seed = j.value("seed", std::uint64_t{0});
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("malformed network config: {}", e.what()));
  }
}

}  // namespace fsd
