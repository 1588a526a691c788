#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "fsd/errors.hpp"
#include "fsd/network_config.hpp"
#include "fsd/rng.hpp"

namespace fsd {

/// A network-ready input sample: flat float buffer laid out as C x H x W (or D).
using Tensor = std::vector<float>;

template <typename Real>
using Vec = std::vector<Real>;

/// Layer inputs cached by forward() for the backward pass.
/// inputs[l][b] is the input of layer l for batch element b.
template <typename Real>
struct ForwardTrace {
  std::vector<std::vector<Vec<Real>>> inputs;
  std::size_t batch_size = 0;
};

namespace detail {

template <typename Real>
void dense_forward(std::span<const Real> p, const ResolvedLayer& r, std::span<const Real> x, std::span<Real> y) {
  const std::size_t in = r.in.numel();
  const std::size_t out = r.out.numel();
  const Real* w = p.data() + r.param_offset;
  const Real* b = w + in * out;
  for (std::size_t o = 0; o < out; ++o) {
    Real acc = b[o];
    const Real* row = w + o * in;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

template <typename Real>
void dense_backward(std::span<const Real> p, const ResolvedLayer& r, std::span<const Real> x, std::span<const Real> dy,
                    std::span<Real> dx, std::span<Real> grad) {
  const std::size_t in = r.in.numel();
  const std::size_t out = r.out.numel();
  const Real* w = p.data() + r.param_offset;
  Real* gw = grad.data() + r.param_offset;
  Real* gb = gw + in * out;
  std::fill(dx.begin(), dx.end(), Real{0});
  for (std::size_t o = 0; o < out; ++o) {
    const Real g = dy[o];
    if (g == Real{0}) continue;
    gb[o] += g;
    const Real* row = w + o * in;
    Real* grow = gw + o * in;
    for (std::size_t i = 0; i < in; ++i) {
      grow[i] += g * x[i];
      dx[i] += g * row[i];
    }
  }
}

template <typename Real>
void conv_forward(std::span<const Real> p, const ResolvedLayer& r, const Conv& c, std::span<const Real> x, std::span<Real> y) {
  const std::size_t ic = r.in.channels, ih = r.in.height, iw = r.in.width;
  const std::size_t oc = r.out.channels, oh = r.out.height, ow = r.out.width;
  const std::size_t k = c.kernel;
  const Real* w = p.data() + r.param_offset;
  const Real* b = w + oc * ic * k * k;
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Real acc = b[o];
        for (std::size_t ci = 0; ci < ic; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - static_cast<std::ptrdiff_t>(c.padding);
            if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(ih)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * c.stride + kx) - static_cast<std::ptrdiff_t>(c.padding);
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
              acc += w[((o * ic + ci) * k + ky) * k + kx] * x[(ci * ih + static_cast<std::size_t>(yy)) * iw + static_cast<std::size_t>(xx)];
            }
          }
        }
        y[(o * oh + oy) * ow + ox] = acc;
      }
    }
  }
}

template <typename Real>
void conv_backward(std::span<const Real> p, const ResolvedLayer& r, const Conv& c, std::span<const Real> x,
                   std::span<const Real> dy, std::span<Real> dx, std::span<Real> grad) {
  const std::size_t ic = r.in.channels, ih = r.in.height, iw = r.in.width;
  const std::size_t oc = r.out.channels, oh = r.out.height, ow = r.out.width;
  const std::size_t k = c.kernel;
  const Real* w = p.data() + r.param_offset;
  Real* gw = grad.data() + r.param_offset;
  Real* gb = gw + oc * ic * k * k;
  std::fill(dx.begin(), dx.end(), Real{0});
  for (std::size_t o = 0; o < oc; ++o) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Real g = dy[(o * oh + oy) * ow + ox];
        if (g == Real{0}) continue;
        gb[o] += g;
        for (std::size_t ci = 0; ci < ic; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(oy * c.stride + ky) - static_cast<std::ptrdiff_t>(c.padding);
            if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(ih)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * c.stride + kx) - static_cast<std::ptrdiff_t>(c.padding);
              if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(iw)) continue;
              const std::size_t wi = ((o * ic + ci) * k + ky) * k + kx;
              const std::size_t xi = (ci * ih + static_cast<std::size_t>(yy)) * iw + static_cast<std::size_t>(xx);
              gw[wi] += g * x[xi];
              dx[xi] += g * w[wi];
            }
          }
        }
      }
    }
  }
}

template <typename Real>
void pool_forward(const ResolvedLayer& r, std::size_t window, std::span<const Real> x, std::span<Real> y) {
  const std::size_t iw = r.in.width, ih = r.in.height;
  const std::size_t oh = r.out.height, ow = r.out.width;
  const Real scale = Real{1} / static_cast<Real>(window * window);
  for (std::size_t c = 0; c < r.out.channels; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Real acc{0};
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) acc += x[(c * ih + oy * window + dy) * iw + ox * window + dx];
        y[(c * oh + oy) * ow + ox] = acc * scale;
      }
    }
  }
}

template <typename Real>
void pool_backward(const ResolvedLayer& r, std::size_t window, std::span<const Real> dy, std::span<Real> dx) {
  const std::size_t iw = r.in.width, ih = r.in.height;
  const std::size_t oh = r.out.height, ow = r.out.width;
  const Real scale = Real{1} / static_cast<Real>(window * window);
  std::fill(dx.begin(), dx.end(), Real{0});
  for (std::size_t c = 0; c < r.out.channels; ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const Real g = dy[(c * oh + oy) * ow + ox] * scale;
        for (std::size_t wy = 0; wy < window; ++wy)
          for (std::size_t wx = 0; wx < window; ++wx) dx[(c * ih + oy * window + wy) * iw + ox * window + wx] = g;
      }
}

}  // namespace detail

/// f_phi: maps an input tensor to an M-dimensional embedding.
///
/// Parameters live in one flat array; each weighted layer owns a contiguous
/// slice [weights (row-major, out-major), bias]. Real = float for training and
/// inference, Real = double for gradient verification.
template <typename Real>
class EmbeddingNetwork {
 public:
  using Embeddings = std::vector<Vec<Real>>;

  /// Fan-in-scaled uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)) from cfg.seed; zero biases.
  static EmbeddingNetwork init(const NetworkConfig& cfg) {
    EmbeddingNetwork net(cfg);
    Rng rng(cfg.seed);
    for (const auto& r : net.plan_) {
      if (r.param_count == 0) continue;
      const std::size_t bias = std::holds_alternative<FullyConnected>(r.spec) ? r.out.numel() : r.out.channels;
      const std::size_t weights = r.param_count - bias;
      const double bound = std::sqrt(6.0 / static_cast<double>(r.fan_in));
      for (std::size_t i = 0; i < weights; ++i)
        net.params_[r.param_offset + i] = static_cast<Real>(static_cast<float>(rng.uniform(-bound, bound)));
    }
    return net;
  }

  /// Wraps existing parameters. Throws ConfigError/InputError on mismatch.
  EmbeddingNetwork(const NetworkConfig& cfg, std::vector<Real> params) : EmbeddingNetwork(cfg) {
    if (params.size() != params_.size())
      throw InputError(fmt::format("parameter count {} does not match config ({})", params.size(), params_.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!std::isfinite(params[i])) throw InputError(fmt::format("parameter {} is not finite", i));
    params_ = std::move(params);
  }

  template <typename Other>
  EmbeddingNetwork<Other> cast() const {
    std::vector<Other> p(params_.begin(), params_.end());
    return EmbeddingNetwork<Other>(config_, std::move(p));
  }

  const NetworkConfig& config() const { return config_; }
  const std::vector<ResolvedLayer>& layers() const { return plan_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::size_t embedding_dim() const { return config_.embedding_dim; }
  std::span<const Real> parameters() const { return params_; }
  std::span<Real> mutable_parameters() { return params_; }

  /// Embeds every sample in order. When `trace` is non-null it receives the
  /// per-layer inputs needed by backward().
  template <typename Input = Tensor>
  Embeddings forward(std::span<const Input> batch, ForwardTrace<Real>* trace = nullptr) const {
    const std::size_t in_size = config_.input_shape.numel();
    if (trace) {
      trace->inputs.assign(plan_.size(), {});
      trace->batch_size = batch.size();
      for (auto& l : trace->inputs) l.reserve(batch.size());
    }
    Embeddings out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& sample = batch[b];
      if (sample.size() != in_size)
        throw InputError(fmt::format("sample {} has {} values, network expects {} ({})", b, sample.size(), in_size,
                                     config_.input_shape.str()));
      Vec<Real> cur(sample.size());
      for (std::size_t i = 0; i < sample.size(); ++i) {
        if (!std::isfinite(sample[i])) throw InputError(fmt::format("sample {} has non-finite value at {}", b, i));
        cur[i] = static_cast<Real>(sample[i]);
      }
      for (std::size_t l = 0; l < plan_.size(); ++l) {
        Vec<Real> next = apply_layer(plan_[l], cur);
        if (trace) trace->inputs[l].push_back(std::move(cur));
        cur = std::move(next);
      }
      out.push_back(std::move(cur));
    }
    return out;
  }

  Embeddings forward(const std::vector<Tensor>& batch, ForwardTrace<Real>* trace = nullptr) const {
    return forward<Tensor>(std::span<const Tensor>(batch), trace);
  }

  Vec<Real> embed(const Tensor& sample) const { return forward<Tensor>(std::span<const Tensor>(&sample, 1)).front(); }

  /// Reverse-mode pass: returns dL/dphi summed over the batch, where
  /// embedding_grads[b] = dL/d(embedding b).
  Vec<Real> backward(const ForwardTrace<Real>& trace, std::span<const Vec<Real>> embedding_grads) const {
    if (trace.inputs.size() != plan_.size())
      throw InputError(fmt::format("trace has {} layers, network has {}", trace.inputs.size(), plan_.size()));
    if (embedding_grads.size() != trace.batch_size)
      throw InputError(fmt::format("got {} embedding gradients for a traced batch of {}", embedding_grads.size(), trace.batch_size));

    Vec<Real> grad(params_.size(), Real{0});
    for (std::size_t b = 0; b < trace.batch_size; ++b) {
      if (embedding_grads[b].size() != config_.embedding_dim)
        throw InputError(fmt::format("embedding gradient {} has dim {}, expected {}", b, embedding_grads[b].size(), config_.embedding_dim));
      Vec<Real> dy = embedding_grads[b];
      for (std::size_t l = plan_.size(); l-- > 0;) {
        const auto& r = plan_[l];
        const Vec<Real>& x = trace.inputs[l].at(b);
        if (x.size() != r.in.numel()) throw InputError("trace does not match network layout");
        dy = backprop_layer(r, x, dy, grad);
      }
    }
    return grad;
  }

  Vec<Real> backward(const ForwardTrace<Real>& trace, const std::vector<Vec<Real>>& embedding_grads) const {
    return backward(trace, std::span<const Vec<Real>>(embedding_grads));
  }

 private:
  explicit EmbeddingNetwork(const NetworkConfig& cfg) : config_(cfg), plan_(resolve_layers(cfg)) {
    std::size_t total = 0;
    for (const auto& r : plan_) total += r.param_count;
    params_.assign(total, Real{0});
  }

  Vec<Real> apply_layer(const ResolvedLayer& r, const Vec<Real>& x) const {
    Vec<Real> y(r.out.numel());
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, FullyConnected>) detail::dense_forward<Real>(params_, r, x, y);
          else if constexpr (std::is_same_v<L, Conv>) detail::conv_forward<Real>(params_, r, layer, x, y);
          else if constexpr (std::is_same_v<L, Relu>)
            for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > Real{0} ? x[i] : Real{0};
          else if constexpr (std::is_same_v<L, AvgPool>) detail::pool_forward<Real>(r, layer.window, x, y);
          else y = x;
        },
        r.spec);
    return y;
  }

  Vec<Real> backprop_layer(const ResolvedLayer& r, const Vec<Real>& x, const Vec<Real>& dy, Vec<Real>& grad) const {
    Vec<Real> dx(r.in.numel());
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, FullyConnected>) detail::dense_backward<Real>(params_, r, x, dy, dx, grad);
          else if constexpr (std::is_same_v<L, Conv>) detail::conv_backward<Real>(params_, r, layer, x, dy, dx, grad);
          else if constexpr (std::is_same_v<L, Relu>)
            for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > Real{0} ? dy[i] : Real{0};
          else if constexpr (std::is_same_v<L, AvgPool>) detail::pool_backward<Real>(r, layer.window, dy, dx);
          else dx = dy;
        },
        r.spec);
    return dx;
  }

  NetworkConfig config_;
  std::vector<ResolvedLayer> plan_;
  std::vector<Real> params_;

  template <typename>
  friend class EmbeddingNetwork;
};

using Network = EmbeddingNetwork<float>;
using Network64 = EmbeddingNetwork<double>;

inline Network init_network(const NetworkConfig& cfg) { return Network::init(cfg); }

}  // namespace fsd
