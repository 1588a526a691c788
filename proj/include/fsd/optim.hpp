#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "fsd/checkpoint.hpp"
#include "fsd/dataset.hpp"
#include "fsd/errors.hpp"
#include "fsd/log.hpp"
#include "fsd/network.hpp"
#include "fsd/parallel.hpp"
#include "fsd/protonet.hpp"
#include "fsd/rng.hpp"
#include "fsd/sampler.hpp"

namespace fsd {

struct ScheduleConfig {
  double base_lr = 1e-4;
  double gamma = 0.5;
  std::uint64_t step_size = 80000;
  std::uint64_t total_steps = 200000;
  std::size_t episodes_per_step = 16;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
    if (step_size < 1) throw ConfigError("step_size must be >= 1");
    if (episodes_per_step < 1) throw ConfigError("episodes_per_step must be >= 1");
  }
};

/// StepLR: base_lr * gamma^floor(step / step_size).
inline double lr_at_step(const ScheduleConfig& cfg, std::uint64_t step) {
  return cfg.base_lr * std::pow(cfg.gamma, static_cast<double>(step / cfg.step_size));
}

template <typename Real>
struct AdamState {
  std::vector<Real> m;
  std::vector<Real> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, Real{0}), v(n, Real{0}) {}
};

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
template <typename Real>
void adam_step(std::span<Real> params, std::span<const Real> grads, AdamState<Real>& st, double lr) {
  if (params.size() != grads.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw InputError(fmt::format("adam: {} params, {} grads, state {}", params.size(), grads.size(), st.m.size()));
  if (!(lr > 0.0)) throw InputError("adam: learning rate must be > 0");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i])) throw TrainingError(fmt::format("non-finite gradient at parameter {}", i));

  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    const double m = st.beta1 * static_cast<double>(st.m[i]) + (1.0 - st.beta1) * g;
    const double v = st.beta2 * static_cast<double>(st.v[i]) + (1.0 - st.beta2) * g * g;
    st.m[i] = static_cast<Real>(m);
    st.v[i] = static_cast<Real>(v);
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    params[i] = static_cast<Real>(static_cast<double>(params[i]) - lr * m_hat / (std::sqrt(v_hat) + st.eps));
  }
}

struct TrainRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double wallclock_ms = 0.0;
};

inline std::string to_json_line(const TrainRecord& r) {
  return nlohmann::json{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"wallclock_ms", r.wallclock_ms}}.dump();
}

struct TrainOptions {
  SamplerConfig sampler;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::uint64_t log_interval = 100;
  std::uint64_t checkpoint_every = 1000;
  /// Periodic and final checkpoints are written here when set.
  std::optional<std::filesystem::path> checkpoint_path;
  std::function<void(const TrainRecord&)> on_record;
};

struct TrainResult {
  Network net;
  /// Mean episode loss of every optimizer step, before its update.
  std::vector<double> losses;
  std::vector<TrainRecord> records;
};

/// Episodic training: each step averages episode_loss over episodes_per_step
/// independently sampled episodes and applies one Adam update.
///
/// Episodes are drawn sequentially from one seeded stream and their gradients
/// are summed in episode order, so results do not depend on `threads`.
inline TrainResult train(const Network& initial, const ClassDataset& ds, const TrainOptions& opts) {
  opts.schedule.validate();
  const EpisodeSampler sampler(ds, opts.sampler);
  if (ds.input_shape != initial.config().input_shape)
    throw InputError(fmt::format("dataset shape {} does not match network input {}", ds.input_shape.str(),
                                 initial.config().input_shape.str()));

  TrainResult result{initial, {}, {}};
  Network& net = result.net;
  AdamState<float> adam(net.parameter_count());
  Rng rng(mix_seed(opts.seed, 10));
  const auto start = std::chrono::steady_clock::now();
  const std::size_t per_step = opts.schedule.episodes_per_step;
  std::vector<LossGradient<float>> parts(per_step);
  std::vector<float> grad(net.parameter_count());
  result.losses.reserve(opts.schedule.total_steps);

  auto checkpoint = [&] {
    if (opts.checkpoint_path) save_checkpoint(net, *opts.checkpoint_path);
  };
  auto fail = [&](const std::string& why) -> TrainingError {
    return TrainingError(opts.checkpoint_path ? fmt::format("{}; last good checkpoint kept at {}", why, opts.checkpoint_path->string())
                                              : why);
  };

  for (std::uint64_t step = 0; step < opts.schedule.total_steps; ++step) {
    const double lr = lr_at_step(opts.schedule, step);
    std::vector<Episode> episodes;
    episodes.reserve(per_step);
    for (std::size_t e = 0; e < per_step; ++e) episodes.push_back(sampler.sample(rng));

    parallel_for(per_step, opts.threads, [&](std::size_t e) { parts[e] = episode_loss(net, episodes[e]); });

    double loss = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0f);
    for (const auto& p : parts) {
      loss += p.loss;
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += p.gradient[i];
    }
    loss /= static_cast<double>(per_step);
    const float inv = 1.0f / static_cast<float>(per_step);
    for (float& g : grad) g *= inv;

    if (!std::isfinite(loss)) throw fail(fmt::format("non-finite loss at step {}", step));
    result.losses.push_back(loss);

    try {
      adam_step<float>(net.mutable_parameters(), grad, adam, lr);
    } catch (const TrainingError& e) {
      throw fail(fmt::format("step {}: {}", step, e.what()));
    }

    const bool last = step + 1 == opts.schedule.total_steps;
    if ((opts.log_interval > 0 && step % opts.log_interval == 0) || last) {
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      TrainRecord rec{step, lr, loss, ms};
      result.records.push_back(rec);
      if (opts.on_record) opts.on_record(rec);
      log().debug("step {} lr {:.3g} loss {:.6f}", step, lr, loss);
    }
    if (opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 && !last) checkpoint();
  }
  checkpoint();
  return result;
}

}  // namespace fsd
