#pragma once

// Test-only reference computations. Nothing here calls into the code paths
// they are used to check, except the forward pass for finite differences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fsd/fsd.hpp"

namespace fsd::oracle {

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t compared = 0;
  /// Parameters whose +/-h perturbation flips a ReLU input sign; FD is not a
  /// valid reference across a kink.
  std::size_t skipped_kinks = 0;
};

/// Sign pattern of every ReLU input in the trace.
inline std::vector<char> relu_pattern(const Network64& net, const std::vector<Tensor>& batch) {
  ForwardTrace<double> trace;
  net.forward(batch, &trace);
  std::vector<char> out;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    if (!std::holds_alternative<Relu>(net.layers()[l].spec)) continue;
    for (const auto& x : trace.inputs[l])
      for (double v : x) out.push_back(v > 0.0);
  }
  return out;
}

/// Central differences of `loss` against `analytic`, relative error measured
/// where max(|analytic|, |numeric|) > min_magnitude.
inline GradientCheck check_gradient(Network64 net, const std::vector<Tensor>& batch, const std::function<double(const Network64&)>& loss,
                                    std::span<const double> analytic, double h = 1e-4, double min_magnitude = 1e-6) {
  GradientCheck res;
  const auto base = relu_pattern(net, batch);
  auto params = net.mutable_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = loss(net);
    const bool kink_up = relu_pattern(net, batch) != base;
    params[i] = keep - h;
    const double down = loss(net);
    const bool kink_down = relu_pattern(net, batch) != base;
    params[i] = keep;
    if (kink_up || kink_down) {
      ++res.skipped_kinks;
      continue;
    }
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max(std::abs(numeric), std::abs(analytic[i]));
    if (scale <= min_magnitude) continue;
    res.max_rel_error = std::max(res.max_rel_error, std::abs(numeric - analytic[i]) / scale);
    ++res.compared;
  }
  return res;
}

inline std::vector<Tensor> episode_batch(const Episode& ep) {
  std::vector<Tensor> out;
  for (const auto& s : ep.support) out.insert(out.end(), s.begin(), s.end());
  for (const auto& q : ep.query) out.insert(out.end(), q.begin(), q.end());
  return out;
}

/// 11-threshold AP with counts taken by sorting the scores and binary search.
inline double average_precision(std::vector<double> p_fake, const std::vector<Kind>& truth) {
  std::vector<double> fake_scores, real_scores;
  for (std::size_t i = 0; i < p_fake.size(); ++i) (truth[i] == Kind::Fake ? fake_scores : real_scores).push_back(p_fake[i]);
  std::sort(fake_scores.begin(), fake_scores.end());
  std::sort(real_scores.begin(), real_scores.end());
  auto at_least = [](const std::vector<double>& sorted, double t) {
    return static_cast<std::size_t>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
  };
  const double fakes = static_cast<double>(fake_scores.size());
  double ap = 0.0;
  for (int k = 0; k <= 10; ++k) {
    const double t = static_cast<double>(k) / 10;
    const std::size_t tp = at_least(fake_scores, t);
    const std::size_t fp = at_least(real_scores, t);
    const std::size_t tp_next = k == 10 ? 0 : at_least(fake_scores, static_cast<double>(k + 1) / 10);
    const double precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (static_cast<double>(tp) / fakes - static_cast<double>(tp_next) / fakes) * precision;
  }
  return ap;
}

/// Index of the nearest vector by exhaustive scan; ties keep the lowest id.
inline std::size_t nearest(const std::vector<double>& q, const std::vector<std::vector<double>>& points, const std::vector<int>& ids) {
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double dd = 0;
    for (std::size_t k = 0; k < q.size(); ++k) dd += (q[k] - points[i][k]) * (q[k] - points[i][k]);
    if (dd < best_d || (dd == best_d && ids[i] < ids[best])) {
      best = i;
      best_d = dd;
    }
  }
  return best;
}

}  // namespace fsd::oracle
