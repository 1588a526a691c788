// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "fsd/fsd.hpp"
#include "oracles.hpp"

using namespace fsd;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  if (!ok) ++failures;
  fmt::print("{} [{}] {}: {}\n", ok ? "PASS" : "FAIL", id, what, detail);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Episode random_episode(std::size_t nc, std::size_t ns, std::size_t nq, const Shape& shape, Rng& rng) {
  Episode ep;
  for (std::size_t k = 0; k < nc; ++k) {
    ep.class_ids.push_back(static_cast<int>(k));
    std::vector<double> center(shape.numel());
    for (auto& c : center) c = rng.normal();
    auto draw = [&](std::size_t n) {
      std::vector<Tensor> out(n, Tensor(shape.numel()));
      for (auto& t : out)
        for (std::size_t d = 0; d < t.size(); ++d) t[d] = static_cast<float>(center[d] + 0.7 * rng.normal());
      return out;
    };
    ep.support.push_back(draw(ns));
    ep.query.push_back(draw(nq));
  }
  return ep;
}

// 1 ---------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  std::size_t pairs = 0, compared = 0, kinks = 0, max_params = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    NetworkConfig cfg;
    if (trial % 3 == 2) {
      // conv -> relu -> avgpool -> flatten -> fc
      const std::size_t c = 1 + rng.index(2), hw = 4 + 2 * rng.index(2);
      cfg.input_shape = Shape::image(c, hw, hw);
      cfg.layers = {Conv{2 + rng.index(3), 3, 1, rng.index(2)}, Relu{}, AvgPool{2}, Flatten{}, FullyConnected{3 + rng.index(4)}};
      cfg.embedding_dim = std::get<FullyConnected>(cfg.layers.back()).out_dim;
      cfg.seed = static_cast<std::uint64_t>(trial);
    } else {
      std::vector<std::size_t> hidden(1 + rng.index(2));
      for (auto& h : hidden) h = 4 + rng.index(12);
      cfg = mlp_config(2 + rng.index(8), hidden, 2 + rng.index(6), static_cast<std::uint64_t>(trial));
    }
    const Network64 net = init_network(cfg).cast<double>();
    max_params = std::max(max_params, net.parameter_count());
    const Episode ep = random_episode(2 + rng.index(3), 1 + rng.index(3), 1 + rng.index(3), cfg.input_shape, rng);
    const auto analytic = episode_loss(net, ep);
    const auto check = oracle::check_gradient(
        net, oracle::episode_batch(ep), [&](const Network64& n) { return episode_loss(n, ep).loss; }, analytic.gradient);
    worst = std::max(worst, check.max_rel_error);
    compared += check.compared;
    kinks += check.skipped_kinks;
    ++pairs;
  }
  const double secs = seconds_since(t0);
  report(1, pairs >= 50 && max_params <= 5000 && worst < 1e-4 && secs < 120.0, "gradient suite",
         fmt::format("{} pairs (<= {} params), {} parameters compared, {} kink-adjacent skipped, max rel err {:.2e} (< 1e-4), {:.1f}s (< 120s)",
                     pairs, max_params, compared, kinks, worst, secs));
}

// 2 ---------------------------------------------------------------------------

void math_core() {
  std::mt19937_64 gen(7);
  std::normal_distribution<double> n(0.0, 1.0);
  Rng rng(7);

  double mean_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t k = 1 + gen() % 20, m = 1 + gen() % 16;
    std::vector<Vec<double>> rows(k, Vec<double>(m));
    for (auto& r : rows)
      for (auto& x : r) x = 10 * n(gen);
    const auto proto = compute_prototype(rows, 1, Kind::Fake);
    for (std::size_t d = 0; d < m; ++d) {
      long double s = 0;
      for (const auto& r : rows) s += r[d];
      mean_err = std::max(mean_err, std::abs(static_cast<double>(s / k) - proto.vector[d]));
    }
  }

  std::size_t mismatches = 0, ties = 0;
  double sum_err = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t m = 1 + gen() % 6, classes = 1 + gen() % 8;
    std::vector<int> ids(classes);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), gen);
    PrototypeRegistry reg(m, Provenance::ZeroShot);
    std::vector<std::vector<double>> points;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> v(m);
      // Coarse integer grid plus duplicated prototypes make exact ties common.
      for (auto& x : v) x = static_cast<double>(static_cast<int>(gen() % 5) - 2);
      if (c > 0 && gen() % 4 == 0) v = points[gen() % c];
      points.push_back(v);
      reg.add({ids[c], "", ids[c] == 0 ? Kind::Real : Kind::Fake, v, 1});
    }
    std::vector<double> q(m);
    for (auto& x : q) x = gen() % 2 ? static_cast<double>(static_cast<int>(gen() % 5) - 2) : 2 * n(gen);
    const auto probs = classify(std::span<const double>(q), reg);
    const std::size_t expect = oracle::nearest(q, points, ids);
    mismatches += probs.predicted_class() != ids[expect];
    double best = INFINITY;
    std::size_t at_best = 0;
    for (double d : probs.distances) best = std::min(best, d);
    for (double d : probs.distances) at_best += d == best;
    ties += at_best > 1;
    sum_err = std::max(sum_err, std::abs(std::accumulate(probs.probabilities.begin(), probs.probabilities.end(), 0.0) - 1.0));
  }

  double ln_err = 0.0;
  for (std::size_t nc : {2u, 3u, 5u}) {
    const auto cfg = mlp_config(4, {6}, 3, 2);
    const Network net(cfg, std::vector<float>(init_network(cfg).parameter_count(), 0.0f));
    const auto lg = episode_loss(net, random_episode(nc, 3, 4, cfg.input_shape, rng));
    ln_err = std::max(ln_err, std::abs(lg.loss - std::log(static_cast<double>(nc))));
  }

  report(2, mean_err <= 1e-6 && mismatches == 0 && sum_err <= 1e-9 && ln_err <= 1e-9, "math-core oracles",
         fmt::format("prototype vs mean max err {:.1e} (<= 1e-6); classify vs linear scan {} mismatches in 10000 ({} with ties); "
                     "prob sum err {:.1e} (<= 1e-9); constant-net loss vs ln Nc err {:.1e} (<= 1e-9)",
                     mean_err, mismatches, ties, sum_err, ln_err));
}

// 3 ---------------------------------------------------------------------------

void ap_oracle() {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + gen() % 60;
    std::vector<double> p(n);
    std::vector<Kind> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = gen() % 4 == 0 ? static_cast<double>(gen() % 11) / 10 : u(gen);
      truth[i] = gen() % 2 ? Kind::Fake : Kind::Real;
    }
    truth[gen() % n] = Kind::Fake;
    mismatches += average_precision(p, truth) != oracle::average_precision(p, truth);
  }
  const std::vector<double> ex = {0.95, 0.55, 0.65, 0.15};
  const std::vector<Kind> ex_truth = {Kind::Fake, Kind::Fake, Kind::Real, Kind::Real};
  const double worked = average_precision(ex, ex_truth);
  const bool worked_ok = worked == oracle::average_precision(ex, ex_truth) && std::abs(worked - (1.0 / 3 + 0.5)) < 1e-12;
  report(3, mismatches == 0 && worked_ok, "AP oracle",
         fmt::format("{} mismatches in 1000 random sets; worked example AP = {:.6f} (expected 0.833333)", mismatches, worked));
}

// 4-7: desk run -------------------------------------------------------------

struct DeskSetup {
  SynthConfig data;
  NetworkConfig network;
  TrainOptions train;
};

DeskSetup desk_setup(std::uint64_t seed) {
  DeskSetup s;
  s.data.num_fake_classes = 6;
  s.data.dim = 16;
  s.data.center_separation = 4.0;
  s.data.noise = 1.0;
  s.data.samples_per_class = 500;
  s.data.seed = seed;
  s.network = mlp_config(16, {64, 64}, 64, seed);
  s.train.sampler = {3, 5, 5};
  s.train.schedule.base_lr = 1e-3;
  s.train.schedule.total_steps = 2000;
  s.train.schedule.step_size = 800;
  s.train.schedule.episodes_per_step = 16;
  s.train.seed = seed;
  s.train.threads = 1;
  return s;
}

/// Mean 10-shot ACC of `fake_id` over `reps` independent draws.
double fewshot_acc(const Network& net, const ClassDataset& ds, int fake_id, std::uint64_t seed, std::size_t reps) {
  double acc = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    Rng rng(mix_seed(seed, 7000 + 100 * static_cast<std::uint64_t>(fake_id) + r));
    acc += evaluate_fewshot(net, ds, fake_id, {10, 0, seed}, rng).accuracy;
  }
  return acc / static_cast<double>(reps);
}

void desk_run() {
  const std::uint64_t seed = 1;
  const DeskSetup s = desk_setup(seed);
  const ClassDataset ds = generate_synthetic(s.data);
  const int held = 1;
  const ClassDataset train_ds = ds.excluding(held);

  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult trained = train(init_network(s.network), train_ds, s.train);
  const double secs = seconds_since(t0);

  const double held_acc = fewshot_acc(trained.net, ds, held, seed, 5);
  double seen_acc = 0.0;
  std::string seen_detail;
  for (int f : ds.fake_class_ids()) {
    if (f == held) continue;
    const double a = fewshot_acc(trained.net, ds, f, seed, 5);
    seen_acc += a;
    seen_detail += fmt::format(" {}={:.3f}", ds.by_id(f).name, a);
  }
  seen_acc /= static_cast<double>(ds.fake_class_ids().size() - 1);
  const auto reg = build_zero_shot_registry(trained.net, train_ds, 1024, seed);
  const EvalReport zero = evaluate_zero_shot(trained.net, reg, ds, held, 0, seed);

  const double first = std::accumulate(trained.losses.begin(), trained.losses.begin() + 100, 0.0) / 100;
  const double last = std::accumulate(trained.losses.end() - 100, trained.losses.end(), 0.0) / 100;
  report(4, held_acc >= 0.90 && zero.accuracy >= 0.70 && seen_acc >= held_acc - 0.05 && secs < 300.0, "end-to-end desk run",
         fmt::format("7 classes D=16 sep=4, held out {}, 2000 steps in {:.1f}s (< 300s), loss {:.3f} -> {:.4f}; "
                     "10-shot held-out ACC {:.3f} (>= 0.90), zero-shot ACC {:.3f} AP {:.3f} (>= 0.70), seen mean ACC {:.3f} (>= {:.3f}) [{} ]",
                     ds.by_id(held).name, secs, first, last, held_acc, zero.accuracy, zero.average_precision, seen_acc,
                     held_acc - 0.05, seen_detail));

  // 5: shot sweep on the same model.
  ShotSweepConfig sc;
  sc.shots = {1, 3, 5, 10};
  sc.repetitions = 20;
  sc.seed = seed;
  const auto sweep = shot_sweep(trained.net, ds, held, sc);
  bool monotone = sweep.size() == 4;
  std::string row;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    row += fmt::format(" K={}:{:.3f}±{:.3f}", sweep[i].shots, sweep[i].acc_mean, sweep[i].acc_std);
    if (i > 0 && sweep[i].acc_mean < sweep[i - 1].acc_mean - 0.02) monotone = false;
  }
  const double gain = sweep.size() == 4 ? sweep[3].acc_mean - sweep[0].acc_mean : 0.0;
  report(5, monotone && gain > 0.0, "shot-sweep trend",
         fmt::format("mean ACC over 20 reps:{}; non-decreasing within 0.02: {}; ACC(10) - ACC(1) = {:+.3f} (> 0)", row,
                     monotone ? "yes" : "no", gain));
}

void multimodal() {
  const std::uint64_t seed = 1;
  DeskSetup s = desk_setup(seed);
  s.data.multimodal_classes = {1};
  const ClassDataset ds = generate_synthetic(s.data);

  auto held_out_acc = [&](int held) {
    const TrainResult trained = train(init_network(s.network), ds.excluding(held), s.train);
    return fewshot_acc(trained.net, ds, held, seed, 10);
  };
  const double multi = held_out_acc(1);
  std::vector<double> uni;
  for (int f : {2, 3}) uni.push_back(held_out_acc(f));
  const double uni_mean = (uni[0] + uni[1]) / 2;
  report(6, multi >= 0.80 && uni_mean > multi, "multimodal stress",
         fmt::format("held-out 10-shot ACC: two-mode fake_01 {:.3f} (>= 0.80); unimodal fake_02 {:.3f}, fake_03 {:.3f}, mean {:.3f} (> {:.3f})",
                     multi, uni[0], uni[1], uni_mean, multi));
}

void determinism() {
  const std::uint64_t seed = 5;
  DeskSetup s = desk_setup(seed);
  s.train.schedule.total_steps = 300;
  auto run = [&] {
    const ClassDataset ds = generate_synthetic(s.data);
    const ClassDataset train_ds = ds.excluding(1);
    const TrainResult trained = train(init_network(s.network), train_ds, s.train);
    std::string losses;
    for (double l : trained.losses) losses += fmt::format("{:.17g}\n", l);
    Rng rng(seed);
    std::string reports = to_json(evaluate_fewshot(trained.net, ds, 1, {10, 0, seed}, rng), true).dump();
    const auto reg = build_zero_shot_registry(trained.net, train_ds, 1024, seed, checkpoint_id(trained.net));
    reports += registry_to_json(reg);
    reports += to_json(evaluate_zero_shot(trained.net, reg, ds, 1, 0, seed), true).dump();
    ShotSweepConfig sc;
    sc.shots = {1, 5};
    sc.repetitions = 5;
    sc.seed = seed;
    reports += to_json(shot_sweep(trained.net, ds, 1, sc), "fake_01", seed).dump();
    return std::pair{losses, reports + serialize_checkpoint(trained.net)};
  };
  const auto a = run();
  const auto b = run();
  report(7, a == b, "determinism",
         fmt::format("two 300-step runs with seed {} and 1 thread: loss sequences {}, report JSON + checkpoint bytes {} ({} bytes)",
                     seed, a.first == b.first ? "identical" : "DIFFER", a.second == b.second ? "identical" : "DIFFER", a.second.size()));
}

// 8 ---------------------------------------------------------------------------

void sampler_invariants() {
  SynthConfig cfg;
  cfg.samples_per_class = 60;
  cfg.seed = 8;
  const ClassDataset ds = generate_synthetic(cfg);
  const EpisodeSampler sampler(ds, {3, 5, 5});
  Rng rng(8);
  std::size_t overlap = 0, bad_count = 0, leaks = 0, dup_classes = 0, value_mismatch = 0;
  for (int e = 0; e < 10000; ++e) {
    const Episode ep = sampler.sample(rng);
    bad_count += ep.class_ids.size() != 3;
    dup_classes += std::set<int>(ep.class_ids.begin(), ep.class_ids.end()).size() != ep.class_ids.size();
    for (std::size_t k = 0; k < ep.class_ids.size(); ++k) {
      const ClassEntry& cls = ds.by_id(ep.class_ids[k]);
      bad_count += ep.support[k].size() != 5 || ep.query[k].size() != 5 || ep.support_index[k].size() != 5 || ep.query_index[k].size() != 5;
      const std::set<std::size_t> s(ep.support_index[k].begin(), ep.support_index[k].end());
      const std::set<std::size_t> q(ep.query_index[k].begin(), ep.query_index[k].end());
      bad_count += s.size() != 5 || q.size() != 5;
      for (std::size_t i : q) overlap += s.count(i);
      for (std::size_t i : s) leaks += cls.samples[i].split != Split::Train;
      for (std::size_t i : q) leaks += cls.samples[i].split != Split::Train;
      for (std::size_t j = 0; j < ep.query[k].size(); ++j) {
        const auto& v = cls.samples[ep.query_index[k][j]].values;
        value_mismatch += ep.query[k][j] != Tensor(v.begin(), v.end());
      }
    }
  }
  report(8, overlap == 0 && bad_count == 0 && leaks == 0 && dup_classes == 0 && value_mismatch == 0, "sampler invariants",
         fmt::format("10000 episodes (3-way, 5+5): {} support/query overlaps, {} cardinality violations, {} duplicate classes, "
                     "{} test-split samples, {} tensor/index mismatches",
                     overlap, bad_count, dup_classes, leaks, value_mismatch));
}

}  // namespace

int main() {
  log().set_level(spdlog::level::err);
  const auto t0 = std::chrono::steady_clock::now();
  auto guarded = [](int id, const char* what, auto fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, false, what, fmt::format("exception: {}", e.what()));
    }
  };
  guarded(1, "gradient suite", gradient_suite);
  guarded(2, "math-core oracles", math_core);
  guarded(3, "AP oracle", ap_oracle);
  guarded(4, "end-to-end desk run", desk_run);
  guarded(6, "multimodal stress", multimodal);
  guarded(7, "determinism", determinism);
  guarded(8, "sampler invariants", sampler_invariants);
  fmt::print("{} failing criteria, {:.1f}s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
