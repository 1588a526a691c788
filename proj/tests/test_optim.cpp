#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "fsd/optim.hpp"

using namespace fsd;

namespace {

ClassDataset collapsed_synth(std::size_t fakes, std::size_t dim, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.num_fake_classes = fakes;
  cfg.dim = dim;
  cfg.noise = 1e-6;
  cfg.center_separation = 0.3;
  cfg.samples_per_class = 40;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

TrainOptions quick_options(std::uint64_t steps, std::uint64_t seed = 1) {
  TrainOptions opts;
  opts.sampler = {3, 5, 5};
  opts.schedule.base_lr = 1e-3;
  opts.schedule.total_steps = steps;
  opts.schedule.episodes_per_step = 4;
  opts.seed = seed;
  return opts;
}

double mean(std::span<const double> xs) { return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size()); }

}  // namespace

TEST(Schedule, StepDecayValues) {
  const ScheduleConfig cfg;
  EXPECT_EQ(lr_at_step(cfg, 0), 1e-4);
  EXPECT_EQ(lr_at_step(cfg, 79999), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at_step(cfg, 80000), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at_step(cfg, 199999), 2.5e-5);
}

TEST(Schedule, PiecewiseConstantNonIncreasing) {
  ScheduleConfig cfg;
  cfg.step_size = 7;
  cfg.gamma = 0.8;
  double prev = lr_at_step(cfg, 0);
  for (std::uint64_t s = 1; s < 200; ++s) {
    const double lr = lr_at_step(cfg, s);
    EXPECT_LE(lr, prev);
    if (s % 7 != 0) EXPECT_EQ(lr, prev);
    else EXPECT_LT(lr, prev);
    prev = lr;
  }
}

TEST(Schedule, Validation) {
  ScheduleConfig cfg;
  cfg.gamma = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.base_lr = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.step_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Adam, ZeroGradientIsAFixedPoint) {
  std::vector<double> p = {0.5, -1.0, 3.0};
  const auto before = p;
  AdamState<double> st(3);
  for (int i = 0; i < 5; ++i) adam_step<double>(p, std::vector<double>(3, 0.0), st, 1e-2);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.t, 5u);
}

TEST(Adam, FirstStepWorkedExample) {
  std::vector<double> p = {0.0};
  AdamState<double> st(1);
  adam_step<double>(p, std::vector<double>{0.5}, st, 1e-3);
  // m = 0.05, v = 0.00025; m_hat = 0.5, v_hat = 0.25 -> -1e-3 * 0.5 / (0.5 + 1e-8).
  EXPECT_NEAR(p[0], -9.99999980e-4, 1e-12);
}

TEST(Adam, MatchesRecurrenceOracle) {
  const double g = 0.3, lr = 2e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double theta = 1.0, m = 0, v = 0;
  std::vector<double> p = {theta};
  AdamState<double> st(1);
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    theta -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    adam_step<double>(p, std::vector<double>{g}, st, lr);
    EXPECT_NEAR(p[0], theta, 1e-12);
  }
}

TEST(Adam, NonFiniteGradientAbortsWithIndex) {
  std::vector<float> p = {1, 2, 3};
  AdamState<float> st(3);
  try {
    adam_step<float>(p, std::vector<float>{0.1f, NAN, 0.1f}, st, 1e-3);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter 1"), std::string::npos);
  }
  EXPECT_EQ(p, (std::vector<float>{1, 2, 3}));
  EXPECT_EQ(st.t, 0u);
  EXPECT_THROW(adam_step<float>(p, std::vector<float>{0.1f}, st, 1e-3), InputError);
}

TEST(Train, ZeroStepsIsANoOp) {
  const auto ds = collapsed_synth(2, 8, 1);
  const auto net = init_network(mlp_config(8, {16}, 8, 3));
  const auto res = train(net, ds, quick_options(0));
  ASSERT_EQ(res.net.parameter_count(), net.parameter_count());
  for (std::size_t i = 0; i < net.parameter_count(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint32_t>(res.net.parameters()[i]), std::bit_cast<std::uint32_t>(net.parameters()[i]));
  EXPECT_TRUE(res.losses.empty());
}

TEST(Train, LossFallsOnSeparableData) {
  const auto ds = collapsed_synth(2, 8, 2);
  const auto res = train(init_network(mlp_config(8, {16}, 8, 4)), ds, quick_options(300));
  ASSERT_EQ(res.losses.size(), 300u);
  const std::span<const double> l(res.losses);
  EXPECT_LT(mean(l.last(50)), mean(l.first(50)));
}

TEST(Train, ReachesLowLossWithin1000Steps) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto ds = collapsed_synth(2, 8, seed);
    const auto res = train(init_network(mlp_config(8, {16}, 8, seed)), ds, quick_options(1000, seed));
    const double best_window = mean(std::span<const double>(res.losses).last(20));
    EXPECT_LT(best_window, 0.05) << "seed " << seed;
  }
}

TEST(Train, DeterministicAcrossRunsAndThreadCounts) {
  const auto ds = collapsed_synth(4, 8, 5);
  auto opts = quick_options(40, 9);
  opts.sampler = {3, 2, 2};
  const auto net = init_network(mlp_config(8, {16}, 8, 6));
  const auto a = train(net, ds, opts);
  const auto b = train(net, ds, opts);
  opts.threads = 3;
  const auto c = train(net, ds, opts);
  ASSERT_EQ(a.losses.size(), 40u);
  for (std::size_t i = 0; i < a.losses.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a.losses[i]), std::bit_cast<std::uint64_t>(b.losses[i]));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a.losses[i]), std::bit_cast<std::uint64_t>(c.losses[i]));
  }
  EXPECT_TRUE(std::equal(a.net.parameters().begin(), a.net.parameters().end(), c.net.parameters().begin()));
}

TEST(Train, LogsAndCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "fsd_test_train_ckpt";
  std::filesystem::remove_all(dir);
  const auto ds = collapsed_synth(2, 8, 1);
  auto opts = quick_options(25);
  opts.log_interval = 10;
  opts.checkpoint_every = 10;
  opts.checkpoint_path = dir / "model.ckpt";
  std::vector<std::string> lines;
  opts.on_record = [&](const TrainRecord& r) { lines.push_back(to_json_line(r)); };
  const auto res = train(init_network(mlp_config(8, {16}, 8, 3)), ds, opts);
  ASSERT_EQ(res.records.size(), 4u);  // steps 0, 10, 20, 24
  EXPECT_EQ(res.records.back().step, 24u);
  ASSERT_EQ(lines.size(), 4u);
  const auto j = nlohmann::json::parse(lines[1]);
  EXPECT_EQ(j.at("step"), 10);
  EXPECT_TRUE(j.contains("lr") && j.contains("loss") && j.contains("wallclock_ms"));
  const auto saved = load_checkpoint(dir / "model.ckpt");
  EXPECT_TRUE(std::equal(saved.parameters().begin(), saved.parameters().end(), res.net.parameters().begin()));
}

TEST(Train, ShapeMismatchAndSamplingErrors) {
  const auto ds = collapsed_synth(2, 8, 1);
  EXPECT_THROW(train(init_network(mlp_config(5, {16}, 8, 3)), ds, quick_options(1)), InputError);
  auto opts = quick_options(1);
  opts.sampler = {5, 5, 5};
  EXPECT_THROW(train(init_network(mlp_config(8, {16}, 8, 3)), ds, opts), SamplingError);
}
