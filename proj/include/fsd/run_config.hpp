#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "fsd/dataset.hpp"
#include "fsd/errors.hpp"
#include "fsd/eval.hpp"
#include "fsd/network_config.hpp"
#include "fsd/optim.hpp"
#include "fsd/sampler.hpp"

namespace fsd {

enum class DataSource { Synth, Vectors, Images };

struct DataConfig {
  DataSource source = DataSource::Synth;
  std::filesystem::path root;
  std::string real_name = std::string(kRealClassName);
  double train_fraction = 0.8;
  PreprocessConfig preprocess;
  SynthConfig synth;
  /// Synthetic seed given explicitly; otherwise the run seed is used.
  bool synth_seed_set = false;
};

struct EvalConfig {
  std::size_t shots = 10;
  std::size_t queries = 0;
  bool zero_shot = true;
  std::size_t zero_shot_samples = 1024;
  /// Held-out classes by name or id (empty = every fake class).
  std::vector<std::string> exclude;
  std::vector<std::size_t> sweep_shots = {1, 3, 5, 10, 25, 50, 100, 200};
  std::size_t query_ratio = 3;
  std::size_t repetitions = 20;
  std::size_t export_cap = 1024;
};

/// Everything a command needs; JSON file values are overridden by flags.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::filesystem::path out = "fsd_out";
  DataConfig data;
  std::optional<NetworkConfig> network;
  SamplerConfig sampler;
  ScheduleConfig schedule;
  std::uint64_t log_interval = 100;
  std::uint64_t checkpoint_every = 1000;
  EvalConfig eval;
};

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known, std::string_view where) {
  if (!j.is_object()) throw ConfigError(fmt::format("config section '{}' must be an object", where));
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError(fmt::format("unknown config key '{}{}{}'", where, where.empty() ? "" : ".", key));
}

inline DataSource data_source_from_string(const std::string& s) {
  if (s == "synth") return DataSource::Synth;
  if (s == "vectors") return DataSource::Vectors;
  if (s == "images") return DataSource::Images;
  throw ConfigError(fmt::format("data.source must be synth, vectors or images, got '{}'", s));
}

}  // namespace detail

inline std::string_view to_string(DataSource s) {
  switch (s) {
    case DataSource::Synth: return "synth";
    case DataSource::Vectors: return "vectors";
    case DataSource::Images: return "images";
  }
  return "?";
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  detail::reject_unknown(j, {"seed", "threads", "out", "data", "network", "sampler", "schedule", "train", "eval"}, "");
  RunConfig cfg;
  read_opt(j, "seed", cfg.seed);
  read_opt(j, "threads", cfg.threads);
  std::string out = cfg.out.string();
  read_opt(j, "out", out);
  cfg.out = out;

  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, {"source", "root", "real_name", "train_fraction", "preprocess", "synth"}, "data");
    std::string source = "synth", root;
    read_opt(d, "source", source);
    cfg.data.source = detail::data_source_from_string(source);
    read_opt(d, "root", root);
    cfg.data.root = root;
    read_opt(d, "real_name", cfg.data.real_name);
    read_opt(d, "train_fraction", cfg.data.train_fraction);
    if (d.contains("preprocess")) {
      const auto& p = d["preprocess"];
      detail::reject_unknown(p, {"resize", "crop", "keep_aspect"}, "data.preprocess");
      read_opt(p, "resize", cfg.data.preprocess.resize);
      read_opt(p, "crop", cfg.data.preprocess.crop);
      read_opt(p, "keep_aspect", cfg.data.preprocess.keep_aspect);
    }
    if (d.contains("synth")) {
      const auto& s = d["synth"];
      detail::reject_unknown(s, {"num_fake_classes", "dim", "center_separation", "noise", "samples_per_class",
                                 "multimodal_classes", "fake_shift", "seed"},
                             "data.synth");
      auto& sc = cfg.data.synth;
      read_opt(s, "num_fake_classes", sc.num_fake_classes);
      read_opt(s, "dim", sc.dim);
      read_opt(s, "center_separation", sc.center_separation);
      read_opt(s, "noise", sc.noise);
      read_opt(s, "samples_per_class", sc.samples_per_class);
      read_opt(s, "multimodal_classes", sc.multimodal_classes);
      read_opt(s, "fake_shift", sc.fake_shift);
      if (s.contains("seed")) {
        read_opt(s, "seed", sc.seed);
        cfg.data.synth_seed_set = true;
      }
    }
  }

  if (j.contains("network")) {
    try {
      cfg.network = network_config_from_json(j["network"]);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("network: {}", e.what()));
    }
  }

  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    detail::reject_unknown(s, {"classes", "support", "query"}, "sampler");
    read_opt(s, "classes", cfg.sampler.classes);
    read_opt(s, "support", cfg.sampler.support);
    read_opt(s, "query", cfg.sampler.query);
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    detail::reject_unknown(s, {"base_lr", "gamma", "step_size", "total_steps", "episodes_per_step"}, "schedule");
    read_opt(s, "base_lr", cfg.schedule.base_lr);
    read_opt(s, "gamma", cfg.schedule.gamma);
    read_opt(s, "step_size", cfg.schedule.step_size);
    read_opt(s, "total_steps", cfg.schedule.total_steps);
    read_opt(s, "episodes_per_step", cfg.schedule.episodes_per_step);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, {"log_interval", "checkpoint_every"}, "train");
    read_opt(t, "log_interval", cfg.log_interval);
    read_opt(t, "checkpoint_every", cfg.checkpoint_every);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::reject_unknown(e, {"shots", "queries", "zero_shot", "zero_shot_samples", "exclude", "sweep_shots", "query_ratio",
                               "repetitions", "export_cap"},
                           "eval");
    read_opt(e, "shots", cfg.eval.shots);
    read_opt(e, "queries", cfg.eval.queries);
    read_opt(e, "zero_shot", cfg.eval.zero_shot);
    read_opt(e, "zero_shot_samples", cfg.eval.zero_shot_samples);
    read_opt(e, "exclude", cfg.eval.exclude);
    read_opt(e, "sweep_shots", cfg.eval.sweep_shots);
    read_opt(e, "query_ratio", cfg.eval.query_ratio);
    read_opt(e, "repetitions", cfg.eval.repetitions);
    read_opt(e, "export_cap", cfg.eval.export_cap);
  }
  return cfg;
}

inline nlohmann::json to_json(const RunConfig& cfg) {
  const auto& s = cfg.data.synth;
  nlohmann::json synth = {{"num_fake_classes", s.num_fake_classes}, {"dim", s.dim},
                          {"center_separation", s.center_separation}, {"noise", s.noise},
                          {"samples_per_class", s.samples_per_class}, {"multimodal_classes", s.multimodal_classes},
                          {"fake_shift", s.fake_shift}};
  if (cfg.data.synth_seed_set) synth["seed"] = s.seed;
  nlohmann::json j = {
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"out", cfg.out.string()},
      {"data",
       {{"source", std::string(to_string(cfg.data.source))},
        {"root", cfg.data.root.string()},
        {"real_name", cfg.data.real_name},
        {"train_fraction", cfg.data.train_fraction},
        {"preprocess",
         {{"resize", cfg.data.preprocess.resize}, {"crop", cfg.data.preprocess.crop}, {"keep_aspect", cfg.data.preprocess.keep_aspect}}},
        {"synth", synth}}},
      {"sampler", {{"classes", cfg.sampler.classes}, {"support", cfg.sampler.support}, {"query", cfg.sampler.query}}},
      {"schedule",
       {{"base_lr", cfg.schedule.base_lr},
        {"gamma", cfg.schedule.gamma},
        {"step_size", cfg.schedule.step_size},
        {"total_steps", cfg.schedule.total_steps},
        {"episodes_per_step", cfg.schedule.episodes_per_step}}},
      {"train", {{"log_interval", cfg.log_interval}, {"checkpoint_every", cfg.checkpoint_every}}},
      {"eval",
       {{"shots", cfg.eval.shots},
        {"queries", cfg.eval.queries},
        {"zero_shot", cfg.eval.zero_shot},
        {"zero_shot_samples", cfg.eval.zero_shot_samples},
        {"exclude", cfg.eval.exclude},
        {"sweep_shots", cfg.eval.sweep_shots},
        {"query_ratio", cfg.eval.query_ratio},
        {"repetitions", cfg.eval.repetitions},
        {"export_cap", cfg.eval.export_cap}}},
  };
  if (cfg.network) j["network"] = to_json(*cfg.network);
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return run_config_from_json(j);
}

/// Checks ranges and that referenced paths exist.
inline void validate(const RunConfig& cfg) {
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  if (!(cfg.data.train_fraction > 0.0 && cfg.data.train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
  if (cfg.data.source != DataSource::Synth && !std::filesystem::exists(cfg.data.root))
    throw ConfigError(fmt::format("data root '{}' does not exist", cfg.data.root.string()));
  cfg.sampler.validate();
  cfg.schedule.validate();
  if (cfg.eval.shots < 1) throw ConfigError("eval.shots must be >= 1");
  if (cfg.eval.repetitions < 1) throw ConfigError("eval.repetitions must be >= 1");
  if (cfg.eval.zero_shot_samples < 1) throw ConfigError("eval.zero_shot_samples must be >= 1");
}

/// Images if the root holds class folders of images, vectors if it holds CSV files.
inline DataSource detect_source(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw ConfigError(fmt::format("data root '{}' is not a directory", root.string()));
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".csv") return DataSource::Vectors;
  return DataSource::Images;
}

inline ClassDataset load_dataset(const RunConfig& cfg) {
  SplitSpec spec;
  spec.real_name = cfg.data.real_name;
  spec.train_fraction = cfg.data.train_fraction;
  spec.preprocess = cfg.data.preprocess;
  switch (cfg.data.source) {
    case DataSource::Synth: {
      SynthConfig sc = cfg.data.synth;
      sc.train_fraction = cfg.data.train_fraction;
      if (!cfg.data.synth_seed_set) sc.seed = cfg.seed;
      ClassDataset ds = generate_synthetic(sc);
      return ds;
    }
    case DataSource::Vectors: return load_vector_root(cfg.data.root, spec);
    case DataSource::Images: return load_image_dataset(cfg.data.root, spec);
  }
  throw ConfigError("unknown data source");
}

/// The configured network, or the default for the dataset: fc 64-64-64 for
/// vectors, four conv blocks for images.
inline NetworkConfig network_for(const RunConfig& cfg, const Shape& input) {
  if (cfg.network) {
    if (cfg.network->input_shape != input)
      throw ConfigError(fmt::format("network input {} does not match data shape {}", cfg.network->input_shape.str(), input.str()));
    return *cfg.network;
  }
  if (input.spatial) return conv4_config(input.channels, input.height, input.width, 64, 16, cfg.seed);
  return mlp_config(input.channels, {64, 64}, 64, cfg.seed);
}

inline TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions opts;
  opts.sampler = cfg.sampler;
  opts.schedule = cfg.schedule;
  opts.seed = cfg.seed;
  opts.threads = cfg.threads;
  opts.log_interval = cfg.log_interval;
  opts.checkpoint_every = cfg.checkpoint_every;
  return opts;
}

}  // namespace fsd
