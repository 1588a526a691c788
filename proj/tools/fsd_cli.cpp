// fsd: few-shot synthetic image detection from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "fsd/fsd.hpp"
#include "fsd/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Flags shared by every subcommand. Unset flags leave config values alone.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t threads = 1;
  std::string data;
  std::vector<std::string> exclude;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* data_opt = nullptr;
  CLI::Option* exclude_opt = nullptr;
};

struct Args {
  Common common;
  std::string checkpoint;
  std::string registry;
  std::string support_fake;
  std::string support_real;
  std::string query;
  std::uint64_t steps = 0;
  CLI::Option* steps_opt = nullptr;
  std::vector<std::size_t> shots;
  CLI::Option* shots_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c, bool with_data = true) {
  sub->add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);
  c.seed_opt = sub->add_option("--seed", c.seed, "seed for all randomness");
  c.out_opt = sub->add_option("--out", c.out, "output directory");
  c.threads_opt = sub->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  if (with_data) c.data_opt = sub->add_option("--data", c.data, "dataset root (class folders of images or .csv files)");
}

fsd::RunConfig resolve_config(const Common& c) {
  fsd::RunConfig cfg = c.config.empty() ? fsd::RunConfig{} : fsd::load_run_config(c.config);
  if (c.seed_opt && c.seed_opt->count()) cfg.seed = c.seed;
  if (c.out_opt && c.out_opt->count()) cfg.out = c.out;
  if (c.threads_opt && c.threads_opt->count()) cfg.threads = c.threads;
  if (c.data_opt && c.data_opt->count()) {
    cfg.data.root = c.data;
    cfg.data.source = fsd::detect_source(cfg.data.root);
  }
  if (c.exclude_opt && c.exclude_opt->count()) cfg.eval.exclude = c.exclude;
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw fsd::IoError(fmt::format("cannot write {}", path.string()));
  out << text;
  if (!out) throw fsd::IoError(fmt::format("short write to {}", path.string()));
}

void emit(const std::string& text) {
  std::fwrite(text.data(), 1, text.size(), stdout);
  std::fflush(stdout);
}

std::vector<int> resolve_classes(const fsd::ClassDataset& ds, const std::vector<std::string>& names) {
  std::vector<int> ids;
  for (const auto& n : names) ids.push_back(ds.lookup(n).class_id);
  return ids;
}

int single_excluded(const fsd::ClassDataset& ds, const fsd::RunConfig& cfg, const char* cmd) {
  if (cfg.eval.exclude.size() != 1)
    throw fsd::ConfigError(fmt::format("{} needs exactly one class via --exclude or eval.exclude", cmd));
  const auto& cls = ds.lookup(cfg.eval.exclude.front());
  if (cls.kind != fsd::Kind::Fake) throw fsd::ConfigError(fmt::format("--exclude '{}' is not a fake class", cls.name));
  return cls.class_id;
}

fsd::Network load_net(const std::string& path) {
  if (path.empty()) throw fsd::ConfigError("--checkpoint is required");
  return fsd::load_checkpoint(path);
}

void check_shape(const fsd::Network& net, const fsd::ClassDataset& ds) {
  if (net.config().input_shape != ds.input_shape)
    throw fsd::InputError(fmt::format("checkpoint input {} does not match dataset shape {}", net.config().input_shape.str(),
                                      ds.input_shape.str()));
}

// Commands ---------------------------------------------------------------------

int cmd_synth(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  fsd::validate(cfg);
  cfg.data.source = fsd::DataSource::Synth;
  const auto ds = fsd::load_dataset(cfg);
  fsd::export_csv(ds, cfg.out);
  json names = json::array();
  for (const auto& c : ds.classes) names.push_back(c.name);
  emit(json{{"root", cfg.out.string()}, {"classes", names}, {"dim", ds.input_shape.channels},
            {"samples_per_class", cfg.data.synth.samples_per_class}}
           .dump() +
       "\n");
  return 0;
}

int cmd_train(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  if (a.steps_opt->count()) cfg.schedule.total_steps = a.steps;
  fsd::validate(cfg);
  fsd::ClassDataset ds = fsd::load_dataset(cfg);
  std::string excluded;
  if (!cfg.eval.exclude.empty()) {
    const int id = single_excluded(ds, cfg, "train");
    excluded = ds.by_id(id).name;
    ds = ds.excluding(id);
  }
  const fsd::Network init = fsd::init_network(fsd::network_for(cfg, ds.input_shape));

  fs::create_directories(cfg.out);
  const fs::path ckpt = cfg.out / "model.ckpt";
  const fs::path log_path = cfg.out / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw fsd::IoError(fmt::format("cannot write {}", log_path.string()));

  fsd::TrainOptions opts = fsd::train_options(cfg);
  opts.checkpoint_path = ckpt;
  opts.on_record = [&](const fsd::TrainRecord& r) {
    log << fsd::to_json_line(r) << '\n' << std::flush;
    fsd::log().info("step {} lr {:.3g} loss {:.5f}", r.step, r.lr, r.loss);
  };
  fsd::log().info("training {} parameters for {} steps on {} classes", init.parameter_count(), cfg.schedule.total_steps,
                  ds.classes.size());
  const auto res = fsd::train(init, ds, opts);
  write_file(cfg.out / "config.json", fsd::to_json(cfg).dump(2) + "\n");

  json summary = {{"checkpoint", ckpt.string()},
                  {"checkpoint_id", fsd::checkpoint_id(res.net)},
                  {"steps", res.losses.size()},
                  {"final_loss", res.losses.empty() ? json(nullptr) : json(res.losses.back())},
                  {"excluded_class", excluded}};
  emit(summary.dump() + "\n");
  return 0;
}

int cmd_eval(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  if (a.shots_opt->count()) {
    if (a.shots.size() != 1) throw fsd::ConfigError("eval takes a single --shots value");
    cfg.eval.shots = a.shots.front();
  }
  if (a.steps_opt->count()) cfg.schedule.total_steps = a.steps;
  fsd::validate(cfg);
  const auto ds = fsd::load_dataset(cfg);
  fsd::CrossGeneratorConfig cg;
  cg.network = fsd::network_for(cfg, ds.input_shape);
  cg.train = fsd::train_options(cfg);
  cg.eval = {cfg.eval.shots, cfg.eval.queries, cfg.seed};
  cg.zero_shot = cfg.eval.zero_shot;
  cg.zero_shot_samples = cfg.eval.zero_shot_samples;
  cg.held_out = resolve_classes(ds, cfg.eval.exclude);
  const auto res = fsd::cross_generator_run(ds, cg);
  write_file(cfg.out / "report.json", fsd::to_json(res).dump(2) + "\n");
  std::string text = fsd::format_table(res);
  if (!res.zero_shot.empty()) {
    text += "\nzero-shot (held-out class):\n";
    for (const auto& z : res.zero_shot)
      text += fmt::format("{:<18} {:>13}\n", z.class_under_test, fmt::format("{:.1f}/{:.1f}", 100 * z.accuracy, 100 * z.average_precision));
  }
  emit(text);
  return 0;
}

int cmd_detect(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  const fsd::Network net = load_net(a.checkpoint);
  const auto fake = fsd::load_sample_list(a.support_fake);
  const auto real = fsd::load_sample_list(a.support_real);
  const auto query = fsd::load_sample_list(a.query);
  if (fake.size() != real.size())
    fsd::log().warn("support sizes differ: {} fake vs {} real", fake.size(), real.size());
  std::vector<std::string> names;
  for (const auto& s : query) names.push_back(s.path.string());
  const auto& pre = cfg.data.preprocess;
  const auto verdicts = fsd::fewshot_detect(net, fsd::materialize_samples(fake, pre), fsd::materialize_samples(real, pre),
                                            fsd::materialize_samples(query, pre), 1, names);
  std::string out;
  for (const auto& v : verdicts) out += fsd::to_json(v).dump() + "\n";
  emit(out);
  return 0;
}

int cmd_build_protos(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  fsd::validate(cfg);
  const fsd::Network net = load_net(a.checkpoint);
  fsd::ClassDataset ds = fsd::load_dataset(cfg);
  check_shape(net, ds);
  for (int id : resolve_classes(ds, cfg.eval.exclude)) ds = ds.excluding(id);
  const auto reg = fsd::build_zero_shot_registry(net, ds, cfg.eval.zero_shot_samples, cfg.seed, fsd::checkpoint_id(net));
  const fs::path path = a.registry.empty() ? cfg.out / "registry.json" : fs::path(a.registry);
  fsd::save_registry(reg, path);
  json classes = json::array();
  for (const auto& p : reg.prototypes())
    classes.push_back({{"class_id", p.class_id}, {"name", p.name}, {"kind", std::string(fsd::to_string(p.kind))},
                       {"support_count", p.support_count}});
  emit(json{{"registry", path.string()}, {"checkpoint_id", reg.checkpoint_id()}, {"prototypes", classes}}.dump() + "\n");
  return 0;
}

int cmd_zero_shot(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  const fsd::Network net = load_net(a.checkpoint);
  if (a.registry.empty()) throw fsd::ConfigError("--registry is required");
  const auto reg = fsd::load_registry(a.registry);
  if (!reg.checkpoint_id().empty() && reg.checkpoint_id() != fsd::checkpoint_id(net))
    fsd::log().warn("registry was built from checkpoint {}, using {}", reg.checkpoint_id(), fsd::checkpoint_id(net));

  if (!a.query.empty()) {
    const auto query = fsd::load_sample_list(a.query);
    std::vector<std::string> names;
    for (const auto& s : query) names.push_back(s.path.string());
    std::string out;
    for (const auto& v : fsd::zero_shot_detect(net, reg, fsd::materialize_samples(query, cfg.data.preprocess), names))
      out += fsd::to_json(v).dump() + "\n";
    emit(out);
    return 0;
  }

  fsd::validate(cfg);
  const auto ds = fsd::load_dataset(cfg);
  check_shape(net, ds);
  std::vector<int> ids = resolve_classes(ds, cfg.eval.exclude);
  if (ids.empty()) ids = ds.fake_class_ids();
  json reports = json::array();
  for (int id : ids) reports.push_back(fsd::to_json(fsd::evaluate_zero_shot(net, reg, ds, id, cfg.eval.queries, cfg.seed)));
  const std::string text = reports.dump(2) + "\n";
  write_file(cfg.out / "zero_shot.json", text);
  emit(text);
  return 0;
}

int cmd_ablate(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  if (a.shots_opt->count()) cfg.eval.sweep_shots = a.shots;
  fsd::validate(cfg);
  const fsd::Network net = load_net(a.checkpoint);
  const auto ds = fsd::load_dataset(cfg);
  check_shape(net, ds);
  const int held = single_excluded(ds, cfg, "ablate");
  fsd::ShotSweepConfig sc;
  sc.shots = cfg.eval.sweep_shots;
  sc.query_ratio = cfg.eval.query_ratio;
  sc.repetitions = cfg.eval.repetitions;
  sc.seed = cfg.seed;
  const auto sweep = fsd::shot_sweep(net, ds, held, sc);
  if (sweep.empty()) throw fsd::SamplingError("no shot count could be evaluated");
  write_file(cfg.out / "shot_sweep.json", fsd::to_json(sweep, ds.by_id(held).name, cfg.seed).dump(2) + "\n");
  emit(fsd::format_table(sweep));
  return 0;
}

int cmd_export(const Args& a) {
  fsd::RunConfig cfg = resolve_config(a.common);
  fsd::validate(cfg);
  const fsd::Network net = load_net(a.checkpoint);
  const auto ds = fsd::load_dataset(cfg);
  check_shape(net, ds);
  const fs::path path = cfg.out / "embeddings.csv";
  fsd::export_embeddings(net, ds, cfg.eval.export_cap, path, cfg.seed);
  emit(json{{"embeddings", path.string()}, {"dim", net.embedding_dim()}}.dump() + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detection of synthetic images with prototypical networks"};
  app.require_subcommand(1);
  Args a;

  auto* synth = app.add_subcommand("synth-data", "generate a synthetic vector dataset as CSV files");
  add_common(synth, a.common, false);

  auto* train = app.add_subcommand("train", "episodic training; writes model.ckpt and train_log.jsonl");
  add_common(train, a.common);
  a.steps_opt = train->add_option("--steps", a.steps, "optimizer steps (overrides schedule.total_steps)");
  a.common.exclude_opt = train->add_option("--exclude", a.common.exclude, "fake class to hold out");

  auto* eval = app.add_subcommand("eval", "leave-one-class-out cross-generator matrix");
  add_common(eval, a.common);
  a.shots_opt = eval->add_option("--shots", a.shots, "support samples per side (K)");
  auto* eval_steps = eval->add_option("--steps", a.steps, "optimizer steps per held-out class");
  auto* eval_exclude = eval->add_option("--exclude", a.common.exclude, "held-out classes (default: every fake class)");

  auto* detect = app.add_subcommand("detect", "few-shot detection of query samples");
  add_common(detect, a.common, false);
  detect->add_option("--checkpoint", a.checkpoint, "trained model")->required()->check(CLI::ExistingFile);
  detect->add_option("--support-fake", a.support_fake, "fake support samples (directory or .csv)")->required();
  detect->add_option("--support-real", a.support_real, "real support samples (directory or .csv)")->required();
  detect->add_option("--query", a.query, "query samples (directory or .csv)")->required();

  auto* protos = app.add_subcommand("build-protos", "build the zero-shot prototype registry");
  add_common(protos, a.common);
  protos->add_option("--checkpoint", a.checkpoint, "trained model")->required()->check(CLI::ExistingFile);
  protos->add_option("--registry", a.registry, "output registry path (default OUT/registry.json)");
  auto* protos_exclude = protos->add_option("--exclude", a.common.exclude, "classes left out of the registry");

  auto* zero = app.add_subcommand("zero-shot", "classify against a prototype registry");
  add_common(zero, a.common);
  zero->add_option("--checkpoint", a.checkpoint, "trained model")->required()->check(CLI::ExistingFile);
  zero->add_option("--registry", a.registry, "registry JSON")->required()->check(CLI::ExistingFile);
  zero->add_option("--query", a.query, "query samples; without it, evaluate classes of the dataset");
  auto* zero_exclude = zero->add_option("--exclude", a.common.exclude, "classes to evaluate (default: every fake class)");

  auto* ablate = app.add_subcommand("ablate", "shot-count sweep on a held-out class");
  add_common(ablate, a.common);
  ablate->add_option("--checkpoint", a.checkpoint, "trained model")->required()->check(CLI::ExistingFile);
  auto* ablate_exclude = ablate->add_option("--exclude", a.common.exclude, "held-out class under test");
  auto* ablate_shots = ablate->add_option("--shots", a.shots, "shot counts, e.g. 1,3,5,10")->delimiter(',');

  auto* exp = app.add_subcommand("export-embeddings", "write per-class embeddings as CSV");
  add_common(exp, a.common);
  exp->add_option("--checkpoint", a.checkpoint, "trained model")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  // Options registered on several subcommands share storage; point the
  // bookkeeping at the instance that was actually parsed.
  if (eval->parsed()) {
    a.common.exclude_opt = eval_exclude;
    a.steps_opt = eval_steps;
  } else if (protos->parsed()) {
    a.common.exclude_opt = protos_exclude;
  } else if (zero->parsed()) {
    a.common.exclude_opt = zero_exclude;
  } else if (ablate->parsed()) {
    a.common.exclude_opt = ablate_exclude;
    a.shots_opt = ablate_shots;
  }
  for (auto* sub : app.get_subcommands()) {
    auto flag = [&](const char* name) { return sub->get_option_no_throw(name); };
    a.common.seed_opt = flag("--seed");
    a.common.out_opt = flag("--out");
    a.common.threads_opt = flag("--threads");
    a.common.data_opt = flag("--data");
  }

  try {
    if (synth->parsed()) return cmd_synth(a);
    if (train->parsed()) return cmd_train(a);
    if (eval->parsed()) return cmd_eval(a);
    if (detect->parsed()) return cmd_detect(a);
    if (protos->parsed()) return cmd_build_protos(a);
    if (zero->parsed()) return cmd_zero_shot(a);
    if (ablate->parsed()) return cmd_ablate(a);
    if (exp->parsed()) return cmd_export(a);
  } catch (const std::exception& e) {
    fsd::log().error("{}", e.what());
    return 2;
  }
  return 1;
}
