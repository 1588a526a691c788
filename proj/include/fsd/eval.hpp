#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "fsd/dataset.hpp"
#include "fsd/errors.hpp"
#include "fsd/log.hpp"
#include "fsd/network.hpp"
#include "fsd/optim.hpp"
#include "fsd/protonet.hpp"
#include "fsd/rng.hpp"
#include "fsd/types.hpp"

namespace fsd {

struct DetectionVerdict {
  std::string sample;
  double p_fake = 0.0;
  Kind predicted = Kind::Real;
  int nearest_class = 0;
};

inline nlohmann::json to_json(const DetectionVerdict& v) {
  return {{"sample", v.sample}, {"p_fake", v.p_fake}, {"label", std::string(to_string(v.predicted))}, {"nearest_class", v.nearest_class}};
}

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
};

struct EvalReport {
  std::string protocol;
  double accuracy = 0.0;
  double average_precision = 0.0;
  ConfusionCounts counts;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::string class_under_test;
  std::string excluded_class;
  std::vector<DetectionVerdict> verdicts;
};

inline nlohmann::json to_json(const EvalReport& r, bool with_verdicts = false) {
  nlohmann::json j = {
      {"protocol", r.protocol},
      {"acc", r.accuracy},
      {"ap", r.average_precision},
      {"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
      {"shots", r.shots},
      {"seed", r.seed},
      {"class_under_test", r.class_under_test},
      {"excluded_class", r.excluded_class},
  };
  if (with_verdicts) {
    nlohmann::json vs = nlohmann::json::array();
    for (const auto& v : r.verdicts) vs.push_back(to_json(v));
    j["verdicts"] = std::move(vs);
  }
  return j;
}

// Metrics -------------------------------------------------------------------

inline double accuracy(std::span<const DetectionVerdict> verdicts, std::span<const Kind> truth) {
  if (verdicts.empty()) throw MetricError("accuracy of an empty verdict list");
  if (verdicts.size() != truth.size())
    throw MetricError(fmt::format("accuracy: {} verdicts vs {} labels", verdicts.size(), truth.size()));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < verdicts.size(); ++i) correct += verdicts[i].predicted == truth[i];
  return static_cast<double>(correct) / static_cast<double>(verdicts.size());
}

inline constexpr int kApThresholdSteps = 10;

/// AP over the fixed thresholds t_k = k/10, k = 0..10 (fake iff p_fake >= t_k):
/// AP = sum_k (R(t_k) - R(t_{k+1})) * P(t_k), with R(t_11) = 0 and P = 1 when
/// nothing is predicted fake.
inline double average_precision(std::span<const double> p_fake, std::span<const Kind> truth) {
  if (p_fake.empty()) throw MetricError("average precision of an empty score list");
  if (p_fake.size() != truth.size()) throw MetricError(fmt::format("AP: {} scores vs {} labels", p_fake.size(), truth.size()));
  const auto fakes = static_cast<std::size_t>(std::count(truth.begin(), truth.end(), Kind::Fake));
  if (fakes == 0) throw MetricError("average precision undefined without fake samples");

  std::vector<double> precision(kApThresholdSteps + 1), recall(kApThresholdSteps + 2, 0.0);
  for (int k = 0; k <= kApThresholdSteps; ++k) {
    const double t = static_cast<double>(k) / kApThresholdSteps;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < p_fake.size(); ++i) {
      if (p_fake[i] < t) continue;
      if (truth[i] == Kind::Fake) ++tp;
      else ++fp;
    }
    precision[k] = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    recall[k] = static_cast<double>(tp) / static_cast<double>(fakes);
  }
  double ap = 0.0;
  for (int k = 0; k <= kApThresholdSteps; ++k) ap += (recall[k] - recall[k + 1]) * precision[k];
  return ap;
}

inline ConfusionCounts confusion(std::span<const DetectionVerdict> verdicts, std::span<const Kind> truth) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const bool fake = truth[i] == Kind::Fake;
    const bool said_fake = verdicts[i].predicted == Kind::Fake;
    if (fake && said_fake) ++c.tp;
    else if (!fake && said_fake) ++c.fp;
    else if (!fake) ++c.tn;
    else ++c.fn;
  }
  return c;
}

/// Fills accuracy, AP and counts from verdicts and ground truth.
inline void score_report(EvalReport& report, std::vector<DetectionVerdict> verdicts, std::span<const Kind> truth) {
  std::vector<double> scores;
  scores.reserve(verdicts.size());
  for (const auto& v : verdicts) scores.push_back(v.p_fake);
  report.accuracy = accuracy(verdicts, truth);
  report.average_precision = average_precision(scores, truth);
  report.counts = confusion(verdicts, truth);
  report.verdicts = std::move(verdicts);
}

// Detection -----------------------------------------------------------------

inline std::vector<std::vector<double>> embed_all(const Network& net, const std::vector<Tensor>& samples) {
  std::vector<std::vector<double>> out;
  out.reserve(samples.size());
  for (auto& e : net.forward(samples)) out.emplace_back(e.begin(), e.end());
  return out;
}

/// Binary few-shot detection against {c_real (id 0), c_fake (id fake_class_id)}.
/// p_fake is the two-way distance softmax; a query is fake iff strictly nearer
/// to c_fake, so exact ties go to real.
inline std::vector<DetectionVerdict> fewshot_detect(const Network& net, const std::vector<Tensor>& support_fake,
                                                    const std::vector<Tensor>& support_real, const std::vector<Tensor>& queries,
                                                    int fake_class_id = 1, const std::vector<std::string>& names = {}) {
  if (support_fake.empty() || support_real.empty()) throw InputError("few-shot detection needs K >= 1 support samples per side");
  if (queries.empty()) throw InputError("few-shot detection needs at least one query");
  if (fake_class_id == 0) throw InputError("fake class id must differ from the real id 0");

  PrototypeRegistry reg(net.embedding_dim(), Provenance::FewShot);
  reg.add(compute_prototype(embed_all(net, support_real), 0, Kind::Real, "real"));
  reg.add(compute_prototype(embed_all(net, support_fake), fake_class_id, Kind::Fake, "fake"));

  std::vector<DetectionVerdict> out;
  out.reserve(queries.size());
  const auto emb = net.forward(queries);
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const auto probs = classify(emb[i], reg);
    DetectionVerdict v;
    v.sample = i < names.size() ? names[i] : fmt::format("query#{}", i);
    v.p_fake = probs.probabilities[1];
    v.nearest_class = probs.predicted_class();
    v.predicted = v.nearest_class == fake_class_id ? Kind::Fake : Kind::Real;
    out.push_back(std::move(v));
  }
  return out;
}

/// Nearest-prototype verdicts; p_fake is the probability mass on fake-kind prototypes.
inline std::vector<DetectionVerdict> zero_shot_detect(const Network& net, const PrototypeRegistry& reg,
                                                      const std::vector<Tensor>& queries,
                                                      const std::vector<std::string>& names = {}) {
  if (!reg.has_kind(Kind::Real)) throw StateError("zero-shot registry has no real prototype");
  if (!reg.has_kind(Kind::Fake)) throw StateError("zero-shot registry has no fake prototype");
  if (reg.embedding_dim() != net.embedding_dim())
    throw InputError(fmt::format("registry dim {} does not match network dim {}", reg.embedding_dim(), net.embedding_dim()));

  std::vector<DetectionVerdict> out;
  out.reserve(queries.size());
  const auto emb = net.forward(queries);
  for (std::size_t i = 0; i < emb.size(); ++i) {
    const auto probs = classify(emb[i], reg);
    DetectionVerdict v;
    v.sample = i < names.size() ? names[i] : fmt::format("query#{}", i);
    for (std::size_t k = 0; k < reg.size(); ++k)
      if (reg.prototypes()[k].kind == Kind::Fake) v.p_fake += probs.probabilities[k];
    v.nearest_class = probs.predicted_class();
    v.predicted = reg.prototypes()[probs.best].kind;
    out.push_back(std::move(v));
  }
  return out;
}

/// One metadata prototype per class from up to `samples_per_class` train-split
/// samples, chosen per class from a seed-derived stream and averaged in index order.
inline PrototypeRegistry build_zero_shot_registry(const Network& net, const ClassDataset& train_ds,
                                                  std::size_t samples_per_class = 1024, std::uint64_t seed = 0,
                                                  std::string checkpoint = {}) {
  if (samples_per_class == 0) throw InputError("samples_per_class must be positive");
  PrototypeRegistry reg(net.embedding_dim(), Provenance::ZeroShot, std::move(checkpoint));
  for (const auto& cls : train_ds.classes) {
    const auto pool = cls.indices(Split::Train);
    if (pool.empty()) throw InputError(fmt::format("class '{}' has no training samples", cls.name));
    if (pool.size() < samples_per_class)
      log().warn("class '{}' has {} training samples; metadata vector uses all of them (cap {})", cls.name, pool.size(), samples_per_class);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(cls.class_id) + 100));
    auto pick = rng.choose(pool.size(), samples_per_class);
    std::sort(pick.begin(), pick.end());
    std::vector<Tensor> batch;
    batch.reserve(pick.size());
    for (std::size_t p : pick) batch.push_back(train_ds.materialize(cls, pool[p], Mode::Eval, rng));
    reg.add(compute_prototype(net.forward(batch), cls.class_id, cls.kind, cls.name));
  }
  return reg;
}

/// Sample indices (into the class) drawn for one binary evaluation.
struct BinaryDraw {
  std::vector<std::size_t> support_fake, query_fake, support_real, query_real;
};

inline BinaryDraw draw_binary(const ClassEntry& fake, const ClassEntry& real, std::size_t shots, std::size_t queries, Rng& rng) {
  const auto fake_pool = fake.indices(Split::Test);
  const auto real_pool = real.indices(Split::Test);
  if (fake_pool.size() < shots + queries || real_pool.size() < shots + queries)
    throw SamplingError(fmt::format("need {} test samples per side for '{}' vs '{}', have {} / {}", shots + queries, fake.name,
                                    real.name, fake_pool.size(), real_pool.size()));
  BinaryDraw d;
  auto split = [&](const std::vector<std::size_t>& pool, std::vector<std::size_t>& sup, std::vector<std::size_t>& qry) {
    const auto pick = rng.choose(pool.size(), shots + queries);
    for (std::size_t i = 0; i < pick.size(); ++i) (i < shots ? sup : qry).push_back(pool[pick[i]]);
  };
  split(fake_pool, d.support_fake, d.query_fake);
  split(real_pool, d.support_real, d.query_real);
  return d;
}

struct FewShotProtocol {
  std::size_t shots = 10;
  /// Queries per side; 0 uses every remaining test sample (balanced).
  std::size_t queries = 0;
  std::uint64_t seed = 0;
};

/// K-shot binary test of one fake class against the real class, both drawn from the test split.
inline EvalReport evaluate_fewshot(const Network& net, const ClassDataset& ds, int fake_class_id, const FewShotProtocol& proto,
                                   Rng& rng) {
  if (proto.shots == 0) throw InputError("K must be >= 1");
  const ClassEntry& fake = ds.by_id(fake_class_id);
  const ClassEntry& real = ds.real_class();
  if (fake.kind != Kind::Fake) throw InputError(fmt::format("class '{}' is not a fake class", fake.name));
  std::size_t queries = proto.queries;
  if (queries == 0) {
    const std::size_t avail = std::min(fake.indices(Split::Test).size(), real.indices(Split::Test).size());
    if (avail <= proto.shots) throw SamplingError(fmt::format("class '{}' has too few test samples for {} shots", fake.name, proto.shots));
    queries = avail - proto.shots;
  }
  const BinaryDraw d = draw_binary(fake, real, proto.shots, queries, rng);
  auto tensors = [&](const ClassEntry& c, const std::vector<std::size_t>& idx) {
    std::vector<Tensor> out;
    for (std::size_t i : idx) out.push_back(ds.materialize(c, i, Mode::Eval, rng));
    return out;
  };
  std::vector<Tensor> query = tensors(fake, d.query_fake);
  for (auto& t : tensors(real, d.query_real)) query.push_back(std::move(t));
  std::vector<Kind> truth(d.query_fake.size(), Kind::Fake);
  truth.resize(query.size(), Kind::Real);
  std::vector<std::string> names;
  for (std::size_t i : d.query_fake) names.push_back(ds.sample_name(fake, i));
  for (std::size_t i : d.query_real) names.push_back(ds.sample_name(real, i));

  EvalReport report;
  report.protocol = "few-shot";
  report.shots = proto.shots;
  report.seed = proto.seed;
  report.class_under_test = fake.name;
  score_report(report, fewshot_detect(net, tensors(fake, d.support_fake), tensors(real, d.support_real), query, fake.class_id, names),
               truth);
  return report;
}

/// Zero-shot test of one fake class (and the real class) against a registry.
inline EvalReport evaluate_zero_shot(const Network& net, const PrototypeRegistry& reg, const ClassDataset& ds, int fake_class_id,
                                     std::size_t queries, std::uint64_t seed) {
  const ClassEntry& fake = ds.by_id(fake_class_id);
  const ClassEntry& real = ds.real_class();
  const std::size_t avail = std::min(fake.indices(Split::Test).size(), real.indices(Split::Test).size());
  if (queries == 0 || queries > avail) queries = avail;
  Rng rng(mix_seed(seed, 300 + static_cast<std::uint64_t>(fake_class_id)));
  const BinaryDraw d = draw_binary(fake, real, 0, queries, rng);
  std::vector<Tensor> query;
  std::vector<std::string> names;
  for (std::size_t i : d.query_fake) {
    query.push_back(ds.materialize(fake, i, Mode::Eval, rng));
    names.push_back(ds.sample_name(fake, i));
  }
  for (std::size_t i : d.query_real) {
    query.push_back(ds.materialize(real, i, Mode::Eval, rng));
    names.push_back(ds.sample_name(real, i));
  }
  std::vector<Kind> truth(d.query_fake.size(), Kind::Fake);
  truth.resize(query.size(), Kind::Real);

  EvalReport report;
  report.protocol = "zero-shot";
  report.seed = seed;
  report.class_under_test = fake.name;
  score_report(report, zero_shot_detect(net, reg, query, names), truth);
  return report;
}

// Cross-generator -----------------------------------------------------------

struct CrossGeneratorConfig {
  NetworkConfig network;
  TrainOptions train;
  FewShotProtocol eval;
  /// Also report zero-shot detection of each held-out class.
  bool zero_shot = true;
  std::size_t zero_shot_samples = 1024;
  /// Restrict the held-out rows to these fake class ids (empty = all).
  std::vector<int> held_out;
};

struct CrossGeneratorResult {
  std::vector<int> fake_ids;
  std::vector<std::string> fake_names;
  std::vector<int> held_out;
  /// rows[h][f]: classifier trained without held_out[h], tested on fake_ids[f].
  std::vector<std::vector<EvalReport>> rows;
  std::vector<EvalReport> zero_shot;
  std::vector<std::vector<double>> losses;
};

/// Leave-one-class-out protocol: for each held-out fake class, train from the
/// configured initialization on the remaining classes, then run the K-shot
/// binary test on every fake class.
inline CrossGeneratorResult cross_generator_run(const ClassDataset& ds, const CrossGeneratorConfig& cfg) {
  CrossGeneratorResult res;
  res.fake_ids = ds.fake_class_ids();
  if (res.fake_ids.size() < 2) throw InputError("cross-generator protocol needs at least two fake classes");
  ds.real_class();
  for (int id : res.fake_ids) res.fake_names.push_back(ds.by_id(id).name);
  res.held_out = cfg.held_out.empty() ? res.fake_ids : cfg.held_out;

  for (int h : res.held_out) {
    const std::string excluded = ds.by_id(h).name;
    log().info("cross-generator: training without '{}'", excluded);
    const ClassDataset train_ds = ds.excluding(h);
    TrainResult trained = train(init_network(cfg.network), train_ds, cfg.train);
    res.losses.push_back(trained.losses);

    std::vector<EvalReport> row;
    for (int f : res.fake_ids) {
      Rng rng(mix_seed(cfg.eval.seed, static_cast<std::uint64_t>(h) * 1000 + static_cast<std::uint64_t>(f)));
      EvalReport r = evaluate_fewshot(trained.net, ds, f, cfg.eval, rng);
      r.protocol = "cross-generator";
      r.excluded_class = excluded;
      row.push_back(std::move(r));
    }
    res.rows.push_back(std::move(row));

    if (cfg.zero_shot) {
      const auto reg = build_zero_shot_registry(trained.net, train_ds, cfg.zero_shot_samples, cfg.eval.seed);
      EvalReport z = evaluate_zero_shot(trained.net, reg, ds, h, cfg.eval.queries, cfg.eval.seed);
      z.excluded_class = excluded;
      res.zero_shot.push_back(std::move(z));
    }
  }
  return res;
}

inline nlohmann::json to_json(const CrossGeneratorResult& res) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : res.rows) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& rep : row) r.push_back(to_json(rep));
    rows.push_back(std::move(r));
  }
  nlohmann::json zs = nlohmann::json::array();
  for (const auto& z : res.zero_shot) zs.push_back(to_json(z));
  return {{"protocol", "cross-generator"}, {"test_classes", res.fake_names}, {"matrix", rows}, {"zero_shot", zs}};
}

/// ACC/AP percentages laid out with one row per excluded class.
inline std::string format_table(const CrossGeneratorResult& res) {
  std::string out = fmt::format("{:<18}", "Excluding");
  for (const auto& n : res.fake_names) out += fmt::format(" {:>13}", n);
  out += '\n';
  for (std::size_t h = 0; h < res.rows.size(); ++h) {
    out += fmt::format("{:<18}", res.rows[h].empty() ? "" : res.rows[h].front().excluded_class);
    for (const auto& r : res.rows[h]) out += fmt::format(" {:>13}", fmt::format("{:.1f}/{:.1f}", 100 * r.accuracy, 100 * r.average_precision));
    out += '\n';
  }
  return out;
}

// Shot sweep ----------------------------------------------------------------

struct ShotSweepConfig {
  std::vector<std::size_t> shots = {1, 3, 5, 10, 25, 50, 100, 200};
  /// Queries per side = ratio * K.
  std::size_t query_ratio = 3;
  std::size_t repetitions = 20;
  std::uint64_t seed = 0;
};

struct ShotResult {
  std::size_t shots = 0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double ap_mean = 0.0;
  double ap_std = 0.0;
  std::vector<EvalReport> runs;
};

namespace detail {
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}
}  // namespace detail

/// K-shot detection of `held_out` for each K, with K support and ratio*K query
/// samples per side, repeated and summarized as mean and sample stdev.
inline std::vector<ShotResult> shot_sweep(const Network& net, const ClassDataset& ds, int held_out, const ShotSweepConfig& cfg) {
  if (cfg.repetitions == 0) throw InputError("shot sweep needs at least one repetition");
  const ClassEntry& fake = ds.by_id(held_out);
  const ClassEntry& real = ds.real_class();
  const std::size_t avail = std::min(fake.indices(Split::Test).size(), real.indices(Split::Test).size());
  std::vector<ShotResult> out;
  for (std::size_t k : cfg.shots) {
    if (k == 0 || k * (1 + cfg.query_ratio) > avail) {
      log().warn("shot sweep: skipping K={} ('{}' needs {} test samples per side, {} available)", k, fake.name,
                 k * (1 + cfg.query_ratio), avail);
      continue;
    }
    ShotResult sr;
    sr.shots = k;
    std::vector<double> accs, aps;
    for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
      Rng rng(mix_seed(cfg.seed, k * 100003 + rep));
      EvalReport r = evaluate_fewshot(net, ds, held_out, FewShotProtocol{k, k * cfg.query_ratio, cfg.seed}, rng);
      r.protocol = "shot-sweep";
      accs.push_back(r.accuracy);
      aps.push_back(r.average_precision);
      r.verdicts.clear();
      sr.runs.push_back(std::move(r));
    }
    std::tie(sr.acc_mean, sr.acc_std) = detail::mean_std(accs);
    std::tie(sr.ap_mean, sr.ap_std) = detail::mean_std(aps);
    out.push_back(std::move(sr));
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<ShotResult>& sweep, const std::string& class_name, std::uint64_t seed) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : sweep)
    rows.push_back({{"shots", s.shots}, {"acc_mean", s.acc_mean}, {"acc_std", s.acc_std}, {"ap_mean", s.ap_mean},
                    {"ap_std", s.ap_std}, {"repetitions", s.runs.size()}});
  return {{"protocol", "shot-sweep"}, {"class_under_test", class_name}, {"seed", seed}, {"results", rows}};
}

inline std::string format_table(const std::vector<ShotResult>& sweep) {
  std::string out = fmt::format("{:>6} {:>16} {:>16}\n", "shots", "ACC(%)", "AP(%)");
  for (const auto& s : sweep)
    out += fmt::format("{:>6} {:>16} {:>16}\n", s.shots, fmt::format("{:.1f} ± {:.1f}", 100 * s.acc_mean, 100 * s.acc_std),
                       fmt::format("{:.1f} ± {:.1f}", 100 * s.ap_mean, 100 * s.ap_std));
  return out;
}

// Embedding export ------------------------------------------------------------

/// CSV `class_id,class_name,kind,e_0..e_{M-1}` with up to `per_class_cap`
/// seed-selected samples per class (all splits), rows in ascending sample order.
inline void export_embeddings(const Network& net, const ClassDataset& ds, std::size_t per_class_cap,
                              const std::filesystem::path& out_path, std::uint64_t seed = 0) {
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write {}", out_path.string()));
  out << "class_id,class_name,kind";
  for (std::size_t k = 0; k < net.embedding_dim(); ++k) out << ",e_" << k;
  out << '\n';
  for (const auto& cls : ds.classes) {
    Rng rng(mix_seed(seed, 500 + static_cast<std::uint64_t>(cls.class_id)));
    auto pick = rng.choose(cls.samples.size(), per_class_cap);
    std::sort(pick.begin(), pick.end());
    std::vector<Tensor> batch;
    for (std::size_t i : pick) batch.push_back(ds.materialize(cls, i, Mode::Eval, rng));
    for (const auto& e : net.forward(batch)) {
      out << cls.class_id << ',' << cls.name << ',' << to_string(cls.kind);
      for (float v : e) out << ',' << fmt::format("{:.9g}", v);
      out << '\n';
    }
  }
  if (!out) throw IoError(fmt::format("short write to {}", out_path.string()));
}

}  // namespace fsd
