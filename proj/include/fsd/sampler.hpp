#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <fmt/format.h>

#include "fsd/dataset.hpp"
#include "fsd/errors.hpp"
#include "fsd/log.hpp"
#include "fsd/rng.hpp"
#include "fsd/types.hpp"

namespace fsd {

struct SamplerConfig {
  std::size_t classes = 3;  // N_c
  std::size_t support = 5;  // N_s
  std::size_t query = 5;    // N_q
  Split split = Split::Train;

  void validate() const {
    if (classes < 1) throw ConfigError("sampler needs N_c >= 1");
    if (support < 1 || query < 1) throw ConfigError("sampler needs N_s >= 1 and N_q >= 1");
  }
};

/// Draws N_c-way episodes from the classes that hold at least N_s + N_q
/// samples of the configured split. Classes short of that are skipped with a warning.
class EpisodeSampler {
 public:
  EpisodeSampler(const ClassDataset& ds, const SamplerConfig& cfg) : ds_(&ds), cfg_(cfg) {
    cfg_.validate();
    const std::size_t need = cfg_.support + cfg_.query;
    for (std::size_t c = 0; c < ds.classes.size(); ++c) {
      auto idx = ds.classes[c].indices(cfg_.split);
      if (idx.size() < need) {
        log().warn("class '{}' has {} {} samples, needs {}; excluded from sampling", ds.classes[c].name, idx.size(),
                   to_string(cfg_.split), need);
        continue;
      }
      eligible_.push_back(c);
      pools_.push_back(std::move(idx));
    }
    if (eligible_.size() < cfg_.classes)
      throw SamplingError(fmt::format("need {} classes with >= {} {} samples each, only {} qualify (short by {})", cfg_.classes,
                                      need, to_string(cfg_.split), eligible_.size(), cfg_.classes - eligible_.size()));
  }

  Episode sample(Rng& rng) const {
    const Mode mode = cfg_.split == Split::Train ? Mode::Train : Mode::Eval;
    Episode ep;
    const auto picked = rng.choose(eligible_.size(), cfg_.classes);
    for (std::size_t e : picked) {
      const ClassEntry& cls = ds_->classes[eligible_[e]];
      const auto& pool = pools_[e];
      const auto draw = rng.choose(pool.size(), cfg_.support + cfg_.query);
      std::vector<Tensor> support, query;
      std::vector<std::size_t> support_idx, query_idx;
      for (std::size_t i = 0; i < draw.size(); ++i) {
        const std::size_t sample = pool[draw[i]];
        Tensor t = ds_->materialize(cls, sample, mode, rng);
        if (i < cfg_.support) {
          support.push_back(std::move(t));
          support_idx.push_back(sample);
        } else {
          query.push_back(std::move(t));
          query_idx.push_back(sample);
        }
      }
      ep.class_ids.push_back(cls.class_id);
      ep.support.push_back(std::move(support));
      ep.query.push_back(std::move(query));
      ep.support_index.push_back(std::move(support_idx));
      ep.query_index.push_back(std::move(query_idx));
    }
    return ep;
  }

  const std::vector<std::size_t>& eligible_classes() const { return eligible_; }
  const SamplerConfig& config() const { return cfg_; }

 private:
  const ClassDataset* ds_;
  SamplerConfig cfg_;
  std::vector<std::size_t> eligible_;
  std::vector<std::vector<std::size_t>> pools_;
};

inline Episode sample_episode(const ClassDataset& ds, const SamplerConfig& cfg, Rng& rng) {
  return EpisodeSampler(ds, cfg).sample(rng);
}

}  // namespace fsd
