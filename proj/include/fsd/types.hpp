#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "fsd/errors.hpp"
#include "fsd/network.hpp"

namespace fsd {

enum class Kind { Real, Fake };

inline std::string_view to_string(Kind k) { return k == Kind::Real ? "real" : "fake"; }

inline Kind kind_from_string(std::string_view s) {
  if (s == "real") return Kind::Real;
  if (s == "fake") return Kind::Fake;
  throw InputError(fmt::format("unknown kind '{}' (expected real|fake)", s));
}

enum class Split { Train, Test };

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

/// One N_c-way episode. support[k] / query[k] belong to class_ids[k];
/// the *_index vectors record the dataset sample indices they came from.
struct Episode {
  std::vector<int> class_ids;
  std::vector<std::vector<Tensor>> support;
  std::vector<std::vector<Tensor>> query;
  std::vector<std::vector<std::size_t>> support_index;
  std::vector<std::vector<std::size_t>> query_index;

  std::size_t num_classes() const { return class_ids.size(); }
};

}  // namespace fsd
