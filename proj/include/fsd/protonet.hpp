#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "fsd/errors.hpp"
#include "fsd/network.hpp"
#include "fsd/types.hpp"

namespace fsd {

struct Prototype {
  int class_id = 0;
  std::string name;
  Kind kind = Kind::Fake;
  std::vector<double> vector;
  std::size_t support_count = 0;
};

enum class Provenance { FewShot, ZeroShot };

inline std::string_view to_string(Provenance p) { return p == Provenance::FewShot ? "few-shot" : "zero-shot"; }

class PrototypeRegistry {
 public:
  PrototypeRegistry() = default;
  PrototypeRegistry(std::size_t embedding_dim, Provenance provenance, std::string checkpoint_id = {})
      : embedding_dim_(embedding_dim), provenance_(provenance), checkpoint_id_(std::move(checkpoint_id)) {}

  void add(Prototype p) {
    if (p.vector.size() != embedding_dim_)
      throw InputError(fmt::format("prototype {} has dim {}, registry expects {}", p.class_id, p.vector.size(), embedding_dim_));
    if (p.support_count == 0) throw InputError(fmt::format("prototype {} has support_count 0", p.class_id));
    for (double v : p.vector)
      if (!std::isfinite(v)) throw InputError(fmt::format("prototype {} has a non-finite component", p.class_id));
    if (find(p.class_id)) throw InputError(fmt::format("duplicate class_id {} in registry", p.class_id));
    prototypes_.push_back(std::move(p));
  }

  const Prototype* find(int class_id) const {
    for (const auto& p : prototypes_)
      if (p.class_id == class_id) return &p;
    return nullptr;
  }

  bool has_kind(Kind k) const {
    return std::any_of(prototypes_.begin(), prototypes_.end(), [k](const Prototype& p) { return p.kind == k; });
  }

  const std::vector<Prototype>& prototypes() const { return prototypes_; }
  std::size_t size() const { return prototypes_.size(); }
  bool empty() const { return prototypes_.empty(); }
  std::size_t embedding_dim() const { return embedding_dim_; }
  Provenance provenance() const { return provenance_; }
  const std::string& checkpoint_id() const { return checkpoint_id_; }

 private:
  std::vector<Prototype> prototypes_;
  std::size_t embedding_dim_ = 0;
  Provenance provenance_ = Provenance::FewShot;
  std::string checkpoint_id_;
};

struct ClassProbabilities {
  std::vector<int> class_ids;
  std::vector<double> probabilities;
  std::vector<double> distances;
  /// Position of the nearest prototype (lowest class_id among ties).
  std::size_t best = 0;

  int predicted_class() const { return class_ids.at(best); }
};

/// Element-wise mean, summed in ascending index order in double.
template <typename Real>
std::vector<double> mean_vector(std::span<const Vec<Real>> embeddings) {
  if (embeddings.empty()) throw InputError("cannot average an empty embedding list");
  const std::size_t dim = embeddings.front().size();
  std::vector<double> sum(dim, 0.0);
  for (std::size_t s = 0; s < embeddings.size(); ++s) {
    if (embeddings[s].size() != dim)
      throw InputError(fmt::format("embedding {} has dim {}, expected {}", s, embeddings[s].size(), dim));
    for (std::size_t k = 0; k < dim; ++k) sum[k] += static_cast<double>(embeddings[s][k]);
  }
  const double n = static_cast<double>(embeddings.size());
  for (double& v : sum) v /= n;
  return sum;
}

template <typename Real>
Prototype compute_prototype(std::span<const Vec<Real>> embeddings, int class_id, Kind kind, std::string name = {}) {
  Prototype p;
  p.vector = mean_vector<Real>(embeddings);
  p.class_id = class_id;
  p.kind = kind;
  p.name = std::move(name);
  p.support_count = embeddings.size();
  return p;
}

template <typename Real>
Prototype compute_prototype(const std::vector<Vec<Real>>& embeddings, int class_id, Kind kind, std::string name = {}) {
  return compute_prototype<Real>(std::span<const Vec<Real>>(embeddings), class_id, kind, std::move(name));
}

template <typename A, typename B>
auto sq_euclidean(std::span<const A> a, std::span<const B> b) {
  using R = std::common_type_t<A, B>;
  if (a.size() != b.size()) throw InputError(fmt::format("distance between vectors of dim {} and {}", a.size(), b.size()));
  R acc{0};
  for (std::size_t k = 0; k < a.size(); ++k) {
    const R d = static_cast<R>(a[k]) - static_cast<R>(b[k]);
    acc += d * d;
  }
  return acc;
}

template <typename A, typename B>
auto sq_euclidean(const std::vector<A>& a, const std::vector<B>& b) {
  return sq_euclidean(std::span<const A>(a), std::span<const B>(b));
}

/// softmax(-d) with the minimum distance subtracted first.
inline std::vector<double> softmax_neg(std::span<const double> distances) {
  const double lo = *std::min_element(distances.begin(), distances.end());
  std::vector<double> p(distances.size());
  double total = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    p[i] = std::exp(-(distances[i] - lo));
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

/// Index of the smallest distance; equal distances resolve to the lowest class id.
inline std::size_t nearest_index(std::span<const double> distances, std::span<const int> class_ids) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < distances.size(); ++i) {
    if (distances[i] < distances[best] || (distances[i] == distances[best] && class_ids[i] < class_ids[best])) best = i;
  }
  return best;
}

template <typename Real>
ClassProbabilities classify(std::span<const Real> query, const PrototypeRegistry& registry) {
  if (registry.empty()) throw StateError("cannot classify against an empty registry");
  if (query.size() != registry.embedding_dim())
    throw InputError(fmt::format("query has dim {}, registry expects {}", query.size(), registry.embedding_dim()));
  ClassProbabilities out;
  out.class_ids.reserve(registry.size());
  out.distances.reserve(registry.size());
  for (const auto& p : registry.prototypes()) {
    out.class_ids.push_back(p.class_id);
    out.distances.push_back(static_cast<double>(sq_euclidean(query, std::span<const double>(p.vector))));
  }
  out.probabilities = softmax_neg(out.distances);
  out.best = nearest_index(out.distances, out.class_ids);
  return out;
}

template <typename Real>
ClassProbabilities classify(const Vec<Real>& query, const PrototypeRegistry& registry) {
  return classify(std::span<const Real>(query), registry);
}

// Episode loss ----------------------------------------------------------------

template <typename Real>
struct LossGradient {
  double loss = 0.0;
  Vec<Real> gradient;
};

struct LossOptions {
  /// Backpropagate through the prototypes into the support embeddings.
  /// Disabling this is only useful for verifying that the path matters.
  bool support_path = true;
};

inline void validate_episode(const Episode& ep) {
  const std::size_t nc = ep.class_ids.size();
  if (nc == 0) throw InputError("degenerate episode: no classes");
  if (ep.support.size() != nc || ep.query.size() != nc)
    throw InputError("degenerate episode: support/query class lists do not match class_ids");
  const std::size_t ns = ep.support.front().size();
  const std::size_t nq = ep.query.front().size();
  if (ns == 0 || nq == 0) throw InputError("degenerate episode: empty support or query set");
  for (std::size_t k = 0; k < nc; ++k) {
    if (ep.support[k].size() != ns || ep.query[k].size() != nq)
      throw InputError(fmt::format("degenerate episode: class {} has {}/{} support/query samples, expected {}/{}",
                                   ep.class_ids[k], ep.support[k].size(), ep.query[k].size(), ns, nq));
  }
}

/// J = -(1/(N_c N_q)) sum_k sum_{x in Q_k} log softmax(-d(f(x), c))_k with c_k the
/// mean support embedding, and dJ/dphi through both query and support paths.
template <typename Real>
LossGradient<Real> episode_loss(const EmbeddingNetwork<Real>& net, const Episode& ep, LossOptions opts = {}) {
  validate_episode(ep);
  const std::size_t nc = ep.class_ids.size();
  const std::size_t ns = ep.support.front().size();
  const std::size_t nq = ep.query.front().size();
  const std::size_t dim = net.embedding_dim();

  // Batch layout: all supports class-major, then all queries class-major.
  std::vector<Tensor> batch;
  batch.reserve(nc * (ns + nq));
  for (const auto& s : ep.support) batch.insert(batch.end(), s.begin(), s.end());
  for (const auto& q : ep.query) batch.insert(batch.end(), q.begin(), q.end());

  ForwardTrace<Real> trace;
  const auto emb = net.forward(batch, &trace);
  const std::size_t q0 = nc * ns;

  std::vector<Vec<Real>> protos(nc, Vec<Real>(dim, Real{0}));
  for (std::size_t k = 0; k < nc; ++k) {
    for (std::size_t s = 0; s < ns; ++s)
      for (std::size_t d = 0; d < dim; ++d) protos[k][d] += emb[k * ns + s][d];
    for (auto& v : protos[k]) v /= static_cast<Real>(ns);
  }

  const double scale = 1.0 / static_cast<double>(nc * nq);
  std::vector<Vec<Real>> grads(emb.size(), Vec<Real>(dim, Real{0}));
  std::vector<Vec<Real>> proto_grads(nc, Vec<Real>(dim, Real{0}));
  std::vector<double> dist(nc);
  double loss = 0.0;

  for (std::size_t k = 0; k < nc; ++k) {
    for (std::size_t j = 0; j < nq; ++j) {
      const std::size_t qi = q0 + k * nq + j;
      const auto& q = emb[qi];
      for (std::size_t i = 0; i < nc; ++i) dist[i] = static_cast<double>(sq_euclidean(std::span<const Real>(q), std::span<const Real>(protos[i])));
      const double lo = *std::min_element(dist.begin(), dist.end());
      double total = 0.0;
      for (std::size_t i = 0; i < nc; ++i) total += std::exp(-(dist[i] - lo));
      const double lse = std::log(total);
      loss -= (-(dist[k] - lo) - lse) * scale;

      for (std::size_t i = 0; i < nc; ++i) {
        const double p = std::exp(-(dist[i] - lo) - lse);
        const Real g = static_cast<Real>(((i == k ? 1.0 : 0.0) - p) * scale);
        if (g == Real{0}) continue;
        for (std::size_t d = 0; d < dim; ++d) {
          const Real diff = Real{2} * g * (q[d] - protos[i][d]);
          grads[qi][d] += diff;
          proto_grads[i][d] -= diff;
        }
      }
    }
  }

  if (opts.support_path) {
    const Real inv = Real{1} / static_cast<Real>(ns);
    for (std::size_t k = 0; k < nc; ++k)
      for (std::size_t s = 0; s < ns; ++s)
        for (std::size_t d = 0; d < dim; ++d) grads[k * ns + s][d] = proto_grads[k][d] * inv;
  }

  LossGradient<Real> out;
  out.loss = loss;
  out.gradient = net.backward(trace, grads);
  return out;
}

// Registry file ----------------------------------------------------------------

inline constexpr int kRegistryVersion = 1;

/// Serialized JSON; vector components are written with 17 significant digits.
inline std::string registry_to_json(const PrototypeRegistry& reg) {
  using nlohmann::json;
  std::ostringstream os;
  os << "{\n"
     << "  \"version\": " << kRegistryVersion << ",\n"
     << "  \"embedding_dim\": " << reg.embedding_dim() << ",\n"
     << "  \"checkpoint_id\": " << json(reg.checkpoint_id()).dump() << ",\n"
     << "  \"provenance\": " << json(std::string(to_string(reg.provenance()))).dump() << ",\n"
     << "  \"prototypes\": [";
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const auto& p = reg.prototypes()[i];
    os << (i ? ",\n" : "\n") << "    {\"class_id\": " << p.class_id << ", \"name\": " << json(p.name).dump()
       << ", \"kind\": \"" << to_string(p.kind) << "\", \"support_count\": " << p.support_count << ", \"vector\": [";
    for (std::size_t k = 0; k < p.vector.size(); ++k) os << (k ? ", " : "") << fmt::format("{:.17g}", p.vector[k]);
    os << "]}";
  }
  os << (reg.empty() ? "]\n" : "\n  ]\n") << "}\n";
  return os.str();
}

inline PrototypeRegistry registry_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    const int version = j.at("version").get<int>();
    if (version != kRegistryVersion) throw LoadError(fmt::format("registry version {} not supported", version));
    const std::string prov = j.at("provenance").get<std::string>();
    if (prov != "few-shot" && prov != "zero-shot") throw LoadError(fmt::format("unknown provenance '{}'", prov));
    PrototypeRegistry reg(j.at("embedding_dim").get<std::size_t>(), prov == "few-shot" ? Provenance::FewShot : Provenance::ZeroShot,
                          j.value("checkpoint_id", std::string{}));
    for (const auto& pj : j.at("prototypes")) {
      Prototype p;
      p.class_id = pj.at("class_id").get<int>();
      p.name = pj.value("name", std::string{});
      p.kind = kind_from_string(pj.at("kind").get<std::string>());
      p.support_count = pj.at("support_count").get<std::size_t>();
      p.vector = pj.at("vector").get<std::vector<double>>();
      reg.add(std::move(p));
    }
    return reg;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(fmt::format("malformed registry: {}", e.what()));
  } catch (const InputError& e) {
    throw LoadError(fmt::format("invalid registry: {}", e.what()));
  }
}

inline void save_registry(const PrototypeRegistry& reg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write registry {}", path.string()));
  out << registry_to_json(reg);
  if (!out) throw IoError(fmt::format("short write to {}", path.string()));
}

inline PrototypeRegistry load_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(fmt::format("cannot open registry {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return registry_from_json(ss.str());
}

}  // namespace fsd
