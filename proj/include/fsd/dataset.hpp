#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "fsd/errors.hpp"
#include "fsd/image.hpp"
#include "fsd/log.hpp"
#include "fsd/network.hpp"
#include "fsd/rng.hpp"
#include "fsd/types.hpp"

namespace fsd {

inline constexpr std::string_view kRealClassName = "real";

/// A vector sample (`values`) or an image sample (`path`, optionally decoded).
struct Sample {
  std::vector<double> values;
  std::filesystem::path path;
  std::shared_ptr<const Image> image;
  Split split = Split::Train;
};

struct ClassEntry {
  int class_id = 0;
  std::string name;
  Kind kind = Kind::Fake;
  std::vector<Sample> samples;

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == split) out.push_back(i);
    return out;
  }
};

/// Label-partitioned sample store. Immutable once loaded.
class ClassDataset {
 public:
  Shape input_shape;
  bool images = false;
  PreprocessConfig preprocess;
  std::vector<ClassEntry> classes;

  const ClassEntry& by_id(int class_id) const {
    for (const auto& c : classes)
      if (c.class_id == class_id) return c;
    throw InputError(fmt::format("no class with id {}", class_id));
  }

  const ClassEntry* find(std::string_view name) const {
    for (const auto& c : classes)
      if (c.name == name) return &c;
    return nullptr;
  }

  /// Resolves a class by name or by numeric id.
  const ClassEntry& lookup(std::string_view name_or_id) const {
    if (const auto* c = find(name_or_id)) return *c;
    int id = 0;
    const auto* end = name_or_id.data() + name_or_id.size();
    if (auto [p, ec] = std::from_chars(name_or_id.data(), end, id); ec == std::errc{} && p == end) return by_id(id);
    throw InputError(fmt::format("no class named '{}'", name_or_id));
  }

  const ClassEntry& real_class() const {
    const ClassEntry* found = nullptr;
    for (const auto& c : classes) {
      if (c.kind != Kind::Real) continue;
      if (found) throw StateError("dataset has more than one real class");
      found = &c;
    }
    if (!found) throw StateError("dataset has no real class");
    return *found;
  }

  std::vector<int> fake_class_ids() const {
    std::vector<int> out;
    for (const auto& c : classes)
      if (c.kind == Kind::Fake) out.push_back(c.class_id);
    return out;
  }

  ClassDataset excluding(int class_id) const {
    ClassDataset out = *this;
    std::erase_if(out.classes, [&](const ClassEntry& c) { return c.class_id == class_id; });
    return out;
  }

  /// Network-ready tensor for one sample. Vector samples pass through unchanged.
  Tensor materialize(const ClassEntry& cls, std::size_t index, Mode mode, Rng& rng) const {
    const Sample& s = cls.samples.at(index);
    if (!images) return Tensor(s.values.begin(), s.values.end());
    if (s.image) return fsd::preprocess(*s.image, mode, rng, preprocess);
    return fsd::preprocess(read_image(s.path), mode, rng, preprocess);
  }

  /// Stable identifier for verdict output: the file path or "<class>#<index>".
  std::string sample_name(const ClassEntry& cls, std::size_t index) const {
    const Sample& s = cls.samples.at(index);
    if (!s.path.empty()) return s.path.string();
    return fmt::format("{}#{}", cls.name, index);
  }
};

struct SplitSpec {
  std::string real_name = std::string(kRealClassName);
  double train_fraction = 0.8;
  bool require_real = true;
  bool cache_images = true;
  PreprocessConfig preprocess;
};

namespace detail {

/// First floor(n * train_fraction) samples are train, the rest test.
inline void assign_split(std::vector<Sample>& samples, double train_fraction) {
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(samples.size()) * train_fraction));
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].split = i < n_train ? Split::Train : Split::Test;
}

/// real -> id 0; remaining classes alphabetically from id 1.
inline void assign_ids(std::vector<ClassEntry>& classes, const SplitSpec& spec) {
  std::sort(classes.begin(), classes.end(), [](const ClassEntry& a, const ClassEntry& b) { return a.name < b.name; });
  int next = 1;
  bool has_real = false;
  for (auto& c : classes) {
    if (c.name == spec.real_name) {
      c.kind = Kind::Real;
      c.class_id = 0;
      has_real = true;
    } else {
      c.kind = Kind::Fake;
      c.class_id = next++;
    }
  }
  if (spec.require_real && !has_real) throw IngestionError(fmt::format("dataset has no '{}' class", spec.real_name));
  std::stable_sort(classes.begin(), classes.end(), [](const ClassEntry& a, const ClassEntry& b) { return a.class_id < b.class_id; });
}

inline std::vector<std::filesystem::path> sorted_entries(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Reads `root/<class>/*.{png,jpg,jpeg}`. Every image is decoded once to validate it.
inline ClassDataset load_image_dataset(const std::filesystem::path& root, const SplitSpec& spec = {}) {
  if (!std::filesystem::is_directory(root)) throw IngestionError(fmt::format("{} is not a directory", root.string()));
  ClassDataset ds;
  ds.images = true;
  ds.preprocess = spec.preprocess;
  ds.input_shape = Shape::image(3, spec.preprocess.crop, spec.preprocess.crop);
  for (const auto& dir : detail::sorted_entries(root)) {
    if (!std::filesystem::is_directory(dir)) continue;
    ClassEntry cls;
    cls.name = dir.filename().string();
    for (const auto& file : detail::sorted_entries(dir)) {
      if (!std::filesystem::is_regular_file(file) || !is_image_file(file)) continue;
      Sample s;
      s.path = file;
      auto img = std::make_shared<const Image>(read_image(file));
      if (img->width < 8 || img->height < 8)
        throw IngestionError(fmt::format("image {} is {}x{}, smaller than 8x8", file.string(), img->width, img->height));
      if (spec.cache_images) s.image = std::move(img);
      cls.samples.push_back(std::move(s));
    }
    if (cls.samples.empty()) throw IngestionError(fmt::format("class directory {} contains no images", dir.string()));
    detail::assign_split(cls.samples, spec.train_fraction);
    ds.classes.push_back(std::move(cls));
  }
  if (ds.classes.empty()) throw IngestionError(fmt::format("{} has no class directories", root.string()));
  detail::assign_ids(ds.classes, spec);
  return ds;
}

/// Parses one CSV file of comma-separated numbers; each non-empty row is one sample.
inline std::vector<std::vector<double>> read_csv_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(fmt::format("cannot open {}", path.string()));
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> values;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      std::string_view cell = rest.substr(0, comma);
      while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
      double v = 0.0;
      const auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || p != cell.data() + cell.size() || !std::isfinite(v))
        throw IngestionError(fmt::format("{}: row {}: non-numeric cell '{}'", path.string(), row, cell));
      values.push_back(v);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (!rows.empty() && values.size() != rows.front().size())
      throw IngestionError(fmt::format("{}: row {}: ragged row with {} columns, expected {}", path.string(), row, values.size(),
                                       rows.front().size()));
    rows.push_back(std::move(values));
  }
  return rows;
}

/// One class per CSV file; the class name is the file stem.
inline ClassDataset load_vector_dataset(const std::vector<std::filesystem::path>& csv_paths, const SplitSpec& spec = {}) {
  ClassDataset ds;
  std::optional<std::size_t> dim;
  for (const auto& path : csv_paths) {
    ClassEntry cls;
    cls.name = path.stem().string();
    for (auto& row : read_csv_rows(path)) {
      if (dim && row.size() != *dim)
        throw IngestionError(fmt::format("{}: width {} differs from other classes ({})", path.string(), row.size(), *dim));
      dim = row.size();
      Sample s;
      s.values = std::move(row);
      cls.samples.push_back(std::move(s));
    }
    if (cls.samples.empty()) throw IngestionError(fmt::format("{} contains no samples", path.string()));
    detail::assign_split(cls.samples, spec.train_fraction);
    ds.classes.push_back(std::move(cls));
  }
  if (ds.classes.empty()) throw IngestionError("no CSV files given");
  for (std::size_t i = 0; i < ds.classes.size(); ++i)
    for (std::size_t j = i + 1; j < ds.classes.size(); ++j)
      if (ds.classes[i].name == ds.classes[j].name) throw IngestionError(fmt::format("duplicate class name '{}'", ds.classes[i].name));
  ds.input_shape = Shape::flat(*dim);
  detail::assign_ids(ds.classes, spec);
  return ds;
}

/// Reads every `root/<class>.csv`.
inline ClassDataset load_vector_root(const std::filesystem::path& root, const SplitSpec& spec = {}) {
  if (!std::filesystem::is_directory(root)) throw IngestionError(fmt::format("{} is not a directory", root.string()));
  std::vector<std::filesystem::path> files;
  for (const auto& p : detail::sorted_entries(root))
    if (std::filesystem::is_regular_file(p) && p.extension() == ".csv") files.push_back(p);
  if (files.empty()) throw IngestionError(fmt::format("{} has no .csv files", root.string()));
  return load_vector_dataset(files, spec);
}

/// Folder of images, a single CSV file, or a folder of CSV files, as one unlabeled sample list.
inline std::vector<Sample> load_sample_list(const std::filesystem::path& path) {
  std::vector<Sample> out;
  auto add_csv = [&](const std::filesystem::path& file) {
    std::size_t row = 0;
    for (auto& values : read_csv_rows(file)) {
      Sample s;
      s.values = std::move(values);
      s.path = fmt::format("{}:{}", file.string(), ++row);
      out.push_back(std::move(s));
    }
  };
  if (std::filesystem::is_regular_file(path)) {
    if (path.extension() != ".csv") throw IngestionError(fmt::format("{}: expected a directory or .csv file", path.string()));
    add_csv(path);
  } else if (std::filesystem::is_directory(path)) {
    for (const auto& file : detail::sorted_entries(path)) {
      if (!std::filesystem::is_regular_file(file)) continue;
      if (is_image_file(file)) {
        Sample s;
        s.path = file;
        s.image = std::make_shared<const Image>(read_image(file));
        out.push_back(std::move(s));
      } else if (file.extension() == ".csv") {
        add_csv(file);
      }
    }
  } else {
    throw IngestionError(fmt::format("{} does not exist", path.string()));
  }
  if (out.empty()) throw IngestionError(fmt::format("{} contains no samples", path.string()));
  return out;
}

/// Eval-mode tensors for a loose sample list.
inline std::vector<Tensor> materialize_samples(const std::vector<Sample>& samples, const PreprocessConfig& pre) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  Rng unused(0);
  for (const auto& s : samples) {
    if (s.image) out.push_back(preprocess(*s.image, Mode::Eval, unused, pre));
    else out.emplace_back(s.values.begin(), s.values.end());
  }
  return out;
}

// Synthetic fingerprints -------------------------------------------------------

struct SynthConfig {
  std::size_t num_fake_classes = 6;
  std::size_t dim = 16;
  /// Minimum pairwise distance between any two (sub-)centers.
  double center_separation = 6.0;
  double noise = 1.0;
  std::size_t samples_per_class = 500;
  /// Fake class ids (1-based) that get two sub-centers.
  std::vector<int> multimodal_classes;
  /// Magnitude of an offset shared by every fake center along one random
  /// direction: a common "generator artifact" separating fakes from real.
  double fake_shift = 0.0;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
};

struct SyntheticDataset {
  ClassDataset dataset;
  /// centers[class_id] holds one or two (sub-)centers.
  std::vector<std::vector<std::vector<double>>> centers;
};

inline std::string synthetic_class_name(std::size_t fake_index) { return fmt::format("fake_{:02}", fake_index); }

inline SyntheticDataset generate_synthetic_with_centers(const SynthConfig& cfg) {
  if (!(cfg.center_separation > 0.0)) throw ConfigError("center_separation must be > 0");
  if (!(cfg.noise > 0.0)) throw ConfigError("within-class noise must be > 0");
  if (cfg.dim == 0) throw ConfigError("dimension must be positive");
  if (cfg.samples_per_class == 0) throw ConfigError("samples_per_class must be positive");
  if (cfg.num_fake_classes == 0 || cfg.num_fake_classes > 99) throw ConfigError("num_fake_classes must be in [1, 99]");
  for (int id : cfg.multimodal_classes)
    if (id < 1 || id > static_cast<int>(cfg.num_fake_classes)) throw ConfigError(fmt::format("multimodal class id {} out of range", id));

  Rng rng(mix_seed(cfg.seed, 1));
  const std::size_t n_classes = cfg.num_fake_classes + 1;
  const double spread = 1.5 * cfg.center_separation / std::sqrt(2.0 * static_cast<double>(cfg.dim));

  std::vector<double> shift_dir(cfg.dim);
  double norm = 0.0;
  for (auto& v : shift_dir) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : shift_dir) v /= norm;

  SyntheticDataset out;
  out.centers.resize(n_classes);
  std::vector<std::vector<double>> placed;
  constexpr int kMaxTries = 10000;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const bool multimodal = std::find(cfg.multimodal_classes.begin(), cfg.multimodal_classes.end(), static_cast<int>(c)) !=
                            cfg.multimodal_classes.end();
    const int modes = multimodal ? 2 : 1;
    for (int m = 0; m < modes; ++m) {
      int tries = 0;
      while (true) {
        if (++tries > kMaxTries)
          throw ConfigError(fmt::format("cannot place center for class {} at separation {} after {} tries", c,
                                        cfg.center_separation, kMaxTries));
        std::vector<double> center(cfg.dim);
        for (std::size_t d = 0; d < cfg.dim; ++d) center[d] = spread * rng.normal() + (c > 0 ? cfg.fake_shift * shift_dir[d] : 0.0);
        const bool ok = std::all_of(placed.begin(), placed.end(), [&](const std::vector<double>& other) {
          double d2 = 0.0;
          for (std::size_t d = 0; d < cfg.dim; ++d) d2 += (center[d] - other[d]) * (center[d] - other[d]);
          return d2 >= cfg.center_separation * cfg.center_separation;
        });
        if (!ok) continue;
        placed.push_back(center);
        out.centers[c].push_back(std::move(center));
        break;
      }
    }
  }

  Rng noise_rng(mix_seed(cfg.seed, 2));
  ClassDataset& ds = out.dataset;
  ds.input_shape = Shape::flat(cfg.dim);
  for (std::size_t c = 0; c < n_classes; ++c) {
    ClassEntry cls;
    cls.class_id = static_cast<int>(c);
    cls.kind = c == 0 ? Kind::Real : Kind::Fake;
    cls.name = c == 0 ? std::string(kRealClassName) : synthetic_class_name(c);
    cls.samples.resize(cfg.samples_per_class);
    for (std::size_t i = 0; i < cfg.samples_per_class; ++i) {
      const auto& center = out.centers[c][i % out.centers[c].size()];
      auto& values = cls.samples[i].values;
      values.resize(cfg.dim);
      for (std::size_t d = 0; d < cfg.dim; ++d) values[d] = center[d] + cfg.noise * noise_rng.normal();
    }
    detail::assign_split(cls.samples, cfg.train_fraction);
    ds.classes.push_back(std::move(cls));
  }
  return out;
}

inline ClassDataset generate_synthetic(const SynthConfig& cfg) { return generate_synthetic_with_centers(cfg).dataset; }

/// Writes `root/<class>.csv`, rows in sample order, 17 significant digits.
inline void export_csv(const ClassDataset& ds, const std::filesystem::path& root) {
  if (ds.images) throw InputError("CSV export needs a vector dataset");
  std::filesystem::create_directories(root);
  for (const auto& cls : ds.classes) {
    const auto path = root / (cls.name + ".csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    for (const auto& s : cls.samples) {
      for (std::size_t d = 0; d < s.values.size(); ++d) out << (d ? "," : "") << fmt::format("{:.17g}", s.values[d]);
      out << '\n';
    }
    if (!out) throw IoError(fmt::format("short write to {}", path.string()));
  }
}

}  // namespace fsd
