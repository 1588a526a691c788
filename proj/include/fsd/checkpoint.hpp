#pragma once

// Checkpoint layout:
//   bytes 0..7   magic "FSDCKPT1"
//   bytes 8..15  manifest length, little-endian u64
//   manifest     UTF-8 JSON {format_version, config, parameter_count}
//   payload      parameter_count little-endian IEEE-754 binary32 values

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>

#include <fmt/format.h>
#include <json.hpp>

#include "fsd/errors.hpp"
#include "fsd/network.hpp"

namespace fsd {

inline constexpr std::string_view kCheckpointMagic = "FSDCKPT1";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint64_t get_le(std::string_view bytes, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Network& net) {
  const nlohmann::json manifest = {
      {"format_version", kCheckpointVersion},
      {"config", to_json(net.config())},
      {"parameter_count", net.parameter_count()},
  };
  const std::string text = manifest.dump();
  std::string out;
  out.reserve(kCheckpointMagic.size() + 8 + text.size() + 4 * net.parameter_count());
  out.append(kCheckpointMagic);
  detail::put_u64_le(out, text.size());
  out.append(text);
  for (float p : net.parameters()) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(p));
  return out;
}

/// Parses checkpoint bytes. When `expected` is given, the stored config must equal it.
inline Network parse_checkpoint(std::string_view bytes, const std::optional<NetworkConfig>& expected = std::nullopt) {
  const std::size_t header = kCheckpointMagic.size() + 8;
  if (bytes.size() < header) throw LoadError(fmt::format("checkpoint truncated: {} bytes, header needs {}", bytes.size(), header));
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) throw LoadError("not a checkpoint: bad magic");
  const std::uint64_t manifest_len = detail::get_le(bytes, kCheckpointMagic.size(), 8);
  if (manifest_len > bytes.size() - header)
    throw LoadError(fmt::format("checkpoint truncated: manifest length {} exceeds file", manifest_len));

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(fmt::format("corrupt checkpoint manifest: {}", e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointVersion)
    throw LoadError(fmt::format("checkpoint format version {} not supported (expected {})", version, kCheckpointVersion));

  NetworkConfig cfg;
  std::size_t count = 0;
  try {
    cfg = network_config_from_json(manifest.at("config"));
    count = manifest.at("parameter_count").get<std::size_t>();
  } catch (const std::exception& e) {
    throw LoadError(fmt::format("corrupt checkpoint manifest: {}", e.what()));
  }
  if (expected && !(*expected == cfg))
    throw LoadError(fmt::format("checkpoint shape mismatch: stored config {} differs from expected {}",
                                to_json(cfg).dump(), to_json(*expected).dump()));

  const std::size_t payload = header + manifest_len;
  if (bytes.size() - payload != 4 * count)
    throw LoadError(fmt::format("checkpoint payload has {} bytes, manifest declares {} parameters", bytes.size() - payload, count));

  std::vector<float> params(count);
  for (std::size_t i = 0; i < count; ++i)
    params[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(bytes, payload + 4 * i, 4)));
  try {
    return Network(cfg, std::move(params));
  } catch (const Error& e) {
    throw LoadError(fmt::format("checkpoint does not match its config: {}", e.what()));
  }
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(net);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path).concat(".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write checkpoint {}", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(fmt::format("short write to {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

inline Network load_checkpoint(const std::filesystem::path& path, const std::optional<NetworkConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(fmt::format("cannot open checkpoint {}", path.string()));
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes, expected);
  } catch (const LoadError& e) {
    throw LoadError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

/// FNV-1a 64 over the serialized checkpoint, as 16 hex digits.
inline std::string checkpoint_id(const Network& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_checkpoint(net)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace fsd
