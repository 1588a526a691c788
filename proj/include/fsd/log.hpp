#pragma once

#include <cstdlib>
#include <memory>
#include <string_view>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

namespace fsd {

/// Shared stderr logger. Level comes from FSD_LOG={error,info,debug}; default info.
inline spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = std::make_shared<spdlog::logger>("fsd", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    l->set_pattern("[%H:%M:%S.%e] [%l] %v");
    spdlog::level::level_enum level = spdlog::level::info;
    if (const char* env = std::getenv("FSD_LOG")) {
      std::string_view v(env);
      if (v == "error") level = spdlog::level::err;
      else if (v == "debug") level = spdlog::level::debug;
      else if (v == "warn") level = spdlog::level::warn;
    }
    l->set_level(level);
    return l;
  }();
  return *logger;
}

}  // namespace fsd
