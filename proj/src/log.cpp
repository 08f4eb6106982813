#include "subjtok/log.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace subjtok {

namespace {

LogLevel level_from_env() {
  const char* env = std::getenv("SUBJTOK_LOG");
  if (env == nullptr) return LogLevel::info;
  if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
  if (std::strcmp(env, "warn") == 0) return LogLevel::warn;
  if (std::strcmp(env, "error") == 0) return LogLevel::error;
  if (std::strcmp(env, "quiet") == 0) return LogLevel::quiet;
  return LogLevel::info;
}

std::atomic<LogLevel> g_level{level_from_env()};
std::mutex g_mutex;

}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_printf(LogLevel level, const char* file, int line, const char* format, ...) {
  if (level < g_level.load()) return;
  static constexpr const char* kTags[] = {"DEBUG", "INFO ", "WARN ", "ERROR"};
  char msg[2048];
  va_list args;
  va_start(args, format);
  std::vsnprintf(msg, sizeof msg, format, args);
  va_end(args);
  const char* base = std::strrchr(file, '/');
  std::lock_guard lock(g_mutex);
  std::fprintf(stderr, "[%s] %s:%d - %s\n", kTags[static_cast<int>(level)], base ? base + 1 : file, line, msg);
}

}  // namespace subjtok
