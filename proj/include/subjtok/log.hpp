#pragma once

#include <cstdarg>

namespace subjtok {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, quiet = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();
void log_printf(LogLevel level, const char* file, int line, const char* format, ...)
    __attribute__((format(printf, 4, 5)));

}  // namespace subjtok

#define LOG_DEBUG(...) ::subjtok::log_printf(::subjtok::LogLevel::debug, __FILE__, __LINE__, __VA_ARGS__)
#define LOG_INFO(...) ::subjtok::log_printf(::subjtok::LogLevel::info, __FILE__, __LINE__, __VA_ARGS__)
#define LOG_WARN(...) ::subjtok::log_printf(::subjtok::LogLevel::warn, __FILE__, __LINE__, __VA_ARGS__)
#define LOG_ERROR(...) ::subjtok::log_printf(::subjtok::LogLevel::error, __FILE__, __LINE__, __VA_ARGS__)
