#pragma once

// Process-wide logging. Backed by spdlog in a translation unit that does not
// see the torch headers (torch bundles an incompatible fmt).

#include <string_view>

namespace mmfa::log {

enum class Level { kDebug, kInfo, kWarn, kError, kOff };

void set_level(Level level);
// Parses "debug", "info", "warn", "error", "off".
Level parse_level(std::string_view name);

void debug(std::string_view message);
void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace mmfa::log
