#pragma once

#include <string>
#include <utility>
#include <vector>

namespace duplex {

/// Parses `key = value` lines, preserving declaration order. Blank lines and
/// `#` comments are skipped. Throws ConfigError on malformed lines.
std::vector<std::pair<std::string, std::string>> parse_kv_text(
    const std::string& text);

std::vector<std::pair<std::string, std::string>> load_kv_file(
    const std::string& path);

}  // namespace duplex
