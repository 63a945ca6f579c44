#pragma once

// Flat `key = value` configuration text. '#' starts a comment.

#include <filesystem>
#include <map>
#include <string>

namespace sasan::io {

using KeyValues = std::map<std::string, std::string>;

/// Throws ConfigError on malformed lines or repeated keys.
KeyValues parse_key_values(const std::string& text);
KeyValues load_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

}  // namespace sasan::io
