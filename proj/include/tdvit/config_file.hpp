#pragma once

// Flat `key = value` configuration files. `#` starts a comment; blank lines
// are skipped. Keys are later matched against command-line flag names.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdvit {

struct ConfigEntry {
    std::string key;
    std::string value;
    std::size_t line;
};

class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<ConfigEntry> parse_config(std::istream& in, const std::string& source) {
    std::vector<ConfigEntry> out;
    std::string raw;
    for (std::size_t line = 1; std::getline(in, raw); ++line) {
        const std::string text = detail::trim(raw.substr(0, raw.find('#')));
        if (text.empty()) continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(source + ":" + std::to_string(line) + ": expected key=value");
        }
        ConfigEntry e{detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)), line};
        if (e.key.empty()) throw ConfigError(source + ":" + std::to_string(line) + ": empty key");
        for (const auto& prev : out) {
            if (prev.key == e.key) throw ConfigError(source + ":" + std::to_string(line) + ": duplicate key '" + e.key + "'");
        }
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<ConfigEntry> read_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse_config(in, path);
}

}  // namespace tdvit
