// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat `key = value` configuration with dotted section prefixes
// (model.d_text = 16). '#' starts a comment. Later keys override earlier ones.

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dykenhyena/errors.hpp"

namespace dkh {

namespace detail {
inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}
}  // namespace detail

/// Formats a double so that parsing the text returns the same bits.
inline std::string format_double(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

class Config {
public:
    Config() = default;

    static Config parse(const std::string& text) {
        Config c;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
            const std::string t = detail::trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = detail::trim(std::string_view(t).substr(0, eq));
            if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
            c.values_[key] = detail::trim(std::string_view(t).substr(eq + 1));
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    /// Sorted `key=value` lines.
    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    void set(const std::string& key, double value) { values_[key] = format_double(value); }
    void set(const std::string& key, long long value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, std::size_t value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

    void merge(const Config& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get_string(const std::string& key, const std::string& def) const {
        auto it = values_.find(key);
        return it == values_.end() ? def : it->second;
    }

    double get_double(const std::string& key, double def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        const std::string& s = it->second;
        if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw ConfigError(key + ": '" + s + "' is not a number");
        return v;
    }

    long long get_int(const std::string& key, long long def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        const std::string& s = it->second;
        long long v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw ConfigError(key + ": '" + s + "' is not an integer");
        return v;
    }

    std::size_t get_size(const std::string& key, std::size_t def) const {
        const long long v = get_int(key, static_cast<long long>(def));
        if (v < 0) throw ConfigError(key + " must be non-negative");
        return static_cast<std::size_t>(v);
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        const std::string& s = it->second;
        std::uint64_t v = 0;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw ConfigError(key + ": '" + s + "' is not an unsigned integer");
        return v;
    }

    bool get_bool(const std::string& key, bool def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError(key + ": '" + it->second + "' is not a boolean");
    }

    std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        return split_list(it->second);
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream in(s);
        while (std::getline(in, cur, ',')) {
            auto t = detail::trim(cur);
            if (!t.empty()) out.push_back(t);
        }
        return out;
    }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace dkh
