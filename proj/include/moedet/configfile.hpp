#pragma once

// Flat key=value configuration files: one pair per line, '#' comments,
// whitespace-trimmed keys and values. Typed getters convert on access and
// remember which keys were read, so callers can reject typos wholesale.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "moedet/error.hpp"
#include "moedet/serial.hpp"

namespace moedet {

class ConfigMap {
  public:
    ConfigMap() = default;

    static ConfigMap parse(const std::string& text) {
        ConfigMap cfg;
        size_t line_no = 0, pos = 0;
        while (pos <= text.size()) {
            const size_t eol = text.find('\n', pos);
            std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
            pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
            ++line_no;

            // A '#' opens a comment at line start or after whitespace; that
            // keeps '#' inside values (paths, say) intact.
            for (size_t i = 0; i < line.size(); ++i)
                if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
                    line.resize(i);
                    break;
                }
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw config_error("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                                   trimmed + "'");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty()) throw config_error("config line " + std::to_string(line_no) + ": empty key");
            if (cfg.values_.count(key))
                throw config_error("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static ConfigMap load(const std::string& path) {
        const auto bytes = read_file(path);
        return parse(std::string(bytes.begin(), bytes.end()));
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        return it->second;
    }

    int get_int(const std::string& key, int def) const {
        return static_cast<int>(get_ll(key, def, -2147483648LL, 2147483647LL));
    }

    uint64_t get_u64(const std::string& key, uint64_t def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        try {
            // stoull wraps negative input around instead of failing.
            if (!it->second.empty() && it->second[0] == '-') throw std::invalid_argument("");
            size_t used = 0;
            const uint64_t v = std::stoull(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("config key '" + key + "': expected an unsigned integer, got '" + it->second + "'");
        }
    }

    double get_double(const std::string& key, double def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        try {
            size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("config key '" + key + "': expected a number, got '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool def) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw config_error("config key '" + key + "': expected a boolean, got '" + v + "'");
    }

    // Keys present in the file but never read by any getter; a non-empty
    // result after building a run configuration means a typo.
    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!touched_.count(k)) out.push_back(k);
        return out;
    }

  private:
    static std::string trim(const std::string& s) {
        size_t a = 0, b = s.size();
        while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
        while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
        return s.substr(a, b - a);
    }

    long long get_ll(const std::string& key, long long def, long long lo, long long hi) const {
        auto it = values_.find(key);
        if (it == values_.end()) return def;
        touched_.insert(key);
        try {
            size_t used = 0;
            const long long v = std::stoll(it->second, &used);
            if (used != it->second.size() || v < lo || v > hi) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("config key '" + key + "': expected an integer, got '" + it->second + "'");
        }
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> touched_;
};

}  // namespace moedet
