#pragma once

// Plain-text key-value configuration.
//
// Format, one entry per line:
//     key = value
// '#' starts a comment anywhere on a line. Keys may carry bracket indices
// (e.g. "transition[2][0]") for table rows. Values are free text; numeric
// getters split on whitespace. Later assignments to the same key win.

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace optionkit {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}
}  // namespace detail

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig from_string(const std::string& text, const std::string& origin = "<string>") {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string t = detail::trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = detail::trim(t.substr(0, eq));
            const std::string val = detail::trim(t.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.set(key, val);
        }
        return cfg;
    }

    static KeyValueConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return from_string(ss.str(), path);
    }

    bool has(const std::string& key) const { return map_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) {
        if (!map_.count(key)) order_.push_back(key);
        map_[key] = value;
    }

    const std::string& get_string(const std::string& key) const {
        auto it = map_.find(key);
        if (it == map_.end()) throw ConfigError("missing config key: " + key);
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = map_.find(key);
        return it == map_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key) const { return parse_double(key, get_string(key)); }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    int get_int(const std::string& key) const {
        const double d = get_double(key);
        const int i = static_cast<int>(d);
        if (static_cast<double>(i) != d) throw ConfigError("config key is not an integer: " + key);
        return i;
    }
    int get_int(const std::string& key, int fallback) const {
        return has(key) ? get_int(key) : fallback;
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get_string(key);
        if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "off" || v == "no") return false;
        throw ConfigError("config key is not a boolean: " + key);
    }
    bool get_bool(const std::string& key, bool fallback) const {
        return has(key) ? get_bool(key) : fallback;
    }

    std::vector<double> get_vector(const std::string& key) const {
        std::string raw = get_string(key);
        std::replace(raw.begin(), raw.end(), ',', ' ');  // "0,1" and "0, 1" both work
        std::istringstream in(raw);
        std::vector<double> out;
        std::string tok;
        while (in >> tok) out.push_back(parse_double(key, tok));
        if (out.empty()) throw ConfigError("config key holds no numbers: " + key);
        return out;
    }

    std::vector<int> get_int_vector(const std::string& key) const {
        std::vector<int> out;
        for (double d : get_vector(key)) {
            const int i = static_cast<int>(d);
            if (static_cast<double>(i) != d)
                throw ConfigError("config key is not an integer list: " + key);
            out.push_back(i);
        }
        return out;
    }

    /// Keys in first-assignment order (stable dumps).
    const std::vector<std::string>& keys() const { return order_; }

    std::string to_string() const {
        std::ostringstream out;
        for (const auto& k : order_) out << k << " = " << map_.at(k) << "\n";
        return out.str();
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ConfigError("cannot write config file: " + path);
        out << to_string();
    }

private:
    static double parse_double(const std::string& key, const std::string& text) {
        try {
            std::size_t pos = 0;
            const double d = std::stod(text, &pos);
            if (pos != text.size()) throw std::invalid_argument(text);
            return d;
        } catch (const std::exception&) {
            throw ConfigError("config key is not numeric: " + key + " = '" + text + "'");
        }
    }

    std::map<std::string, std::string> map_;
    std::vector<std::string> order_;
};

}  // namespace optionkit
