#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pointsplat {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key=value text config. One pair per line; '#' starts a comment.
class KeyValues {
public:
    static KeyValues parse(const std::string& text) {
        KeyValues kv;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            size_t hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            size_t a = line.find_first_not_of(" \t");
            if (a == std::string::npos) continue;
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
            auto trim = [](std::string s) {
                size_t b = s.find_first_not_of(" \t");
                size_t e = s.find_last_not_of(" \t");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            std::string key = trim(line.substr(0, eq));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            kv.values_[key] = trim(line.substr(eq + 1));
        }
        return kv;
    }

    static KeyValues parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }
    double get_double(const std::string& key, double dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            size_t pos = 0;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
        }
    }
    long long get_int(const std::string& key, long long dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            size_t pos = 0;
            long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw ConfigError("config key '" + key + "': '" + it->second + "' is not an integer");
        }
    }
    bool get_bool(const std::string& key, bool dflt) const {
        auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        if (it->second == "1" || it->second == "true") return true;
        if (it->second == "0" || it->second == "false") return false;
        throw ConfigError("config key '" + key + "': expected a boolean");
    }

    void set(const std::string& key, const std::string& v) { values_[key] = v; }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
        return os.str();
    }

    const std::map<std::string, std::string>& items() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace pointsplat
