#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "stereoworld/tensor.hpp"

namespace stw::config {

// Flat key=value configuration with '#' comments. Every run echoes the fully
// resolved set (sorted) to stdout and into its run directory, so any
// experiment is reproducible from the echo plus the seed.
class Config {
public:
    static Config parse(std::istream& in) {
        Config c;
        std::string line;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            c.kv_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open " + path);
        return parse(f);
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    std::string get_str(const std::string& key, const std::string& dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) {
            kv_[key] = dflt;
            return dflt;
        }
        return it->second;
    }

    double get_f64(const std::string& key, double dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) {
            kv_[key] = format(dflt);
            return dflt;
        }
        try {
            return std::stod(it->second);
        } catch (...) {
            throw std::invalid_argument("config: bad number for key '" + key + "': " + it->second);
        }
    }

    int64_t get_i64(const std::string& key, int64_t dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) {
            kv_[key] = std::to_string(dflt);
            return dflt;
        }
        try {
            return std::stoll(it->second);
        } catch (...) {
            throw std::invalid_argument("config: bad integer for key '" + key + "': " + it->second);
        }
    }

    uint64_t get_u64(const std::string& key, uint64_t dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) {
            kv_[key] = std::to_string(dflt);
            return dflt;
        }
        return std::stoull(it->second);
    }

    bool get_bool(const std::string& key, bool dflt) {
        auto it = kv_.find(key);
        if (it == kv_.end()) {
            kv_[key] = dflt ? "true" : "false";
            return dflt;
        }
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw std::invalid_argument("config: bad boolean for key '" + key + "': " + v);
    }

    // Sorted key=value dump (std::map keeps keys ordered).
    std::string echo() const {
        std::ostringstream os;
        for (const auto& [k, v] : kv_) os << k << "=" << v << "\n";
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw std::runtime_error("config: cannot write " + path);
        f << echo();
    }

private:
    static std::string trim(std::string s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static std::string format(double v) {
        std::ostringstream os;
        os << v;
        return os.str();
    }

    std::map<std::string, std::string> kv_;
};

}  // namespace stw::config
