#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stereoworld/tensor.hpp"

namespace stw {

using Json = nlohmann::ordered_json;

// Shared dataset manifest. scenegen and datapipe both emit it; the trainer
// and evaluator consume it. Every referenced file is relative to the
// manifest's directory.
struct ClipEntry {
    std::string id;
    uint64_t seed = 0;
    std::map<std::string, std::string> files;                // role -> relative path
    std::map<std::string, std::vector<int64_t>> shapes;      // role -> dims
    std::map<std::string, std::string> space;                // e.g. disp -> "pixel"
    double d_max = 0.0;
};

struct Manifest {
    int schema_version = 1;
    std::vector<ClipEntry> clips;

    Json to_json() const {
        Json j;
        j["schema_version"] = schema_version;
        j["clips"] = Json::array();
        for (const auto& c : clips) {
            Json e;
            e["id"] = c.id;
            e["seed"] = c.seed;
            e["files"] = c.files;
            e["shapes"] = c.shapes;
            e["space"] = c.space;
            e["d_max"] = c.d_max;
            j["clips"].push_back(e);
        }
        return j;
    }

    static Manifest from_json(const Json& j) {
        Manifest m;
        m.schema_version = j.at("schema_version").get<int>();
        for (const auto& e : j.at("clips")) {
            ClipEntry c;
            c.id = e.at("id").get<std::string>();
            c.seed = e.at("seed").get<uint64_t>();
            c.files = e.at("files").get<std::map<std::string, std::string>>();
            c.shapes = e.at("shapes").get<std::map<std::string, std::vector<int64_t>>>();
            if (e.contains("space"))
                c.space = e.at("space").get<std::map<std::string, std::string>>();
            if (e.contains("d_max")) c.d_max = e.at("d_max").get<double>();
            m.clips.push_back(std::move(c));
        }
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw std::runtime_error("manifest: cannot open for write: " + path);
        f << to_json().dump(2) << "\n";
        if (!f) throw std::runtime_error("manifest: write failed: " + path);
    }

    static Manifest load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("manifest: cannot open for read: " + path);
        Json j;
        f >> j;
        return from_json(j);
    }

    const ClipEntry& find(const std::string& id) const {
        for (const auto& c : clips)
            if (c.id == id) return c;
        throw std::invalid_argument("manifest: no clip with id '" + id + "'");
    }
};

inline std::string dir_of(const std::string& path) {
    const auto pos = path.find_last_of('/');
    return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

}  // namespace stw
