#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <httplib.h>

#include "exameval/io.hpp"
#include "exameval/rng.hpp"

namespace exameval {

inline constexpr const char* kVersion = "0.1.0";

struct FileDigest {
    std::string path;
    std::string sha256;
};

inline FileDigest digest_file(const std::filesystem::path& p) { return {p.string(), sha256_hex(read_file(p))}; }

/// Run id from the digests of every input plus the config snapshot, so the
/// same inputs and settings always get the same id.
inline std::string derive_run_id(const std::vector<FileDigest>& inputs, const json& config) {
    std::string material = config.dump();
    for (const auto& d : inputs) material += "\n" + d.sha256;
    return "run-" + sha256_hex(material).substr(0, 16);
}

struct RunManifest {
    std::string run_id;
    std::string command;
    std::string started_at;
    std::string finished_at;
    json config = json::object();
    json seeds = json::object();
    std::vector<FileDigest> inputs;
    std::vector<FileDigest> outputs;
};

inline std::string now_iso8601() {
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(std::chrono::system_clock::now())));
}

inline json component_versions() {
    return {{"exameval", kVersion},
            {"rng", kRngAlgorithm},
            {"nlohmann_json", fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR, NLOHMANN_JSON_VERSION_MINOR,
                                          NLOHMANN_JSON_VERSION_PATCH)},
            {"cpp_httplib", CPPHTTPLIB_VERSION},
            {"fmt", FMT_VERSION}};
}

inline json to_json(const RunManifest& m) {
    auto files = [](const std::vector<FileDigest>& v) {
        json a = json::array();
        for (const auto& d : v) a.push_back({{"path", d.path}, {"sha256", d.sha256}});
        return a;
    };
    return {{"run_id", m.run_id},
            {"command", m.command},
            {"timestamps", {{"started_at", m.started_at}, {"finished_at", m.finished_at}}},
            {"config", m.config},
            {"seeds", m.seeds},
            {"versions", component_versions()},
            {"inputs", files(m.inputs)},
            {"outputs", files(m.outputs)}};
}

/// Writes `<output>.manifest.json` next to the primary output.
inline std::filesystem::path write_manifest(RunManifest m, const std::filesystem::path& primary_output) {
    m.finished_at = now_iso8601();
    const auto path = std::filesystem::path(primary_output.string() + ".manifest.json");
    write_file(path, to_json(m).dump(2) + "\n");
    return path;
}

}  // namespace exameval
