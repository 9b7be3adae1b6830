#include "r2bd/manifest.hpp"

#include <fstream>
#include <set>

#include "r2bd/error.hpp"

namespace r2bd {

DatasetManifest DatasetManifest::filter_split(const std::string& split) const {
    return filter([&](const ManifestEntry& e) { return e.split == split; });
}

DatasetManifest DatasetManifest::filter(const std::function<bool(const ManifestEntry&)>& keep) const {
    DatasetManifest out;
    for (const auto& e : entries)
        if (keep(e)) out.entries.push_back(e);
    return out;
}

void to_json(nlohmann::json& j, const ManifestEntry& e) {
    j = {{"id", e.id},
         {"path", e.path},
         {"label", e.label},
         {"generator_family", e.generator_family},
         {"method_name", e.method_name},
         {"split", e.split},
         {"hash", e.hash}};
}

void from_json(const nlohmann::json& j, ManifestEntry& e) {
    e.id = j.at("id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    e.label = j.at("label").get<std::string>();
    e.generator_family = j.at("generator_family").get<std::string>();
    e.method_name = j.value("method_name", std::string());
    e.split = j.value("split", std::string());
    e.hash = j.value("hash", std::string());
}

void validate_manifest(const DatasetManifest& m) {
    static const std::set<std::string> families = {"none", "gan", "pixeldm", "latentdm"};
    static const std::set<std::string> splits = {"", "train", "in_test", "cross_test"};
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
        require(!e.id.empty(), "manifest entry without id");
        require(ids.insert(e.id).second, "duplicate manifest id '" + e.id + "'");
        require(e.label == "real" || e.label == "fake", "entry '" + e.id + "' has label '" + e.label + "'");
        require(families.count(e.generator_family) == 1,
                "entry '" + e.id + "' has unknown generator family '" + e.generator_family + "'");
        require(e.label == "fake" || e.generator_family == "none",
                "real entry '" + e.id + "' must have generator family 'none'");
        require(e.label == "real" || e.generator_family != "none",
                "fake entry '" + e.id + "' needs a generator family");
        require(splits.count(e.split) == 1, "entry '" + e.id + "' has unknown split '" + e.split + "'");
    }
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot open " + path.string());
    std::vector<nlohmann::json> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_jsonl(const std::vector<nlohmann::json>& records, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "cannot write " + path.string());
    for (const auto& r : records) out << r.dump() << '\n';
    require(static_cast<bool>(out), "write failed for " + path.string());
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    validate_manifest(m);
    std::vector<nlohmann::json> records;
    records.reserve(m.entries.size());
    for (const auto& e : m.entries) records.emplace_back(e);
    write_jsonl(records, path);
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    DatasetManifest m;
    for (const auto& j : read_jsonl(path)) {
        try {
            m.entries.push_back(j.get<ManifestEntry>());
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("malformed manifest record in " + path.string() + ": " + e.what());
        }
    }
    validate_manifest(m);
    return m;
}

}  // namespace r2bd
