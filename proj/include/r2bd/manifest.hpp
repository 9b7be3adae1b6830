#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace r2bd {

/// One image of the corpus. `path` is relative to the manifest's root directory.
struct ManifestEntry {
    std::string id;
    std::string path;
    std::string label;             // "real" or "fake"
    std::string generator_family;  // "none", "gan", "pixeldm", "latentdm"
    std::string method_name;
    std::string split;             // "train", "in_test", "cross_test" (empty before splitting)
    std::string hash;

    bool is_fake() const { return label == "fake"; }
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    /// Entries of one split, in manifest order.
    DatasetManifest filter_split(const std::string& split) const;
    DatasetManifest filter(const std::function<bool(const ManifestEntry&)>& keep) const;
    std::size_t size() const { return entries.size(); }
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);

/// Throws ValidationError on duplicate ids, unknown labels/families/splits, or real entries with a
/// generator family other than "none".
void validate_manifest(const DatasetManifest& m);

/// Newline-delimited JSON records, one entry per line.
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Reads a newline-delimited JSON file into records; blank lines are skipped.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::vector<nlohmann::json>& records, const std::filesystem::path& path);

}  // namespace r2bd
