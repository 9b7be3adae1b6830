#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/data_synth.hpp"
#include "r2bd/detector.hpp"
#include "r2bd/gldm.hpp"
#include "r2bd/metrics.hpp"
#include "r2bd/perturb.hpp"

/// Hierarchical run configuration shared by every subcommand.
namespace r2bd {

struct PretrainConfig {
    VaeConfig vae;
    VaeTrainConfig vae_train;
    /// Pretraining fails when the mean absolute round-trip error on training images exceeds this.
    double max_reconstruction_error = 0.15;
    UNetConfig predictor;
    DiffusionTrainConfig diffusion;
};

struct EvalConfig {
    double in_test_base_rate = kInDatasetBaseRate;
    double cross_test_base_rate = kCrossDatasetBaseRate;
    std::optional<double> threshold;
    /// "kind:level" cells evaluated on in_test after the clean reports; "all" expands to the full ladder.
    std::vector<std::string> perturbations;
    PerturbationLevels levels;
    /// Caps the images per class used for perturbed cells (0 = all of in_test).
    int perturb_max_per_class = 0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_root = "runs/default";
    int workers = 1;
    CorpusConfig corpus;
    PretrainConfig pretrain;
    GldmConfig gldm;
    BiasOptions bias;
    DetectorConfig detector;
    EvalConfig evaluate;

    /// The resolved document this config was built from.
    nlohmann::json resolved;
};

/// Every key with its default value. Per-module seeds are not keys: they derive from `seed`.
nlohmann::json default_config_json();

/// Throws ValidationError naming the first key of `doc` that has no counterpart in the defaults.
void check_known_keys(const nlohmann::json& doc, const nlohmann::json& defaults, const std::string& path = "");

/// Parses "a.b.c=value"; the value is read as JSON when it parses, otherwise as a string.
std::pair<std::string, nlohmann::json> parse_override(const std::string& text);

struct ConfigSources {
    std::optional<std::filesystem::path> file;
    /// Applied in order after the file.
    std::vector<std::pair<std::string, nlohmann::json>> overrides;
};

/// defaults <- config file <- R2BD_OUTPUT_ROOT <- overrides (later wins). Validates the result.
RunConfig resolve_config(const ConfigSources& sources);
/// Builds typed sections from an already merged document.
RunConfig config_from_json(const nlohmann::json& doc);

/// Stable FNV-1a hash (hex) of a JSON value's compact dump.
std::string json_hash(const nlohmann::json& value);

/// Output root with relative paths taken from the current directory.
std::filesystem::path output_root(const RunConfig& cfg);
/// `p` if absolute, otherwise relative to the output root.
std::filesystem::path resolve_path(const RunConfig& cfg, const std::filesystem::path& p);

}  // namespace r2bd
