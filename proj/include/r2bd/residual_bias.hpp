#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/bundle.hpp"
#include "r2bd/manifest.hpp"

/// Detection features from one inversion/reconstruction trajectory through a frozen bundle.
namespace r2bd {

enum class LatentBiasForm {
    /// |E(x) - E(x_recon) - delta_0|
    expanded,
    /// |E(x - x_recon) - delta_0|
    encoded_difference,
};

struct BiasOptions {
    int t_steps = 1;
    LatentBiasForm latent_form = LatentBiasForm::expanded;
};

struct ResidualBiasPair {
    Tensor delta_rgb;       // (3, H, W), >= 0
    Tensor delta_latent;    // (C, h, w), >= 0
    int t_steps = 0;
    Tensor measured_rgb;    // x - x_recon (signed)
    Tensor theoretical;     // delta_0 in latent space
};

struct MeasuredResidual {
    Tensor recon;
    Tensor delta_hat;
};

/// x_recon = D(z_0^R) after inverting E(x) for `t_steps` steps and sampling back; delta_hat = x - x_recon.
MeasuredResidual measured_residual(const Tensor& image, const ModelBundle& bundle, int t_steps);

ResidualBiasPair compute_residual_bias(const Tensor& image, const ModelBundle& bundle, const BiasOptions& opts = {});
/// Same computation over a batch (N, 3, H, W); per-image results are bitwise identical to the
/// single-image path.
std::vector<ResidualBiasPair> compute_residual_bias_batch(const Tensor& images, const ModelBundle& bundle,
                                                          const BiasOptions& opts = {});

/// One row of the bias index.
struct BiasIndexEntry {
    std::string id;
    std::string label;
    std::string generator_family;
    std::string method_name;
    std::string split;
    std::string bias_rgb_path;     // relative to the index directory
    std::string bias_latent_path;
    std::string residual_rgb_path;
    std::string status = "ok";     // "ok" or "error"
    std::string error;

    bool ok() const { return status == "ok"; }
    bool is_fake() const { return label == "fake"; }
};

void to_json(nlohmann::json& j, const BiasIndexEntry& e);
void from_json(const nlohmann::json& j, BiasIndexEntry& e);

struct BiasIndex {
    std::filesystem::path root;   // directory holding the index and arrays
    std::vector<BiasIndexEntry> entries;

    BiasIndex filter_split(const std::string& split) const;
    std::size_t size() const { return entries.size(); }
};

inline constexpr const char* kBiasIndexFile = "index.jsonl";

/// Computes features for every manifest entry (images resolved against `image_root`) and writes
/// float32 arrays plus `index.jsonl` into `out_dir`. Failing entries are kept in the index with
/// status "error". `workers` > 1 computes chunks concurrently; output is independent of it.
BiasIndex batch_compute_bias(const DatasetManifest& manifest, const std::filesystem::path& image_root,
                             const ModelBundle& bundle, const BiasOptions& opts, const std::filesystem::path& out_dir,
                             int workers = 1);

BiasIndex read_bias_index(const std::filesystem::path& dir);

}  // namespace r2bd
