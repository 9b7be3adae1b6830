#pragma once

#include <filesystem>
#include <optional>

#include "json.hpp"
#include "r2bd/models.hpp"
#include "r2bd/schedule.hpp"

namespace r2bd {

/// Frozen reconstruction stack: autoencoder, noise predictor, optional critic, and the schedule
/// parameters they were trained with.
struct ModelBundle {
    Vae vae;
    NoisePredictor predictor;
    std::optional<Discriminator> discriminator;
    int T = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    /// Resolved configuration echoed into the checkpoint.
    nlohmann::json config = nlohmann::json::object();

    NoiseSchedule schedule() const { return build_linear_schedule(T, beta_start, beta_end); }
    /// Noise prediction with the null condition; accepts (C, h, w) or a batch (N, C, h, w).
    NoiseFn noise_fn() const;
    /// Bitwise comparison of every parameter and the latent scale.
    bool bitwise_equal(const ModelBundle& other) const;
};

inline constexpr const char* kBundleKind = "gldm_bundle";

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path);
ModelBundle load_bundle(const std::filesystem::path& path);

}  // namespace r2bd
