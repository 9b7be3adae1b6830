#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/models.hpp"
#include "r2bd/schedule.hpp"

/// Toy image generators standing in for the three forgery families.
namespace r2bd {

enum class ForgerFamily { gan, pixeldm, latentdm };

std::string to_string(ForgerFamily f);
ForgerFamily parse_forger_family(const std::string& s);

struct ForgerConfig {
    std::string method_name = "gan_a";
    ForgerFamily family = ForgerFamily::gan;
    std::uint64_t seed = 0;
    int train_steps = 300;
    int batch_size = 16;
    double learning_rate = 2e-4;
    int width = 8;
    /// GAN input noise dimension.
    int noise_dim = 32;
    /// GAN generator objective: "feature_matching" (match the critic's mean features on real
    /// images) or "nonsaturating" (-log D(G(z))).
    std::string gan_loss = "nonsaturating";
    /// Standard deviation of Gaussian noise added to every critic input, real and generated.
    double instance_noise = 0.1;
    /// DDIM steps used for sampling (diffusion families).
    int sample_steps = 20;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int T = 1000;
    /// Latent family: autoencoder pretraining steps and width.
    int vae_steps = 300;
    int vae_width = 8;
    /// Diffusion network target: "x0" (clean sample) or "eps" (added noise). Small undertrained
    /// x0 networks regress toward smooth means; eps networks leave amplified noise at large t.
    std::string prediction = "x0";
    /// Stop diffusion training early once the running loss drops below this value (0 disables).
    double loss_target = 0.0;
};

void to_json(nlohmann::json& j, const ForgerConfig& c);
void from_json(const nlohmann::json& j, ForgerConfig& c);

/// Upsampling convolutional generator: noise vector -> (3, S, S) image in [-1, 1].
class ImageGenerator {
public:
    ImageGenerator(int noise_dim, int width, int image_size, Rng* rng);
    ImageGenerator(const ImageGenerator& other);
    ImageGenerator(ImageGenerator&&) noexcept = default;
    ImageGenerator& operator=(ImageGenerator&&) noexcept = default;

    Var forward(const Var& noise) const;
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    int noise_dim() const { return noise_dim_; }

private:
    int noise_dim_, width_, image_size_;
    nn::ParamSet params_;
    nn::Linear fc_;
    nn::Conv2d c1_, c2_, c3_, out_;
};

/// Strided convolutional critic over (3, S, S) images.
class ImageCritic {
public:
    ImageCritic(int width, int image_size, Rng* rng);
    Var forward(const Var& images) const;
    /// Flattened activations feeding the final linear layer, (N, F).
    Var features(const Var& images) const;
    nn::ParamSet& params() { return params_; }

private:
    nn::ParamSet params_;
    nn::Conv2d c1_, c2_, c3_;
    nn::Linear head_;
};

/// Trained forger of one method.
class Forger {
public:
    Forger(ForgerConfig cfg, int image_size);

    const ForgerConfig& config() const { return cfg_; }
    /// Draws `n` images (n, 3, S, S); image k uses the noise stream derive_seed(seed, first_index + k),
    /// so results do not depend on how a request is chunked.
    Tensor sample(int n, std::uint64_t seed, std::uint64_t first_index = 0) const;

    void save(const std::filesystem::path& path) const;
    static Forger load(const std::filesystem::path& path);

    std::optional<ImageGenerator> generator;
    std::optional<NoisePredictor> predictor;
    std::optional<Vae> vae;
    int image_size;

private:
    ForgerConfig cfg_;
};

struct ForgerTrainLog {
    std::vector<double> losses;
};

/// Trains a forger of `cfg.family` on real images (N, 3, S, S).
Forger train_forger(const ForgerConfig& cfg, const Tensor& real_images, ForgerTrainLog* log = nullptr);

}  // namespace r2bd
