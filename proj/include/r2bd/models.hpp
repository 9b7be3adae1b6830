#pragma once

#include <optional>
#include <span>

#include "json.hpp"
#include "r2bd/checkpoint.hpp"
#include "r2bd/nn.hpp"

/// Small convolutional networks shared by the reconstruction model and the toy forgers.
/// Every model owns its ParamSet; copies are deep (the copy re-registers parameters and copies
/// their values), so two copies never alias parameter storage.
namespace r2bd {

using ag::Var;

struct VaeConfig {
    int image_channels = 3;
    int latent_channels = 4;
    int width = 8;
};

/// Convolutional autoencoder (3, H, W) <-> (C_lat, H/4, W/4) with a Gaussian encoder head.
class Vae {
public:
    explicit Vae(VaeConfig cfg = {}, Rng* rng = nullptr);
    Vae(const Vae& other);
    Vae& operator=(const Vae& other);
    Vae(Vae&&) noexcept = default;
    Vae& operator=(Vae&&) noexcept = default;

    struct Posterior {
        Var mean;
        Var logvar;
    };
    /// Batched encoder head on unscaled latents.
    Posterior encode_posterior(const Var& images) const;
    /// Batched decoder on unscaled latents; output is not clamped.
    Var decode_raw(const Var& latents) const;

    /// Deterministic scaled latent of one (3, H, W) image: mean * latent_scale.
    Tensor encode(const Tensor& image) const;
    /// Decodes one scaled latent; output clamped to [-1, 1].
    Tensor decode(const Tensor& latent) const;
    /// Batched versions over a leading dimension.
    Tensor encode_batch(const Tensor& images) const;
    Tensor decode_batch(const Tensor& latents) const;

    Shape latent_shape(int height, int width) const {
        return {cfg_.latent_channels, height / 4, width / 4};
    }

    const VaeConfig& config() const { return cfg_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }

    double latent_scale = 1.0;

    void save_to(Checkpoint& ckpt, const std::string& prefix) const;
    static Vae load_from(const Checkpoint& ckpt, const std::string& prefix, const VaeConfig& cfg);

private:
    void build(Rng* rng);

    VaeConfig cfg_;
    nn::ParamSet params_;
    nn::Conv2d enc1_, enc2_, enc3_, enc_head_;
    nn::Conv2d dec1_, dec2_, dec3_, dec_out_;
};

struct UNetConfig {
    int channels = 4;   // input/output channels
    int width = 16;
    int cond_dim = 0;   // 0 means unconditional
    int time_dim = 32;
};

/// Sinusoidal embedding of 1-based step indices: (N, dim).
Tensor step_embedding(std::span<const int> steps, int dim);

/// U-shaped noise predictor eps(z_t, t, c) with one down/up level and a skip connection.
class NoisePredictor {
public:
    explicit NoisePredictor(UNetConfig cfg = {}, Rng* rng = nullptr);
    NoisePredictor(const NoisePredictor& other);
    NoisePredictor& operator=(const NoisePredictor& other);
    NoisePredictor(NoisePredictor&&) noexcept = default;
    NoisePredictor& operator=(NoisePredictor&&) noexcept = default;

    /// z: (N, C, H, W); steps: N step indices; cond: (N, cond_dim) or nullopt (null condition).
    Var forward(const Var& z, std::span<const int> steps, const std::optional<Tensor>& cond = std::nullopt) const;
    /// Single-latent convenience: (C, H, W) -> (C, H, W), no graph recorded.
    Tensor predict(const Tensor& latent, int step, const Tensor* cond = nullptr) const;

    const UNetConfig& config() const { return cfg_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }

    void save_to(Checkpoint& ckpt, const std::string& prefix) const;
    static NoisePredictor load_from(const Checkpoint& ckpt, const std::string& prefix, const UNetConfig& cfg);

private:
    void build(Rng* rng);

    UNetConfig cfg_;
    nn::ParamSet params_;
    nn::Linear time1_, time2_;
    std::optional<nn::Linear> cond_;
    nn::Conv2d conv_in_, conv_down_, conv_mid_, conv_up_, conv_out_;
};

struct CriticConfig {
    int channels = 4;
    int height = 8;
    int width = 8;
    int hidden = 16;
};

/// Convolutional critic mapping a latent batch (N, C, H, W) to logits (N, 1).
class Discriminator {
public:
    explicit Discriminator(CriticConfig cfg = {}, Rng* rng = nullptr);
    Discriminator(const Discriminator& other);
    Discriminator& operator=(const Discriminator& other);
    Discriminator(Discriminator&&) noexcept = default;
    Discriminator& operator=(Discriminator&&) noexcept = default;

    Var forward(const Var& z) const;

    const CriticConfig& config() const { return cfg_; }
    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }

    void save_to(Checkpoint& ckpt, const std::string& prefix) const;
    static Discriminator load_from(const Checkpoint& ckpt, const std::string& prefix, const CriticConfig& cfg);

private:
    void build(Rng* rng);

    CriticConfig cfg_;
    nn::ParamSet params_;
    nn::Conv2d conv1_, conv2_;
    nn::Linear head_;
};

/// Writes every parameter of `ps` into `ckpt` as `prefix.name`.
void save_params(const nn::ParamSet& ps, Checkpoint& ckpt, const std::string& prefix);
/// Loads parameters written by save_params; names and shapes must match.
void load_params(nn::ParamSet& ps, const Checkpoint& ckpt, const std::string& prefix);

void to_json(nlohmann::json& j, const VaeConfig& c);
void from_json(const nlohmann::json& j, VaeConfig& c);
void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);
void to_json(nlohmann::json& j, const CriticConfig& c);
void from_json(const nlohmann::json& j, CriticConfig& c);

}  // namespace r2bd
