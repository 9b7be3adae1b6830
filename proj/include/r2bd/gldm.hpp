#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "r2bd/models.hpp"
#include "r2bd/schedule.hpp"

/// Diffusion + adversarial fine-tuning of the latent noise predictor. The predictor acts as a
/// generator over one-shot denoised latents; a latent critic is trained against encoded real images.
namespace r2bd {

struct GldmConfig {
    int gen_iters_per_cycle = 300;
    int disc_iters_per_cycle = 5;
    int epochs = 10;
    double learning_rate = 5e-5;
    double gp_lambda = 10.0;
    int T = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    std::uint64_t seed = 0;
    int batch_size = 16;
    /// When false (or when disc_iters_per_cycle is 0) training is plain diffusion fine-tuning.
    bool adversarial = true;
    /// Switches both adversarial losses to the Wasserstein critic form.
    bool wasserstein = false;
    double adversarial_weight = 1.0;
    /// Probability of replacing a conditioning vector with the null condition during training.
    double cond_dropout = 0.1;
    /// Step used for the central-difference Hessian-vector product in the penalty gradient.
    double gp_fd_step = 1e-4;
};

void to_json(nlohmann::json& j, const GldmConfig& c);
void from_json(const nlohmann::json& j, GldmConfig& c);
/// Throws ValidationError for non-positive sizes, rates, or an invalid schedule range.
void validate_gldm_config(const GldmConfig& c);

/// Per-sample coefficient broadcast over the trailing dimensions of `shape`.
Tensor broadcast_rows(const Shape& shape, const std::vector<double>& coef);

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise, per batch row.
Tensor diffuse(const Tensor& z0, std::span<const int> steps, const Tensor& noise, const NoiseSchedule& sched);
/// One-shot denoised estimate (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t), per batch row.
Var denoised_estimate(const Tensor& z_t, const Var& eps, std::span<const int> steps, const NoiseSchedule& sched);

/// Mean squared error between sampled and predicted noise.
Var noise_prediction_loss(const Var& eps_pred, const Tensor& noise);
/// Diffusion objective for a batch z0 (N, C, h, w) at the given steps.
Var diffusion_loss(const NoisePredictor& pred, const Tensor& z0, std::span<const int> steps, const Tensor& noise,
                   const std::optional<Tensor>& cond, const NoiseSchedule& sched);

/// Generator objective: mean -log sigmoid(D(z0_hat)) (or -mean D(z0_hat) in Wasserstein form).
Var generator_adversarial_loss(const Var& z0_hat, const Discriminator& disc, bool wasserstein = false);

/// Two-term critic objective without the gradient penalty:
/// mean[-log sigmoid(D(real))] + mean[-log(1 - sigmoid(D(fake)))], or mean D(fake) - mean D(real).
Var critic_adversarial_loss(const Discriminator& disc, const Tensor& z_real, const Tensor& z_fake, bool wasserstein = false);

/// u = w * real + (1 - w) * fake with one weight per batch row.
Tensor interpolate_rows(const Tensor& z_real, const Tensor& z_fake, const std::vector<double>& weights);
/// Gradients of D with respect to each input row: same shape as `u`.
Tensor critic_input_gradients(const Discriminator& disc, const Tensor& u);
/// mean_i gp_lambda * (||grad_u D(u_i)|| - 1)^2
double gradient_penalty(const Discriminator& disc, const Tensor& u, double gp_lambda);

struct CriticLoss {
    double adversarial = 0.0;
    double penalty = 0.0;
    double total() const { return adversarial + penalty; }
};

/// Full critic loss, penalty evaluated at interpolates with the given weights.
CriticLoss discriminator_loss(const Discriminator& disc, const Tensor& z_real, const Tensor& z_fake,
                              const std::vector<double>& interp_weights, double gp_lambda, bool wasserstein = false);
/// Evaluates the critic loss and accumulates its parameter gradient into `disc`. The penalty's
/// parameter gradient uses a central difference of parameter gradients along each normalized input
/// gradient direction (a Hessian-vector product); the adversarial part is exact.
CriticLoss discriminator_backward(Discriminator& disc, const Tensor& z_real, const Tensor& z_fake,
                                  const std::vector<double>& interp_weights, double gp_lambda, bool wasserstein,
                                  double fd_step);

/// Encoded training latents with provenance.
struct LatentSet {
    Tensor latents;                  // (N, C, h, w)
    std::vector<std::string> ids;
    std::vector<int> labels;         // 1 = fake, 0 = real
    Tensor cond;                     // (N, cond_dim) or empty

    int size() const { return latents.empty() ? 0 : latents.dim(0); }
};

/// Encodes images (N, 3, H, W) with a frozen autoencoder.
LatentSet encode_latent_set(const Vae& vae, const Tensor& images, std::vector<std::string> ids, std::vector<int> labels,
                            Tensor cond = {});

struct GldmLogRecord {
    int cycle = 0;
    std::string phase;  // "generator" or "discriminator"
    int iterations = 0;
    double diffusion = 0.0;
    double adversarial = 0.0;
    double critic = 0.0;
    double penalty = 0.0;
};

nlohmann::json to_json(const GldmLogRecord& r);

struct GldmStepContext {
    std::string phase;
    int cycle = 0;
    int step = 0;
    const NoisePredictor* predictor = nullptr;
    const Discriminator* discriminator = nullptr;
    /// Labels of the rows in the current batch(es), in batch order.
    const std::vector<int>* batch_labels = nullptr;
};

/// Observation points around every parameter update; used to assert training contracts.
struct GldmHooks {
    std::function<void(const GldmStepContext&)> before_step;
    std::function<void(const GldmStepContext&)> after_step;
};

struct GldmResult {
    NoisePredictor predictor;
    Discriminator discriminator;
    std::vector<GldmLogRecord> log;
};

/// Alternating training: cycles of `gen_iters_per_cycle` predictor updates on fake latents only,
/// each followed by `disc_iters_per_cycle` critic updates on real vs denoised-fake latents.
/// The number of predictor updates is epochs * ceil(n_fake / batch_size).
GldmResult train_gldm(const LatentSet& fake, const LatentSet& real, const NoisePredictor& init, const GldmConfig& cfg,
                      const GldmHooks* hooks = nullptr, const CriticConfig* critic_cfg = nullptr);

/// Plain diffusion training of a predictor on a latent set (no critic). Used to pretrain the
/// base predictor that G-LDM fine-tunes, and by the toy latent-diffusion forger.
struct DiffusionTrainConfig {
    int epochs = 10;
    int batch_size = 16;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    double cond_dropout = 0.1;
};
std::vector<double> train_diffusion(NoisePredictor& pred, const LatentSet& data, const DiffusionTrainConfig& cfg,
                                    const NoiseSchedule& sched);

/// Mean diffusion loss over the whole set with noise and steps drawn from a fixed seed.
double evaluate_diffusion_loss(const NoisePredictor& pred, const LatentSet& data, const NoiseSchedule& sched,
                               std::uint64_t seed, int repeats = 1);

/// Pretrains an autoencoder with reconstruction + small KL loss, then sets the latent scale to
/// the inverse standard deviation of the encoded means. Returns per-step losses.
struct VaeTrainConfig {
    int steps = 500;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double kl_weight = 1e-4;
    std::uint64_t seed = 0;
};
std::vector<double> train_vae(Vae& vae, const Tensor& images, const VaeTrainConfig& cfg);

/// Mean absolute reconstruction error of encode -> decode over a batch.
double vae_reconstruction_error(const Vae& vae, const Tensor& images);

void write_gldm_log(const std::vector<GldmLogRecord>& log, const std::string& path);

}  // namespace r2bd
