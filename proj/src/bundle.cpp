#include "r2bd/bundle.hpp"

#include <cstring>

#include "r2bd/checkpoint.hpp"
#include "r2bd/error.hpp"

namespace r2bd {

NoiseFn ModelBundle::noise_fn() const {
    return [this](const Tensor& latent, int step, const Tensor* cond) -> Tensor {
        require(cond == nullptr || cond->empty(), "reconstruction uses the null condition");
        ag::NoGradGuard guard;
        const bool single = latent.ndim() == 3;
        const Tensor batch = single ? latent.with_leading_one() : latent;
        const std::vector<int> steps(static_cast<std::size_t>(batch.dim(0)), step);
        Tensor out = predictor.forward(ag::constant(batch), steps).value();
        return single ? out.squeeze_leading() : out;
    };
}

bool ModelBundle::bitwise_equal(const ModelBundle& other) const {
    if (!vae.params().bitwise_equal(other.vae.params())) return false;
    if (std::memcmp(&vae.latent_scale, &other.vae.latent_scale, sizeof(double)) != 0) return false;
    if (!predictor.params().bitwise_equal(other.predictor.params())) return false;
    if (discriminator.has_value() != other.discriminator.has_value()) return false;
    if (discriminator && !discriminator->params().bitwise_equal(other.discriminator->params())) return false;
    return T == other.T && beta_start == other.beta_start && beta_end == other.beta_end;
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
    Checkpoint ckpt;
    ckpt.kind = kBundleKind;
    ckpt.config = {{"resolved", bundle.config},
                   {"vae", bundle.vae.config()},
                   {"predictor", bundle.predictor.config()},
                   {"schedule", {{"T", bundle.T}, {"beta_start", bundle.beta_start}, {"beta_end", bundle.beta_end}}}};
    if (bundle.discriminator) ckpt.config["discriminator"] = bundle.discriminator->config();
    bundle.vae.save_to(ckpt, "vae");
    bundle.predictor.save_to(ckpt, "predictor");
    if (bundle.discriminator) bundle.discriminator->save_to(ckpt, "discriminator");
    save_checkpoint(ckpt, path);
}

ModelBundle load_bundle(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    require(ckpt.kind == kBundleKind, "checkpoint " + path.string() + " holds '" + ckpt.kind + "', not a model bundle");
    const auto& cfg = ckpt.config;
    ModelBundle bundle{Vae::load_from(ckpt, "vae", cfg.at("vae").get<VaeConfig>()),
                       NoisePredictor::load_from(ckpt, "predictor", cfg.at("predictor").get<UNetConfig>()),
                       std::nullopt};
    if (cfg.contains("discriminator"))
        bundle.discriminator = Discriminator::load_from(ckpt, "discriminator", cfg.at("discriminator").get<CriticConfig>());
    bundle.T = cfg.at("schedule").at("T").get<int>();
    bundle.beta_start = cfg.at("schedule").at("beta_start").get<double>();
    bundle.beta_end = cfg.at("schedule").at("beta_end").get<double>();
    bundle.config = cfg.value("resolved", nlohmann::json::object());
    return bundle;
}

}  // namespace r2bd
