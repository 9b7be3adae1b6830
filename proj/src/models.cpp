#include "r2bd/models.hpp"

#include <algorithm>
#include <cmath>

#include "r2bd/error.hpp"

namespace r2bd {

namespace {

Tensor run_batched(const Tensor& input, const std::function<Var(const Var&)>& fn) {
    ag::NoGradGuard guard;
    return fn(ag::constant(input)).value();
}

}  // namespace

void save_params(const nn::ParamSet& ps, Checkpoint& ckpt, const std::string& prefix) {
    for (const auto& [name, var] : ps.entries()) ckpt.arrays.emplace_back(prefix + "." + name, var.value());
}

void load_params(nn::ParamSet& ps, const Checkpoint& ckpt, const std::string& prefix) {
    std::vector<Tensor> values;
    values.reserve(ps.entries().size());
    for (const auto& [name, var] : ps.entries()) {
        const std::string key = prefix + "." + name;
        require(ckpt.has(key), "checkpoint is missing parameter '" + key + "'");
        const Tensor& t = ckpt.array(key);
        require(t.shape() == var.shape(), "parameter '" + key + "' has shape " + shape_string(t.shape()) +
                                              ", expected " + shape_string(var.shape()));
        values.push_back(t);
    }
    ps.assign(values);
}

// ---- Vae ------------------------------------------------------------------------------------

Vae::Vae(VaeConfig cfg, Rng* rng) : cfg_(cfg) { build(rng); }

Vae::Vae(const Vae& other) : latent_scale(other.latent_scale), cfg_(other.cfg_) {
    build(nullptr);
    params_.copy_values_from(other.params_);
}

Vae& Vae::operator=(const Vae& other) {
    if (this != &other) {
        Vae copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Vae::build(Rng* rng) {
    require(cfg_.image_channels > 0 && cfg_.latent_channels > 0 && cfg_.width > 0, "invalid autoencoder config");
    const int w = cfg_.width;
    const int c = cfg_.latent_channels;
    enc1_ = nn::make_conv(params_, "enc1", cfg_.image_channels, w, 3, 1, 1, rng);
    enc2_ = nn::make_conv(params_, "enc2", w, 2 * w, 4, 2, 1, rng);
    enc3_ = nn::make_conv(params_, "enc3", 2 * w, 2 * w, 4, 2, 1, rng);
    enc_head_ = nn::make_conv(params_, "enc_head", 2 * w, 2 * c, 3, 1, 1, rng);
    dec1_ = nn::make_conv(params_, "dec1", c, 2 * w, 3, 1, 1, rng);
    dec2_ = nn::make_conv(params_, "dec2", 2 * w, w, 3, 1, 1, rng);
    dec3_ = nn::make_conv(params_, "dec3", w, w, 3, 1, 1, rng);
    dec_out_ = nn::make_conv(params_, "dec_out", w, cfg_.image_channels, 3, 1, 1, rng);
}

Vae::Posterior Vae::encode_posterior(const Var& images) const {
    require(images.value().ndim() == 4 && images.dim(1) == cfg_.image_channels, "encoder expects (N, 3, H, W)");
    require(images.dim(2) % 4 == 0 && images.dim(3) % 4 == 0, "image size must be divisible by 4");
    Var h = ag::silu(enc1_(images));
    h = ag::silu(enc2_(h));
    h = ag::silu(enc3_(h));
    Var head = enc_head_(h);
    const int c = cfg_.latent_channels;
    return {ag::slice_channels(head, 0, c), ag::slice_channels(head, c, c)};
}

Var Vae::decode_raw(const Var& latents) const {
    require(latents.value().ndim() == 4 && latents.dim(1) == cfg_.latent_channels, "decoder expects (N, C, h, w)");
    Var h = ag::silu(dec1_(latents));
    h = ag::silu(dec2_(ag::upsample2x(h)));
    h = ag::silu(dec3_(ag::upsample2x(h)));
    return dec_out_(h);
}

Tensor Vae::encode_batch(const Tensor& images) const {
    Tensor mean = run_batched(images, [&](const Var& x) { return encode_posterior(x).mean; });
    mean *= latent_scale;
    return mean;
}

Tensor Vae::decode_batch(const Tensor& latents) const {
    Tensor unscaled = latents * (1.0 / latent_scale);
    Tensor out = run_batched(unscaled, [&](const Var& z) { return decode_raw(z); });
    for (double& v : out.values()) v = std::clamp(v, -1.0, 1.0);
    return out;
}

Tensor Vae::encode(const Tensor& image) const {
    require(image.ndim() == 3, "encode expects a single (3, H, W) image");
    return encode_batch(image.with_leading_one()).squeeze_leading();
}

Tensor Vae::decode(const Tensor& latent) const {
    require(latent.ndim() == 3, "decode expects a single (C, h, w) latent");
    return decode_batch(latent.with_leading_one()).squeeze_leading();
}

void Vae::save_to(Checkpoint& ckpt, const std::string& prefix) const {
    save_params(params_, ckpt, prefix);
    ckpt.arrays.emplace_back(prefix + ".latent_scale", Tensor::scalar(latent_scale));
}

Vae Vae::load_from(const Checkpoint& ckpt, const std::string& prefix, const VaeConfig& cfg) {
    Vae vae(cfg, nullptr);
    load_params(vae.params_, ckpt, prefix);
    require(ckpt.has(prefix + ".latent_scale"), "checkpoint is missing the latent scale");
    vae.latent_scale = ckpt.array(prefix + ".latent_scale")[0];
    return vae;
}

// ---- NoisePredictor -------------------------------------------------------------------------

Tensor step_embedding(std::span<const int> steps, int dim) {
    require(dim > 0 && dim % 2 == 0, "embedding dimension must be even");
    const int half = dim / 2;
    Tensor out({static_cast<int>(steps.size()), dim});
    for (std::size_t n = 0; n < steps.size(); ++n) {
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            const double a = steps[n] * freq;
            out[n * dim + k] = std::sin(a);
            out[n * dim + half + k] = std::cos(a);
        }
    }
    return out;
}

NoisePredictor::NoisePredictor(UNetConfig cfg, Rng* rng) : cfg_(cfg) { build(rng); }

NoisePredictor::NoisePredictor(const NoisePredictor& other) : cfg_(other.cfg_) {
    build(nullptr);
    params_.copy_values_from(other.params_);
}

NoisePredictor& NoisePredictor::operator=(const NoisePredictor& other) {
    if (this != &other) {
        NoisePredictor copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void NoisePredictor::build(Rng* rng) {
    require(cfg_.channels > 0 && cfg_.width > 0 && cfg_.cond_dim >= 0, "invalid noise predictor config");
    const int w = cfg_.width;
    time1_ = nn::make_linear(params_, "time1", cfg_.time_dim, 2 * w, rng);
    time2_ = nn::make_linear(params_, "time2", 2 * w, 3 * w, rng);
    if (cfg_.cond_dim > 0) cond_ = nn::make_linear(params_, "cond", cfg_.cond_dim, 3 * w, rng);
    conv_in_ = nn::make_conv(params_, "conv_in", cfg_.channels, w, 3, 1, 1, rng);
    conv_down_ = nn::make_conv(params_, "conv_down", w, 2 * w, 4, 2, 1, rng);
    conv_mid_ = nn::make_conv(params_, "conv_mid", 2 * w, 2 * w, 3, 1, 1, rng);
    conv_up_ = nn::make_conv(params_, "conv_up", 3 * w, w, 3, 1, 1, rng);
    conv_out_ = nn::make_conv(params_, "conv_out", w, cfg_.channels, 3, 1, 1, rng);
}

Var NoisePredictor::forward(const Var& z, std::span<const int> steps, const std::optional<Tensor>& cond) const {
    require(z.value().ndim() == 4 && z.dim(1) == cfg_.channels, "noise predictor expects (N, C, H, W)");
    const int n = z.dim(0);
    require(static_cast<int>(steps.size()) == n, "one step index per batch element is required");
    require(z.dim(2) % 2 == 0 && z.dim(3) % 2 == 0, "latent size must be even");
    const int w = cfg_.width;

    Var emb = time2_(ag::silu(time1_(ag::constant(step_embedding(steps, cfg_.time_dim)))));
    if (cond_) {
        Tensor c = cond ? *cond : Tensor({n, cfg_.cond_dim});
        require(c.ndim() == 2 && c.dim(0) == n && c.dim(1) == cfg_.cond_dim, "condition must be (N, cond_dim)");
        emb = ag::add(emb, (*cond_)(ag::constant(std::move(c))));
    } else {
        require(!cond || cond->empty(), "unconditional model received a condition");
    }

    Var h1 = ag::silu(ag::add_channel_bias(conv_in_(z), ag::slice_channels(emb, 0, w)));
    Var h2 = ag::silu(ag::add_channel_bias(conv_down_(h1), ag::slice_channels(emb, w, 2 * w)));
    Var h3 = ag::silu(conv_mid_(h2));
    Var h4 = ag::silu(conv_up_(ag::concat_channels(ag::upsample2x(h3), h1)));
    return conv_out_(h4);
}

Tensor NoisePredictor::predict(const Tensor& latent, int step, const Tensor* cond) const {
    require(latent.ndim() == 3, "predict expects a single (C, H, W) latent");
    ag::NoGradGuard guard;
    const int steps[1] = {step};
    std::optional<Tensor> c;
    if (cond && !cond->empty()) c = cond->reshaped({1, static_cast<int>(cond->size())});
    return forward(ag::constant(latent.with_leading_one()), steps, c).value().squeeze_leading();
}

void NoisePredictor::save_to(Checkpoint& ckpt, const std::string& prefix) const {
    save_params(params_, ckpt, prefix);
}

NoisePredictor NoisePredictor::load_from(const Checkpoint& ckpt, const std::string& prefix, const UNetConfig& cfg) {
    NoisePredictor model(cfg, nullptr);
    load_params(model.params_, ckpt, prefix);
    return model;
}

// ---- Discriminator --------------------------------------------------------------------------

Discriminator::Discriminator(CriticConfig cfg, Rng* rng) : cfg_(cfg) { build(rng); }

Discriminator::Discriminator(const Discriminator& other) : cfg_(other.cfg_) {
    build(nullptr);
    params_.copy_values_from(other.params_);
}

Discriminator& Discriminator::operator=(const Discriminator& other) {
    if (this != &other) {
        Discriminator copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Discriminator::build(Rng* rng) {
    require(cfg_.channels > 0 && cfg_.hidden > 0 && cfg_.height % 2 == 0 && cfg_.width % 2 == 0,
            "invalid discriminator config");
    const int h = cfg_.hidden;
    conv1_ = nn::make_conv(params_, "conv1", cfg_.channels, h, 3, 1, 1, rng);
    conv2_ = nn::make_conv(params_, "conv2", h, 2 * h, 4, 2, 1, rng);
    head_ = nn::make_linear(params_, "head", 2 * h * (cfg_.height / 2) * (cfg_.width / 2), 1, rng);
}

Var Discriminator::forward(const Var& z) const {
    require(z.value().ndim() == 4 && z.dim(1) == cfg_.channels && z.dim(2) == cfg_.height && z.dim(3) == cfg_.width,
            "discriminator input has shape " + shape_string(z.shape()));
    Var h = ag::silu(conv1_(z));
    h = ag::silu(conv2_(h));
    const int n = z.dim(0);
    h = ag::reshape(h, {n, static_cast<int>(h.value().size()) / n});
    return head_(h);
}

void Discriminator::save_to(Checkpoint& ckpt, const std::string& prefix) const {
    save_params(params_, ckpt, prefix);
}

Discriminator Discriminator::load_from(const Checkpoint& ckpt, const std::string& prefix, const CriticConfig& cfg) {
    Discriminator model(cfg, nullptr);
    load_params(model.params_, ckpt, prefix);
    return model;
}

// ---- config serialization -------------------------------------------------------------------

void to_json(nlohmann::json& j, const VaeConfig& c) {
    j = {{"image_channels", c.image_channels}, {"latent_channels", c.latent_channels}, {"width", c.width}};
}
void from_json(const nlohmann::json& j, VaeConfig& c) {
    c.image_channels = j.value("image_channels", c.image_channels);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.width = j.value("width", c.width);
}
void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = {{"channels", c.channels}, {"width", c.width}, {"cond_dim", c.cond_dim}, {"time_dim", c.time_dim}};
}
void from_json(const nlohmann::json& j, UNetConfig& c) {
    c.channels = j.value("channels", c.channels);
    c.width = j.value("width", c.width);
    c.cond_dim = j.value("cond_dim", c.cond_dim);
    c.time_dim = j.value("time_dim", c.time_dim);
}
void to_json(nlohmann::json& j, const CriticConfig& c) {
    j = {{"channels", c.channels}, {"height", c.height}, {"width", c.width}, {"hidden", c.hidden}};
}
void from_json(const nlohmann::json& j, CriticConfig& c) {
    c.channels = j.value("channels", c.channels);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.hidden = j.value("hidden", c.hidden);
}

}  // namespace r2bd
