#include "r2bd/forgers.hpp"

#include <algorithm>
#include <cmath>

#include "r2bd/checkpoint.hpp"
#include "r2bd/error.hpp"
#include "r2bd/gldm.hpp"

namespace r2bd {

std::string to_string(ForgerFamily f) {
    switch (f) {
        case ForgerFamily::gan: return "gan";
        case ForgerFamily::pixeldm: return "pixeldm";
        case ForgerFamily::latentdm: return "latentdm";
    }
    return "gan";
}

ForgerFamily parse_forger_family(const std::string& s) {
    if (s == "gan") return ForgerFamily::gan;
    if (s == "pixeldm") return ForgerFamily::pixeldm;
    if (s == "latentdm") return ForgerFamily::latentdm;
    throw ValidationError("unknown generator family '" + s + "'");
}

void to_json(nlohmann::json& j, const ForgerConfig& c) {
    j = {{"method_name", c.method_name}, {"family", to_string(c.family)}, {"seed", c.seed},
         {"train_steps", c.train_steps}, {"batch_size", c.batch_size},   {"learning_rate", c.learning_rate},
         {"width", c.width},             {"noise_dim", c.noise_dim},     {"sample_steps", c.sample_steps},
         {"beta_start", c.beta_start},   {"beta_end", c.beta_end},       {"T", c.T},
         {"vae_steps", c.vae_steps},     {"vae_width", c.vae_width},     {"loss_target", c.loss_target},
         {"prediction", c.prediction},   {"gan_loss", c.gan_loss},
         {"instance_noise", c.instance_noise}};
}

void from_json(const nlohmann::json& j, ForgerConfig& c) {
    c.method_name = j.value("method_name", c.method_name);
    c.family = parse_forger_family(j.value("family", to_string(c.family)));
    c.seed = j.value("seed", c.seed);
    c.train_steps = j.value("train_steps", c.train_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.width = j.value("width", c.width);
    c.noise_dim = j.value("noise_dim", c.noise_dim);
    c.sample_steps = j.value("sample_steps", c.sample_steps);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.T = j.value("T", c.T);
    c.vae_steps = j.value("vae_steps", c.vae_steps);
    c.vae_width = j.value("vae_width", c.vae_width);
    c.loss_target = j.value("loss_target", c.loss_target);
    c.prediction = j.value("prediction", c.prediction);
    c.gan_loss = j.value("gan_loss", c.gan_loss);
    c.instance_noise = j.value("instance_noise", c.instance_noise);
    if (!(c.instance_noise >= 0.0)) throw ValidationError("forger instance_noise must be nonnegative");
    if (c.gan_loss != "feature_matching" && c.gan_loss != "nonsaturating")
        throw ValidationError("forger gan_loss must be \"feature_matching\" or \"nonsaturating\", got '" + c.gan_loss + "'");
    if (c.prediction != "x0" && c.prediction != "eps")
        throw ValidationError("forger prediction must be \"x0\" or \"eps\", got '" + c.prediction + "'");
}

// ---- GAN networks ---------------------------------------------------------------------------

ImageGenerator::ImageGenerator(int noise_dim, int width, int image_size, Rng* rng)
    : noise_dim_(noise_dim), width_(width), image_size_(image_size) {
    require(noise_dim > 0 && width > 0 && image_size % 8 == 0, "invalid generator geometry");
    const int w = width;
    const int base = image_size / 8;
    fc_ = nn::make_linear(params_, "fc", noise_dim, 4 * w * base * base, rng);
    c1_ = nn::make_conv(params_, "c1", 4 * w, 2 * w, 3, 1, 1, rng);
    c2_ = nn::make_conv(params_, "c2", 2 * w, w, 3, 1, 1, rng);
    c3_ = nn::make_conv(params_, "c3", w, w, 3, 1, 1, rng);
    out_ = nn::make_conv(params_, "out", w, 3, 3, 1, 1, rng);
}

ImageGenerator::ImageGenerator(const ImageGenerator& other)
    : ImageGenerator(other.noise_dim_, other.width_, other.image_size_, nullptr) {
    params_.copy_values_from(other.params_);
}

namespace {

/// Scales each pixel's feature vector to unit root-mean-square over channels.
Var pixel_norm(const Var& x) {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const Var sq = ag::reshape(ag::square(x), {n, c, hw});
    const Var mean = ag::bmm(ag::constant(Tensor(Shape{n, 1, c}, 1.0 / c)), sq);
    const Var spread = ag::bmm(ag::constant(Tensor(Shape{n, c, 1}, 1.0)), ag::rsqrt(ag::add_scalar(mean, 1e-8)));
    return ag::mul(x, ag::reshape(spread, x.value().shape()));
}

}  // namespace

Var ImageGenerator::forward(const Var& noise) const {
    const int n = noise.dim(0);
    const int base = image_size_ / 8;
    Var h = pixel_norm(ag::silu(ag::reshape(fc_(noise), {n, 4 * width_, base, base})));
    h = pixel_norm(ag::silu(c1_(ag::upsample2x(h))));
    h = pixel_norm(ag::silu(c2_(ag::upsample2x(h))));
    h = ag::silu(c3_(ag::upsample2x(h)));
    return ag::tanh(out_(h));
}

ImageCritic::ImageCritic(int width, int image_size, Rng* rng) {
    const int w = width;
    c1_ = nn::make_conv(params_, "c1", 3, w, 4, 2, 1, rng);
    c2_ = nn::make_conv(params_, "c2", w, 2 * w, 4, 2, 1, rng);
    c3_ = nn::make_conv(params_, "c3", 2 * w, 2 * w, 4, 2, 1, rng);
    const int s = image_size / 8;
    head_ = nn::make_linear(params_, "head", 2 * w * s * s, 1, rng);
}

Var ImageCritic::features(const Var& images) const {
    const int n = images.dim(0);
    Var h = ag::silu(c1_(images));
    h = ag::silu(c2_(h));
    h = ag::silu(c3_(h));
    return ag::reshape(h, {n, static_cast<int>(h.value().size()) / n});
}

Var ImageCritic::forward(const Var& images) const { return head_(features(images)); }

// ---- Forger ---------------------------------------------------------------------------------

namespace {

UNetConfig pixel_unet(const ForgerConfig& cfg) { return {3, cfg.width, 0, 32}; }
UNetConfig latent_unet(const ForgerConfig& cfg) { return {4, cfg.width, 0, 32}; }
VaeConfig forger_vae(const ForgerConfig& cfg) { return {3, 4, cfg.vae_width}; }

NoiseSchedule forger_schedule(const ForgerConfig& cfg) {
    return build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
}

/// Deterministic DDIM sampling from per-row starting noise over `steps` evenly spaced steps.
/// With `predicts_x0` the network output is the clean sample and the noise is recovered from it.
Tensor ddim_sample(const NoisePredictor& pred, Tensor z, int steps, const NoiseSchedule& sched, double x0_clip,
                   bool predicts_x0) {
    require(steps >= 1 && steps <= sched.T, "invalid DDIM step count");
    ag::NoGradGuard guard;
    std::vector<int> grid(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) grid[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(static_cast<double>(i) * sched.T / steps));
    for (int i = steps; i >= 1; --i) {
        const int t = grid[static_cast<std::size_t>(i)];
        const int t_prev = grid[static_cast<std::size_t>(i - 1)];
        const std::vector<int> ts(static_cast<std::size_t>(z.dim(0)), t);
        Tensor eps = pred.forward(ag::constant(z), ts).value();
        if (predicts_x0) {
            const double sab = std::sqrt(sched.alpha_bar(t)), s1 = std::sqrt(1.0 - sched.alpha_bar(t));
            for (std::size_t k = 0; k < eps.size(); ++k) {
                const double x0 = x0_clip > 0.0 ? std::clamp(eps[k], -x0_clip, x0_clip) : eps[k];
                eps[k] = (z[k] - sab * x0) / s1;
            }
        }
        z = ddim_jump(z, eps, t, t_prev, sched, x0_clip);
    }
    return z;
}

Tensor noise_rows(const Shape& row_shape, int n, std::uint64_t seed, std::uint64_t first_index) {
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        Rng rng(derive_seed(seed, first_index + static_cast<std::uint64_t>(k)));
        rows.push_back(rng.normal_tensor(row_shape));
    }
    return stack(rows);
}

Tensor clamp_images(Tensor t) {
    for (double& v : t.values()) v = std::clamp(v, -1.0, 1.0);
    return t;
}

}  // namespace

Forger::Forger(ForgerConfig cfg, int size) : image_size(size), cfg_(std::move(cfg)) {
    switch (cfg_.family) {
        case ForgerFamily::gan: generator.emplace(cfg_.noise_dim, cfg_.width, image_size, nullptr); break;
        case ForgerFamily::pixeldm: predictor.emplace(pixel_unet(cfg_), nullptr); break;
        case ForgerFamily::latentdm:
            vae.emplace(forger_vae(cfg_), nullptr);
            predictor.emplace(latent_unet(cfg_), nullptr);
            break;
    }
}

Tensor Forger::sample(int n, std::uint64_t seed, std::uint64_t first_index) const {
    require(n >= 0, "sample count must be nonnegative");
    if (n == 0) return Tensor({0, 3, image_size, image_size});
    switch (cfg_.family) {
        case ForgerFamily::gan: {
            ag::NoGradGuard guard;
            const Tensor z = noise_rows({cfg_.noise_dim}, n, seed, first_index);
            return clamp_images(generator->forward(ag::constant(z)).value());
        }
        case ForgerFamily::pixeldm: {
            const Tensor z = noise_rows({3, image_size, image_size}, n, seed, first_index);
            return clamp_images(ddim_sample(*predictor, z, cfg_.sample_steps, forger_schedule(cfg_), 1.0,
                                           cfg_.prediction == "x0"));
        }
        case ForgerFamily::latentdm: {
            const Tensor z = noise_rows(vae->latent_shape(image_size, image_size), n, seed, first_index);
            return vae->decode_batch(ddim_sample(*predictor, z, cfg_.sample_steps, forger_schedule(cfg_), 0.0,
                                                 cfg_.prediction == "x0"));
        }
    }
    return {};
}

void Forger::save(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    ckpt.kind = "forger";
    ckpt.config = {{"forger", cfg_}, {"image_size", image_size}};
    if (generator) save_params(generator->params(), ckpt, "generator");
    if (predictor) predictor->save_to(ckpt, "predictor");
    if (vae) vae->save_to(ckpt, "vae");
    save_checkpoint(ckpt, path);
}

Forger Forger::load(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    require(ckpt.kind == "forger", "checkpoint " + path.string() + " is not a forger");
    Forger f(ckpt.config.at("forger").get<ForgerConfig>(), ckpt.config.at("image_size").get<int>());
    if (f.generator) load_params(f.generator->params(), ckpt, "generator");
    if (f.predictor) load_params(f.predictor->params(), ckpt, "predictor");
    if (f.vae) *f.vae = Vae::load_from(ckpt, "vae", f.vae->config());
    return f;
}

// ---- training -------------------------------------------------------------------------------

namespace {

/// Mean over rows of (N, F) features, shaped (1, 1, F).
Var row_mean(const Var& f) {
    const int n = f.dim(0), d = f.dim(1);
    return ag::bmm(ag::constant(Tensor(Shape{1, 1, n}, 1.0 / n)), ag::reshape(f, {1, n, d}));
}

void train_gan(Forger& f, const ForgerConfig& cfg, const Tensor& reals, ForgerTrainLog* log) {
    Rng init(cfg.seed, "forger.gan.init");
    ImageGenerator gen(cfg.noise_dim, cfg.width, f.image_size, &init);
    ImageCritic critic(cfg.width, f.image_size, &init);
    const nn::AdamConfig adam{.learning_rate = cfg.learning_rate, .beta1 = 0.5, .beta2 = 0.999, .epsilon = 1e-8};
    nn::Adam opt_g(gen.params(), adam);
    nn::Adam opt_d(critic.params(), adam);
    Rng rng(cfg.seed, "forger.gan.train");
    const int n = reals.dim(0);
    for (int step = 0; step < cfg.train_steps; ++step) {
        std::vector<Tensor> rows;
        for (int k = 0; k < cfg.batch_size; ++k) rows.push_back(reals.item(rng.uniform_int(0, n - 1)));
        const Tensor real = stack(rows);
        const Tensor z = rng.normal_tensor({cfg.batch_size, cfg.noise_dim});

        const Tensor real_in = real + rng.normal_tensor(real.shape()) * cfg.instance_noise;
        const Tensor fake_noise = rng.normal_tensor(real.shape()) * cfg.instance_noise;
        Var fake = ag::add(gen.forward(ag::constant(z)), ag::constant(fake_noise));
        Var d_loss;
        {
            nn::FrozenScope frozen(gen.params());
            Var lr = critic.forward(ag::constant(real_in));
            Var lf = critic.forward(ag::constant(fake.value()));
            d_loss = ag::scale(ag::add(ag::mean(ag::log_sigmoid(lr)), ag::mean(ag::log_sigmoid(ag::scale(lf, -1.0)))), -1.0);
        }
        ag::backward(d_loss);
        opt_d.step(critic.params());

        Var g_loss;
        {
            nn::FrozenScope frozen(critic.params());
            if (cfg.gan_loss == "feature_matching")
                g_loss = ag::mse(row_mean(critic.features(fake)),
                                 ag::constant(row_mean(critic.features(ag::constant(real_in))).value()));
            else
                g_loss = ag::scale(ag::mean(ag::log_sigmoid(critic.forward(fake))), -1.0);
        }
        ag::backward(g_loss);
        opt_g.step(gen.params());
        const double total = d_loss.value()[0] + g_loss.value()[0];
        if (!std::isfinite(total))
            throw TrainingError("forger " + cfg.method_name + " diverged at step " + std::to_string(step));
        if (log) log->losses.push_back(g_loss.value()[0]);
    }
    f.generator = std::move(gen);
}

void fit_diffusion(NoisePredictor& pred, const Tensor& data, const ForgerConfig& cfg, ForgerTrainLog* log) {
    const NoiseSchedule sched = forger_schedule(cfg);
    nn::Adam opt(pred.params(), {.learning_rate = cfg.learning_rate});
    Rng rng(cfg.seed, "forger.diffusion.train");
    const int n = data.dim(0);
    double running = -1.0;
    for (int step = 0; step < cfg.train_steps; ++step) {
        std::vector<Tensor> rows;
        for (int k = 0; k < cfg.batch_size; ++k) rows.push_back(data.item(rng.uniform_int(0, n - 1)));
        const Tensor z0 = stack(rows);
        std::vector<int> steps(static_cast<std::size_t>(cfg.batch_size));
        for (int& t : steps) t = rng.uniform_int(1, sched.T);
        const Tensor noise = rng.normal_tensor(z0.shape());
        Var loss = cfg.prediction == "x0"
                       ? ag::mse(pred.forward(ag::constant(diffuse(z0, steps, noise, sched)), steps), ag::constant(z0))
                       : diffusion_loss(pred, z0, steps, noise, std::nullopt, sched);
        if (!std::isfinite(loss.value()[0]))
            throw TrainingError("forger " + cfg.method_name + " diverged at step " + std::to_string(step));
        ag::backward(loss);
        opt.step(pred.params());
        running = running < 0.0 ? loss.value()[0] : 0.95 * running + 0.05 * loss.value()[0];
        if (log) log->losses.push_back(loss.value()[0]);
        if (cfg.loss_target > 0.0 && step >= 50 && running <= cfg.loss_target) break;
    }
}

}  // namespace

Forger train_forger(const ForgerConfig& cfg, const Tensor& real_images, ForgerTrainLog* log) {
    require(real_images.ndim() == 4 && real_images.dim(0) > 0, "forger training needs real images");
    require(cfg.train_steps > 0 && cfg.batch_size > 0 && cfg.learning_rate > 0.0, "invalid forger config");
    Forger f(cfg, real_images.dim(2));
    switch (cfg.family) {
        case ForgerFamily::gan: train_gan(f, cfg, real_images, log); break;
        case ForgerFamily::pixeldm: {
            Rng init(cfg.seed, "forger.pixeldm.init");
            NoisePredictor pred(pixel_unet(cfg), &init);
            fit_diffusion(pred, real_images, cfg, log);
            f.predictor = std::move(pred);
            break;
        }
        case ForgerFamily::latentdm: {
            Rng init(cfg.seed, "forger.latentdm.init");
            Vae v(forger_vae(cfg), &init);
            train_vae(v, real_images, {.steps = cfg.vae_steps, .batch_size = cfg.batch_size, .learning_rate = 1e-3,
                                       .kl_weight = 1e-4, .seed = derive_seed(cfg.seed, "forger.latentdm.vae")});
            std::vector<Tensor> chunks;
            for (int start = 0; start < real_images.dim(0); start += 64)
                chunks.push_back(v.encode_batch(real_images.rows(start, std::min(64, real_images.dim(0) - start))));
            NoisePredictor pred(latent_unet(cfg), &init);
            fit_diffusion(pred, concat_rows(chunks), cfg, log);
            f.vae = std::move(v);
            f.predictor = std::move(pred);
            break;
        }
    }
    return f;
}

}  // namespace r2bd
