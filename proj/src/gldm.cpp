#include "r2bd/gldm.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "r2bd/error.hpp"

namespace r2bd {

void to_json(nlohmann::json& j, const GldmConfig& c) {
    j = {{"gen_iters_per_cycle", c.gen_iters_per_cycle},
         {"disc_iters_per_cycle", c.disc_iters_per_cycle},
         {"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"gp_lambda", c.gp_lambda},
         {"T", c.T},
         {"beta_start", c.beta_start},
         {"beta_end", c.beta_end},
         {"seed", c.seed},
         {"batch_size", c.batch_size},
         {"adversarial", c.adversarial},
         {"wasserstein", c.wasserstein},
         {"adversarial_weight", c.adversarial_weight},
         {"cond_dropout", c.cond_dropout},
         {"gp_fd_step", c.gp_fd_step}};
}

void from_json(const nlohmann::json& j, GldmConfig& c) {
    c.gen_iters_per_cycle = j.value("gen_iters_per_cycle", c.gen_iters_per_cycle);
    c.disc_iters_per_cycle = j.value("disc_iters_per_cycle", c.disc_iters_per_cycle);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.gp_lambda = j.value("gp_lambda", c.gp_lambda);
    c.T = j.value("T", c.T);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.seed = j.value("seed", c.seed);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adversarial = j.value("adversarial", c.adversarial);
    c.wasserstein = j.value("wasserstein", c.wasserstein);
    c.adversarial_weight = j.value("adversarial_weight", c.adversarial_weight);
    c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
    c.gp_fd_step = j.value("gp_fd_step", c.gp_fd_step);
}

void validate_gldm_config(const GldmConfig& c) {
    require(c.gen_iters_per_cycle > 0, "gen_iters_per_cycle must be positive");
    require(c.disc_iters_per_cycle >= 0, "disc_iters_per_cycle must be nonnegative");
    require(c.epochs > 0, "epochs must be positive");
    require(c.learning_rate > 0.0, "learning_rate must be positive");
    require(c.gp_lambda >= 0.0, "gp_lambda must be nonnegative");
    require(c.batch_size > 0, "batch_size must be positive");
    require(c.cond_dropout >= 0.0 && c.cond_dropout <= 1.0, "cond_dropout must lie in [0, 1]");
    require(c.gp_fd_step > 0.0, "gp_fd_step must be positive");
    validate_schedule(build_linear_schedule(c.T, c.beta_start, c.beta_end));
}

Tensor broadcast_rows(const Shape& shape, const std::vector<double>& coef) {
    require(!shape.empty() && static_cast<std::size_t>(shape[0]) == coef.size(), "one coefficient per row required");
    Tensor out(shape);
    const std::size_t inner = out.size() / coef.size();
    for (std::size_t r = 0; r < coef.size(); ++r)
        std::fill(out.data() + r * inner, out.data() + (r + 1) * inner, coef[r]);
    return out;
}

namespace {

void check_steps(std::span<const int> steps, int rows, const NoiseSchedule& sched) {
    require(static_cast<int>(steps.size()) == rows, "one step index per batch row required");
    for (int t : steps) require(t >= 1 && t <= sched.T, "step index out of range");
}

Tensor gather_rows(const Tensor& t, const std::vector<int>& idx) {
    Shape shape = t.shape();
    const std::size_t inner = t.size() / static_cast<std::size_t>(shape[0]);
    shape[0] = static_cast<int>(idx.size());
    Tensor out(shape);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(t.data() + static_cast<std::size_t>(idx[r]) * inner, inner, out.data() + r * inner);
    return out;
}

/// Endless stream of shuffled minibatches over [0, n).
class BatchStream {
public:
    BatchStream(int n, int batch, std::uint64_t seed) : n_(n), batch_(batch), rng_(seed), order_(n) {
        std::iota(order_.begin(), order_.end(), 0);
        pos_ = n_;
    }

    std::vector<int> next() {
        if (pos_ >= n_) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        const int take = std::min(batch_, n_ - pos_);
        std::vector<int> out(order_.begin() + pos_, order_.begin() + pos_ + take);
        pos_ += take;
        return out;
    }

private:
    int n_, batch_;
    Rng rng_;
    std::vector<int> order_;
    int pos_;
};

std::vector<int> sample_steps(Rng& rng, int n, int T) {
    std::vector<int> steps(static_cast<std::size_t>(n));
    for (int& t : steps) t = rng.uniform_int(1, T);
    return steps;
}

std::optional<Tensor> batch_condition(const LatentSet& set, const std::vector<int>& idx, double dropout, Rng& rng) {
    if (set.cond.empty()) return std::nullopt;
    Tensor c = gather_rows(set.cond, idx);
    const int dim = c.dim(1);
    for (int r = 0; r < c.dim(0); ++r) {
        if (rng.uniform() < dropout) std::fill_n(c.data() + static_cast<std::size_t>(r) * dim, dim, 0.0);
    }
    return c;
}

void require_finite(double v, const std::string& what, int index, const char* unit = "cycle") {
    if (!std::isfinite(v))
        throw TrainingError("non-finite " + what + " loss in " + unit + " " + std::to_string(index));
}

}  // namespace

Tensor diffuse(const Tensor& z0, std::span<const int> steps, const Tensor& noise, const NoiseSchedule& sched) {
    require(z0.same_shape(noise), "latent and noise shapes differ");
    check_steps(steps, z0.dim(0), sched);
    std::vector<double> a(steps.size()), b(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        a[i] = std::sqrt(sched.alpha_bar(steps[i]));
        b[i] = std::sqrt(1.0 - sched.alpha_bar(steps[i]));
    }
    Tensor out(z0.shape());
    const std::size_t inner = z0.size() / steps.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i / inner] * z0[i] + b[i / inner] * noise[i];
    return out;
}

Var denoised_estimate(const Tensor& z_t, const Var& eps, std::span<const int> steps, const NoiseSchedule& sched) {
    require(z_t.shape() == eps.shape(), "latent and noise prediction shapes differ");
    check_steps(steps, z_t.dim(0), sched);
    std::vector<double> inv(steps.size()), coef(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const double ab = sched.alpha_bar(steps[i]);
        inv[i] = 1.0 / std::sqrt(ab);
        coef[i] = -std::sqrt(1.0 - ab) / std::sqrt(ab);
    }
    Tensor scaled = z_t;
    const Tensor inv_b = broadcast_rows(z_t.shape(), inv);
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= inv_b[i];
    return ag::add(ag::constant(std::move(scaled)), ag::mul_const(eps, broadcast_rows(z_t.shape(), coef)));
}

Var noise_prediction_loss(const Var& eps_pred, const Tensor& noise) {
    require(eps_pred.shape() == noise.shape(), "prediction and noise shapes differ");
    return ag::mse(eps_pred, ag::constant(noise));
}

Var diffusion_loss(const NoisePredictor& pred, const Tensor& z0, std::span<const int> steps, const Tensor& noise,
                   const std::optional<Tensor>& cond, const NoiseSchedule& sched) {
    const Tensor z_t = diffuse(z0, steps, noise, sched);
    return noise_prediction_loss(pred.forward(ag::constant(z_t), steps, cond), noise);
}

Var generator_adversarial_loss(const Var& z0_hat, const Discriminator& disc, bool wasserstein) {
    Var logits = disc.forward(z0_hat);
    if (wasserstein) return ag::scale(ag::mean(logits), -1.0);
    return ag::scale(ag::mean(ag::log_sigmoid(logits)), -1.0);
}

Var critic_adversarial_loss(const Discriminator& disc, const Tensor& z_real, const Tensor& z_fake, bool wasserstein) {
    Var real_logits = disc.forward(ag::constant(z_real));
    Var fake_logits = disc.forward(ag::constant(z_fake));
    if (wasserstein) return ag::sub(ag::mean(fake_logits), ag::mean(real_logits));
    // -log(1 - sigmoid(x)) = -log sigmoid(-x)
    Var real_term = ag::mean(ag::log_sigmoid(real_logits));
    Var fake_term = ag::mean(ag::log_sigmoid(ag::scale(fake_logits, -1.0)));
    return ag::scale(ag::add(real_term, fake_term), -1.0);
}

Tensor interpolate_rows(const Tensor& z_real, const Tensor& z_fake, const std::vector<double>& weights) {
    require(z_real.same_shape(z_fake), "real and fake batches must have the same shape");
    const Tensor w = broadcast_rows(z_real.shape(), weights);
    Tensor out(z_real.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] * z_real[i] + (1.0 - w[i]) * z_fake[i];
    return out;
}

Tensor critic_input_gradients(const Discriminator& disc, const Tensor& u) {
    nn::FrozenScope frozen(disc.params());
    Var input(u, true);
    Var out = disc.forward(input);
    const Tensor seed(out.shape(), 1.0);
    ag::backward(out, &seed);
    return input.grad();
}

namespace {

std::vector<double> row_norms(const Tensor& g) {
    const std::size_t rows = static_cast<std::size_t>(g.dim(0));
    const std::size_t inner = g.size() / rows;
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < inner; ++k) s += g[r * inner + k] * g[r * inner + k];
        out[r] = std::sqrt(s);
    }
    return out;
}

}  // namespace

double gradient_penalty(const Discriminator& disc, const Tensor& u, double gp_lambda) {
    if (gp_lambda == 0.0) return 0.0;
    const std::vector<double> norms = row_norms(critic_input_gradients(disc, u));
    double s = 0.0;
    for (double n : norms) s += (n - 1.0) * (n - 1.0);
    return gp_lambda * s / static_cast<double>(norms.size());
}

CriticLoss discriminator_loss(const Discriminator& disc, const Tensor& z_real, const Tensor& z_fake,
                              const std::vector<double>& interp_weights, double gp_lambda, bool wasserstein) {
    CriticLoss loss;
    {
        ag::NoGradGuard guard;
        loss.adversarial = critic_adversarial_loss(disc, z_real, z_fake, wasserstein).value()[0];
    }
    if (gp_lambda > 0.0)
        loss.penalty = gradient_penalty(disc, interpolate_rows(z_real, z_fake, interp_weights), gp_lambda);
    return loss;
}

CriticLoss discriminator_backward(Discriminator& disc, const Tensor& z_real, const Tensor& z_fake,
                                  const std::vector<double>& interp_weights, double gp_lambda, bool wasserstein,
                                  double fd_step) {
    CriticLoss loss;
    Var adv = critic_adversarial_loss(disc, z_real, z_fake, wasserstein);
    loss.adversarial = adv.value()[0];
    ag::backward(adv);
    if (gp_lambda == 0.0) return loss;

    const Tensor u = interpolate_rows(z_real, z_fake, interp_weights);
    const Tensor g = critic_input_gradients(disc, u);
    const std::vector<double> norms = row_norms(g);
    const int rows = u.dim(0);
    const std::size_t inner = u.size() / static_cast<std::size_t>(rows);

    // d/dtheta of lambda/N sum (|g_i| - 1)^2 = sum_i w_i * d/dtheta <v_i, grad_u D(u_i)>,
    // with v_i = g_i / |g_i| held fixed and w_i = 2 lambda (|g_i| - 1) / N.
    Tensor shifted({2 * rows, u.dim(1), u.dim(2), u.dim(3)});
    Tensor seed({2 * rows, 1});
    double penalty = 0.0;
    for (int r = 0; r < rows; ++r) {
        const double n = norms[static_cast<std::size_t>(r)];
        penalty += (n - 1.0) * (n - 1.0);
        const double w = n > 0.0 ? 2.0 * gp_lambda * (n - 1.0) / rows : 0.0;
        for (std::size_t k = 0; k < inner; ++k) {
            const std::size_t i = static_cast<std::size_t>(r) * inner + k;
            const double v = n > 0.0 ? g[i] / n : 0.0;
            shifted[i] = u[i] + fd_step * v;
            shifted[static_cast<std::size_t>(rows) * inner + i] = u[i] - fd_step * v;
        }
        seed[static_cast<std::size_t>(r)] = w / (2.0 * fd_step);
        seed[static_cast<std::size_t>(rows + r)] = -w / (2.0 * fd_step);
    }
    loss.penalty = gp_lambda * penalty / rows;
    Var out = disc.forward(ag::constant(std::move(shifted)));
    ag::backward(out, &seed);
    return loss;
}

LatentSet encode_latent_set(const Vae& vae, const Tensor& images, std::vector<std::string> ids, std::vector<int> labels,
                            Tensor cond) {
    require(images.ndim() == 4, "images must be (N, 3, H, W)");
    const int n = images.dim(0);
    require(static_cast<int>(ids.size()) == n && static_cast<int>(labels.size()) == n, "ids/labels size mismatch");
    require(cond.empty() || (cond.ndim() == 2 && cond.dim(0) == n), "condition rows must match images");
    LatentSet set;
    std::vector<Tensor> chunks;
    constexpr int kChunk = 64;
    for (int start = 0; start < n; start += kChunk)
        chunks.push_back(vae.encode_batch(images.rows(start, std::min(kChunk, n - start))));
    set.latents = concat_rows(chunks);
    set.ids = std::move(ids);
    set.labels = std::move(labels);
    set.cond = std::move(cond);
    return set;
}

nlohmann::json to_json(const GldmLogRecord& r) {
    return {{"cycle", r.cycle},   {"phase", r.phase},   {"iterations", r.iterations}, {"diffusion", r.diffusion},
            {"adversarial", r.adversarial}, {"critic", r.critic}, {"penalty", r.penalty}};
}

void write_gldm_log(const std::vector<GldmLogRecord>& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), "cannot write loss log " + path);
    for (const auto& r : log) out << to_json(r).dump() << '\n';
}

GldmResult train_gldm(const LatentSet& fake, const LatentSet& real, const NoisePredictor& init, const GldmConfig& cfg,
                      const GldmHooks* hooks, const CriticConfig* critic_cfg) {
    validate_gldm_config(cfg);
    require(fake.size() > 0, "G-LDM training needs at least one fake latent");
    require(static_cast<int>(fake.labels.size()) == fake.size(), "fake latent set is missing labels");
    for (int l : fake.labels) require(l == 1, "fake latent set contains a real entry");
    const bool adversarial = cfg.adversarial && cfg.disc_iters_per_cycle > 0;
    if (adversarial) {
        require(real.size() > 0, "adversarial training needs real latents");
        require(real.latents.shape().size() == 4 && real.latents.dim(1) == fake.latents.dim(1),
                "real and fake latents differ in shape");
        for (int l : real.labels) require(l == 0, "real latent set contains a fake entry");
    }
    require(fake.cond.empty() == (init.config().cond_dim == 0), "condition vectors do not match the predictor");

    const NoiseSchedule sched = build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    CriticConfig cc;
    if (critic_cfg) {
        cc = *critic_cfg;
    } else {
        cc.channels = fake.latents.dim(1);
        cc.height = fake.latents.dim(2);
        cc.width = fake.latents.dim(3);
    }
    Rng critic_init(cfg.seed, "gldm.critic_init");
    GldmResult result{init, Discriminator(cc, &critic_init), {}};
    NoisePredictor& pred = result.predictor;
    Discriminator& disc = result.discriminator;

    nn::Adam opt_g(pred.params(), {.learning_rate = cfg.learning_rate});
    nn::Adam opt_d(disc.params(), {.learning_rate = cfg.learning_rate});

    BatchStream gen_batches(fake.size(), cfg.batch_size, derive_seed(cfg.seed, "gldm.generator_order"));
    BatchStream critic_fake(fake.size(), cfg.batch_size, derive_seed(cfg.seed, "gldm.critic_fake_order"));
    BatchStream critic_real(std::max(real.size(), 1), cfg.batch_size, derive_seed(cfg.seed, "gldm.critic_real_order"));
    Rng gen_rng(cfg.seed, "gldm.generator");
    Rng critic_rng(cfg.seed, "gldm.critic");

    const long per_epoch = (fake.size() + cfg.batch_size - 1) / cfg.batch_size;
    const long total = per_epoch * cfg.epochs;
    const int cycles = static_cast<int>((total + cfg.gen_iters_per_cycle - 1) / cfg.gen_iters_per_cycle);
    long done = 0;

    for (int cycle = 0; cycle < cycles; ++cycle) {
        const int iters = static_cast<int>(std::min<long>(cfg.gen_iters_per_cycle, total - done));
        GldmLogRecord gen_log{cycle, "generator", iters, 0.0, 0.0, 0.0, 0.0};
        {
            nn::FrozenScope frozen(disc.params());
            for (int k = 0; k < iters; ++k) {
                const std::vector<int> idx = gen_batches.next();
                std::vector<int> labels;
                for (int i : idx) labels.push_back(fake.labels[static_cast<std::size_t>(i)]);
                for (int l : labels)
                    if (l != 1) throw TrainingError("real sample in generator batch, cycle " + std::to_string(cycle));

                const Tensor z0 = gather_rows(fake.latents, idx);
                const std::vector<int> steps = sample_steps(gen_rng, static_cast<int>(idx.size()), cfg.T);
                const Tensor noise = gen_rng.normal_tensor(z0.shape());
                const std::optional<Tensor> cond = batch_condition(fake, idx, cfg.cond_dropout, gen_rng);
                const Tensor z_t = diffuse(z0, steps, noise, sched);

                Var eps = pred.forward(ag::constant(z_t), steps, cond);
                Var l_diff = noise_prediction_loss(eps, noise);
                Var loss = l_diff;
                double adv_value = 0.0;
                if (adversarial) {
                    Var l_adv = generator_adversarial_loss(denoised_estimate(z_t, eps, steps, sched), disc, cfg.wasserstein);
                    adv_value = l_adv.value()[0];
                    loss = ag::add(l_diff, ag::scale(l_adv, cfg.adversarial_weight));
                }
                require_finite(loss.value()[0], "generator", cycle);

                GldmStepContext ctx{"generator", cycle, k, &pred, &disc, &labels};
                if (hooks && hooks->before_step) hooks->before_step(ctx);
                ag::backward(loss);
                opt_g.step(pred.params());
                if (hooks && hooks->after_step) hooks->after_step(ctx);

                gen_log.diffusion += l_diff.value()[0] / iters;
                gen_log.adversarial += adv_value / iters;
            }
        }
        done += iters;
        result.log.push_back(gen_log);

        if (!adversarial) continue;
        GldmLogRecord critic_log{cycle, "discriminator", cfg.disc_iters_per_cycle, 0.0, 0.0, 0.0, 0.0};
        nn::FrozenScope frozen(pred.params());
        for (int k = 0; k < cfg.disc_iters_per_cycle; ++k) {
            std::vector<int> ridx = critic_real.next();
            std::vector<int> fidx = critic_fake.next();
            const std::size_t rows = std::min(ridx.size(), fidx.size());
            ridx.resize(rows);
            fidx.resize(rows);
            std::vector<int> labels;
            for (int i : ridx) labels.push_back(real.labels[static_cast<std::size_t>(i)]);
            for (int i : fidx) labels.push_back(fake.labels[static_cast<std::size_t>(i)]);

            const Tensor z_real = gather_rows(real.latents, ridx);
            const Tensor z0 = gather_rows(fake.latents, fidx);
            const std::vector<int> steps = sample_steps(critic_rng, static_cast<int>(rows), cfg.T);
            const Tensor noise = critic_rng.normal_tensor(z0.shape());
            const std::optional<Tensor> cond = batch_condition(fake, fidx, cfg.cond_dropout, critic_rng);
            std::vector<double> weights(rows);
            for (double& w : weights) w = critic_rng.uniform();

            Tensor z_fake;
            {
                ag::NoGradGuard guard;
                const Tensor z_t = diffuse(z0, steps, noise, sched);
                z_fake = denoised_estimate(z_t, pred.forward(ag::constant(z_t), steps, cond), steps, sched).value();
            }

            GldmStepContext ctx{"discriminator", cycle, k, &pred, &disc, &labels};
            if (hooks && hooks->before_step) hooks->before_step(ctx);
            const CriticLoss cl =
                discriminator_backward(disc, z_real, z_fake, weights, cfg.gp_lambda, cfg.wasserstein, cfg.gp_fd_step);
            require_finite(cl.total(), "discriminator", cycle);
            opt_d.step(disc.params());
            if (hooks && hooks->after_step) hooks->after_step(ctx);

            critic_log.critic += cl.adversarial / cfg.disc_iters_per_cycle;
            critic_log.penalty += cl.penalty / cfg.disc_iters_per_cycle;
        }
        result.log.push_back(critic_log);
    }
    return result;
}

std::vector<double> train_diffusion(NoisePredictor& pred, const LatentSet& data, const DiffusionTrainConfig& cfg,
                                    const NoiseSchedule& sched) {
    require(data.size() > 0, "diffusion training needs data");
    require(cfg.epochs >= 0 && cfg.batch_size > 0 && cfg.learning_rate > 0.0, "invalid diffusion training config");
    require(data.cond.empty() == (pred.config().cond_dim == 0), "condition vectors do not match the predictor");
    nn::Adam opt(pred.params(), {.learning_rate = cfg.learning_rate});
    BatchStream batches(data.size(), cfg.batch_size, derive_seed(cfg.seed, "diffusion.order"));
    Rng rng(cfg.seed, "diffusion.noise");
    const int per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::vector<double> epoch_loss;
    for (int e = 0; e < cfg.epochs; ++e) {
        double acc = 0.0;
        for (int b = 0; b < per_epoch; ++b) {
            const std::vector<int> idx = batches.next();
            const Tensor z0 = gather_rows(data.latents, idx);
            const std::vector<int> steps = sample_steps(rng, static_cast<int>(idx.size()), sched.T);
            const Tensor noise = rng.normal_tensor(z0.shape());
            const std::optional<Tensor> cond = batch_condition(data, idx, cfg.cond_dropout, rng);
            Var loss = diffusion_loss(pred, z0, steps, noise, cond, sched);
            require_finite(loss.value()[0], "diffusion", e, "epoch");
            ag::backward(loss);
            opt.step(pred.params());
            acc += loss.value()[0] / per_epoch;
        }
        epoch_loss.push_back(acc);
    }
    return epoch_loss;
}

double evaluate_diffusion_loss(const NoisePredictor& pred, const LatentSet& data, const NoiseSchedule& sched,
                               std::uint64_t seed, int repeats) {
    require(data.size() > 0 && repeats > 0, "nothing to evaluate");
    ag::NoGradGuard guard;
    Rng rng(seed, "diffusion.eval");
    constexpr int kChunk = 64;
    double acc = 0.0;
    for (int r = 0; r < repeats; ++r) {
        for (int start = 0; start < data.size(); start += kChunk) {
            const int count = std::min(kChunk, data.size() - start);
            std::vector<int> idx(static_cast<std::size_t>(count));
            std::iota(idx.begin(), idx.end(), start);
            const Tensor z0 = gather_rows(data.latents, idx);
            const std::vector<int> steps = sample_steps(rng, count, sched.T);
            const Tensor noise = rng.normal_tensor(z0.shape());
            const std::optional<Tensor> cond = data.cond.empty() ? std::nullopt : std::optional<Tensor>(gather_rows(data.cond, idx));
            acc += diffusion_loss(pred, z0, steps, noise, cond, sched).value()[0] * count;
        }
    }
    return acc / (static_cast<double>(data.size()) * repeats);
}

std::vector<double> train_vae(Vae& vae, const Tensor& images, const VaeTrainConfig& cfg) {
    require(images.ndim() == 4 && images.dim(0) > 0, "autoencoder training needs a nonempty image batch");
    require(cfg.steps > 0 && cfg.batch_size > 0 && cfg.learning_rate > 0.0 && cfg.kl_weight >= 0.0,
            "invalid autoencoder training config");
    nn::Adam opt(vae.params(), {.learning_rate = cfg.learning_rate});
    BatchStream batches(images.dim(0), cfg.batch_size, derive_seed(cfg.seed, "vae.order"));
    Rng rng(cfg.seed, "vae.noise");
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(cfg.steps));
    for (int step = 0; step < cfg.steps; ++step) {
        const Tensor x = gather_rows(images, batches.next());
        const Vae::Posterior post = vae.encode_posterior(ag::constant(x));
        const Tensor noise = rng.normal_tensor(post.mean.shape());
        Var z = ag::add(post.mean, ag::mul_const(ag::exp(ag::scale(post.logvar, 0.5)), noise));
        Var recon = ag::mse(vae.decode_raw(z), ag::constant(x));
        // KL(N(mu, sigma^2) || N(0, 1)) per latent element, averaged.
        Var kl = ag::scale(ag::mean(ag::sub(ag::add(ag::square(post.mean), ag::exp(post.logvar)),
                                            ag::add_scalar(post.logvar, 1.0))),
                           0.5);
        Var loss = ag::add(recon, ag::scale(kl, cfg.kl_weight));
        require_finite(loss.value()[0], "autoencoder", step, "step");
        ag::backward(loss);
        opt.step(vae.params());
        losses.push_back(loss.value()[0]);
    }
    // Unit-variance scaled latents, measured on (up to) the first 512 training images.
    vae.latent_scale = 1.0;
    const Tensor mu = vae.encode_batch(images.rows(0, std::min(512, images.dim(0))));
    const double mean = mu.mean();
    double var = 0.0;
    for (double v : mu.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(mu.size());
    vae.latent_scale = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
    return losses;
}

double vae_reconstruction_error(const Vae& vae, const Tensor& images) {
    require(images.ndim() == 4 && images.dim(0) > 0, "reconstruction error needs a nonempty batch");
    double total = 0.0;
    constexpr int kChunk = 64;
    for (int start = 0; start < images.dim(0); start += kChunk) {
        const Tensor x = images.rows(start, std::min(kChunk, images.dim(0) - start));
        const Tensor r = vae.decode_batch(vae.encode_batch(x));
        for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - r[i]);
    }
    return total / static_cast<double>(images.size());
}

}  // namespace r2bd
