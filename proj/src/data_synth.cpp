#include "r2bd/data_synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <numbers>
#include <set>
#include <thread>

#include "r2bd/array_io.hpp"
#include "r2bd/error.hpp"
#include "r2bd/image_io.hpp"

namespace r2bd {

namespace {

double smoothstep01(double x) {
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

std::string numbered(const std::string& prefix, std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return prefix + "_" + buf;
}

/// Runs body(i) for i in [0, n) on `workers` threads; each index is handled exactly once.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace

Tensor procedural_real_image(Rng& rng, const RealImageConfig& cfg) {
    require(cfg.size > 0 && cfg.min_shapes >= 0 && cfg.max_shapes >= cfg.min_shapes, "invalid real image config");
    require(cfg.noise_min >= 0.0 && cfg.noise_max >= cfg.noise_min, "invalid sensor noise range");
    const int s = cfg.size;
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    Tensor img({3, s, s});

    // Gradient background.
    double c0[3], c1[3];
    for (int ch = 0; ch < 3; ++ch) {
        c0[ch] = rng.uniform(-0.8, 0.8);
        c1[ch] = rng.uniform(-0.8, 0.8);
    }
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double dx = std::cos(theta), dy = std::sin(theta);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double u = 0.5 + ((x - s / 2.0) * dx + (y - s / 2.0) * dy) / (s * 1.42);
            for (int ch = 0; ch < 3; ++ch)
                img[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y) * s + x] = c0[ch] + (c1[ch] - c0[ch]) * u;
        }

    // Textured shapes with anti-aliased edges.
    const int shapes = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
    for (int k = 0; k < shapes; ++k) {
        const int kind = rng.uniform_int(0, 2);  // circle, rectangle, ellipse
        const double cx = rng.uniform(0.15, 0.85) * s, cy = rng.uniform(0.15, 0.85) * s;
        const double rx = rng.uniform(0.1, 0.3) * s, ry = kind == 0 ? rx : rng.uniform(0.1, 0.3) * s;
        double color[3];
        for (double& c : color) c = rng.uniform(-0.9, 0.9);
        const double freq = rng.uniform(0.3, 0.8), phi = rng.uniform(0.0, std::numbers::pi), psi = rng.uniform(0.0, 6.283);
        const double amp = rng.uniform(0.0, 0.15);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double px = x + 0.5 - cx, py = y + 0.5 - cy;
                double inside;  // signed distance proxy in pixels, positive inside
                if (kind == 1) {
                    inside = std::min(rx - std::abs(px), ry - std::abs(py));
                } else {
                    const double r = std::sqrt((px / rx) * (px / rx) + (py / ry) * (py / ry));
                    inside = (1.0 - r) * std::min(rx, ry);
                }
                const double cover = smoothstep01(inside + 0.5);
                if (cover <= 0.0) continue;
                const double tex = amp * std::sin(freq * (px * std::cos(phi) + py * std::sin(phi)) + psi);
                for (int ch = 0; ch < 3; ++ch) {
                    double& v = img[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y) * s + x];
                    v = (1.0 - cover) * v + cover * (color[ch] + tex);
                }
            }
    }

    // Low-frequency shading.
    const double b = rng.uniform(0.0, 0.1);
    const double fu = rng.uniform(0.5, 1.5), fv = rng.uniform(0.5, 1.5), rho = rng.uniform(0.0, 6.283);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double shade = b * std::sin(2.0 * std::numbers::pi * (fu * x + fv * y) / s + rho);
            for (int ch = 0; ch < 3; ++ch) img[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y) * s + x] += shade;
        }

    // Sensor noise.
    const double sigma = rng.uniform(cfg.noise_min, cfg.noise_max);
    for (double& v : img.values()) v = std::clamp(v + rng.normal(0.0, sigma), -1.0, 1.0);
    return img;
}

DatasetManifest generate_real(int n, std::uint64_t seed, const std::filesystem::path& root, const RealImageConfig& cfg,
                              int workers) {
    require(n >= 1, "generate_real needs n >= 1");
    const std::filesystem::path dir = root / "images" / "real";
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.entries.resize(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        const Tensor img = procedural_real_image(rng, cfg);
        ManifestEntry& e = m.entries[i];
        e.id = numbered("real", i);
        e.path = "images/real/" + e.id + ".png";
        e.label = "real";
        e.generator_family = "none";
        e.method_name = "procedural";
        write_png(root / e.path, img);
        e.hash = file_hash(root / e.path);
    });
    return m;
}

DatasetManifest generate_fakes(const Forger& forger, int n, std::uint64_t seed, const std::filesystem::path& root,
                               int workers) {
    require(n >= 1, "generate_fakes needs n >= 1");
    const std::string method = forger.config().method_name;
    const std::filesystem::path dir = root / "images" / method;
    std::filesystem::create_directories(dir);
    DatasetManifest m;
    m.entries.resize(static_cast<std::size_t>(n));
    constexpr std::size_t kChunk = 32;
    const std::size_t chunks = (static_cast<std::size_t>(n) + kChunk - 1) / kChunk;
    parallel_for(chunks, workers, [&](std::size_t c) {
        const std::size_t begin = c * kChunk;
        const int count = static_cast<int>(std::min<std::size_t>(kChunk, static_cast<std::size_t>(n) - begin));
        const Tensor images = forger.sample(count, seed, begin);
        for (int k = 0; k < count; ++k) {
            ManifestEntry& e = m.entries[begin + static_cast<std::size_t>(k)];
            e.id = numbered(method, begin + static_cast<std::size_t>(k));
            e.path = "images/" + method + "/" + e.id + ".png";
            e.label = "fake";
            e.generator_family = to_string(forger.config().family);
            e.method_name = method;
            write_png(root / e.path, images.item(k));
            e.hash = file_hash(root / e.path);
        }
    });
    return m;
}

double high_frequency_power(const Tensor& image) {
    require(image.ndim() == 3, "expected a (C, H, W) image");
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    double total = 0.0;
    std::vector<double> re(plane), im(plane);
    for (int ch = 0; ch < c; ++ch) {
        const double* src = image.data() + static_cast<std::size_t>(ch) * plane;
        // Row transform then column transform (naive separable DFT).
        std::vector<double> rre(plane), rim(plane);
        for (int y = 0; y < h; ++y)
            for (int kx = 0; kx < w; ++kx) {
                double sr = 0.0, si = 0.0;
                for (int x = 0; x < w; ++x) {
                    const double a = -2.0 * std::numbers::pi * kx * x / w;
                    sr += src[static_cast<std::size_t>(y) * w + x] * std::cos(a);
                    si += src[static_cast<std::size_t>(y) * w + x] * std::sin(a);
                }
                rre[static_cast<std::size_t>(y) * w + kx] = sr;
                rim[static_cast<std::size_t>(y) * w + kx] = si;
            }
        for (int ky = 0; ky < h; ++ky)
            for (int kx = 0; kx < w; ++kx) {
                double sr = 0.0, si = 0.0;
                for (int y = 0; y < h; ++y) {
                    const double a = -2.0 * std::numbers::pi * ky * y / h;
                    const double cr = std::cos(a), ci = std::sin(a);
                    const std::size_t i = static_cast<std::size_t>(y) * w + kx;
                    sr += rre[i] * cr - rim[i] * ci;
                    si += rre[i] * ci + rim[i] * cr;
                }
                const int fy = std::min(ky, h - ky), fx = std::min(kx, w - kx);
                if (fy > h / 4 || fx > w / 4) total += (sr * sr + si * si) / static_cast<double>(plane);
            }
    }
    return total / (static_cast<double>(c) * plane);
}

namespace {

/// Deterministic split assignment for the entries of one method.
void assign_method_splits(std::vector<ManifestEntry*>& items, const std::vector<double>& weights,
                          const std::vector<std::string>& names, std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(items);
    double sum = 0.0;
    for (double w : weights) sum += w;
    require(sum > 0.0, "split ratios must have a positive sum");
    const std::size_t n = items.size();
    std::size_t pos = 0;
    double acc = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        acc += weights[k];
        const std::size_t end = k + 1 == weights.size() ? n : static_cast<std::size_t>(std::llround(n * acc / sum));
        for (; pos < end && pos < n; ++pos) items[pos]->split = names[k];
    }
}

}  // namespace

DatasetManifest build_splits(const std::vector<DatasetManifest>& fragments,
                             const std::vector<std::string>& holdout_methods, std::uint64_t seed,
                             const SplitRatios& ratios) {
    DatasetManifest out;
    for (const auto& f : fragments)
        for (const auto& e : f.entries) out.entries.push_back(e);
    validate_manifest(out);

    std::map<std::string, std::vector<ManifestEntry*>> by_method;
    std::vector<ManifestEntry*> reals;
    for (auto& e : out.entries) {
        if (e.is_fake()) by_method[e.method_name].push_back(&e);
        else reals.push_back(&e);
    }
    const std::set<std::string> holdout(holdout_methods.begin(), holdout_methods.end());
    for (const auto& h : holdout)
        require(by_method.count(h) == 1, "held-out method '" + h + "' has no fake images");
    std::size_t trainable = 0;
    for (const auto& [method, items] : by_method) trainable += holdout.count(method) == 0;
    require(trainable > 0, "every fake method is held out; nothing is left to train on");

    assign_method_splits(reals, {ratios.real_train, ratios.real_in_test, ratios.real_cross_test},
                         {"train", "in_test", "cross_test"}, derive_seed(seed, "split.real"));
    for (auto& [method, items] : by_method) {
        if (holdout.count(method)) {
            for (ManifestEntry* e : items) e->split = "cross_test";
        } else {
            assign_method_splits(items, {ratios.fake_train, ratios.fake_in_test}, {"train", "in_test"},
                                 derive_seed(seed, "split." + method));
        }
    }
    check_split_disjointness(out);
    return out;
}

DatasetManifest assign_real_splits(const DatasetManifest& reals, std::uint64_t seed, const SplitRatios& ratios) {
    DatasetManifest out = reals;
    std::vector<ManifestEntry*> items;
    for (auto& e : out.entries) {
        require(!e.is_fake(), "assign_real_splits received a fake entry");
        items.push_back(&e);
    }
    assign_method_splits(items, {ratios.real_train, ratios.real_in_test, ratios.real_cross_test},
                         {"train", "in_test", "cross_test"}, derive_seed(seed, "split.real"));
    return out;
}

void check_split_disjointness(const DatasetManifest& m) {
    std::set<std::string> train_methods;
    for (const auto& e : m.entries)
        if (e.is_fake() && e.split == "train") train_methods.insert(e.method_name);
    for (const auto& e : m.entries)
        if (e.is_fake() && e.split == "cross_test" && train_methods.count(e.method_name))
            throw ValidationError("method '" + e.method_name + "' appears in both train and cross_test");
}

std::vector<ForgerConfig> CorpusConfig::default_forgers() {
    std::vector<ForgerConfig> f(6);
    f[0] = {.method_name = "gan_a", .family = ForgerFamily::gan, .seed = 11, .train_steps = 300, .learning_rate = 2e-4,
            .width = 8, .noise_dim = 32};
    f[1] = {.method_name = "gan_b", .family = ForgerFamily::gan, .seed = 12, .train_steps = 300, .learning_rate = 2e-4,
            .width = 10, .noise_dim = 16};
    f[2] = {.method_name = "pixeldm_a", .family = ForgerFamily::pixeldm, .seed = 21, .train_steps = 400,
            .learning_rate = 1e-3, .width = 8, .sample_steps = 20};
    f[3] = {.method_name = "pixeldm_b", .family = ForgerFamily::pixeldm, .seed = 22, .train_steps = 300,
            .learning_rate = 2e-3, .width = 8, .sample_steps = 10, .beta_end = 0.015};
    f[4] = {.method_name = "latentdm_a", .family = ForgerFamily::latentdm, .seed = 31, .train_steps = 400,
            .learning_rate = 1e-3, .width = 16, .sample_steps = 20, .vae_steps = 300, .vae_width = 8};
    f[5] = {.method_name = "latentdm_b", .family = ForgerFamily::latentdm, .seed = 32, .train_steps = 300,
            .learning_rate = 2e-3, .width = 12, .sample_steps = 10, .vae_steps = 200, .vae_width = 6};
    return f;
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
    j = {{"image_size", c.real.size},
         {"min_shapes", c.real.min_shapes},
         {"max_shapes", c.real.max_shapes},
         {"noise_min", c.real.noise_min},
         {"noise_max", c.real.noise_max},
         {"train_real", c.train_real},
         {"train_fake", c.train_fake},
         {"in_test_real", c.in_test_real},
         {"in_test_fake", c.in_test_fake},
         {"cross_test_real", c.cross_test_real},
         {"cross_test_per_method", c.cross_test_per_method},
         {"forger_train_images", c.forger_train_images},
         {"forgers", c.forgers},
         {"holdout_methods", c.holdout_methods}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
    c.real.size = j.value("image_size", c.real.size);
    c.real.min_shapes = j.value("min_shapes", c.real.min_shapes);
    c.real.max_shapes = j.value("max_shapes", c.real.max_shapes);
    c.real.noise_min = j.value("noise_min", c.real.noise_min);
    c.real.noise_max = j.value("noise_max", c.real.noise_max);
    c.train_real = j.value("train_real", c.train_real);
    c.train_fake = j.value("train_fake", c.train_fake);
    c.in_test_real = j.value("in_test_real", c.in_test_real);
    c.in_test_fake = j.value("in_test_fake", c.in_test_fake);
    c.cross_test_real = j.value("cross_test_real", c.cross_test_real);
    c.cross_test_per_method = j.value("cross_test_per_method", c.cross_test_per_method);
    c.forger_train_images = j.value("forger_train_images", c.forger_train_images);
    if (j.contains("forgers")) c.forgers = j.at("forgers").get<std::vector<ForgerConfig>>();
    c.holdout_methods = j.value("holdout_methods", c.holdout_methods);
}

Tensor load_images(const DatasetManifest& m, const std::filesystem::path& root) {
    std::vector<Tensor> images;
    images.reserve(m.entries.size());
    for (const auto& e : m.entries) images.push_back(read_png(root / e.path));
    return stack(images);
}

DatasetManifest synthesize_corpus(const CorpusConfig& cfg, std::uint64_t seed, const std::filesystem::path& root,
                                  int workers, const ProgressFn& progress) {
    auto note = [&](const std::string& msg) {
        if (progress) progress(msg);
    };
    const std::vector<ForgerConfig> forgers = cfg.forgers.empty() ? CorpusConfig::default_forgers() : cfg.forgers;
    const std::set<std::string> holdout(cfg.holdout_methods.begin(), cfg.holdout_methods.end());
    std::size_t train_methods = 0;
    for (const auto& f : forgers) train_methods += holdout.count(f.method_name) == 0;
    require(train_methods > 0, "every forger is held out; nothing is left to train on");
    const SplitRatios ratios{static_cast<double>(cfg.train_real), static_cast<double>(cfg.in_test_real),
                             static_cast<double>(cfg.cross_test_real), static_cast<double>(cfg.train_fake),
                             static_cast<double>(cfg.in_test_fake)};

    note("generating real images");
    const int n_real = cfg.train_real + cfg.in_test_real + cfg.cross_test_real;
    const DatasetManifest reals = generate_real(n_real, derive_seed(seed, "real"), root, cfg.real, workers);

    // Forgers learn from real images that land in the training split.
    DatasetManifest forger_pool;
    for (const auto& e : assign_real_splits(reals, seed, ratios).entries)
        if (e.split == "train" && static_cast<int>(forger_pool.size()) < cfg.forger_train_images)
            forger_pool.entries.push_back(e);
    require(forger_pool.size() > 0, "no real training images available for the forgers");
    const Tensor pool_images = load_images(forger_pool, root);

    std::vector<DatasetManifest> fragments{reals};
    std::filesystem::create_directories(root / "forgers");
    const int per_train_method = (cfg.train_fake + cfg.in_test_fake) / static_cast<int>(train_methods);
    for (const auto& fc : forgers) {
        note("training forger " + fc.method_name);
        ForgerConfig run = fc;
        run.seed = derive_seed(derive_seed(seed, "forger." + fc.method_name), fc.seed);
        const Forger forger = train_forger(run, pool_images);
        forger.save(root / "forgers" / (fc.method_name + ".ckpt"));
        const int n = holdout.count(fc.method_name) ? cfg.cross_test_per_method : per_train_method;
        note("sampling " + std::to_string(n) + " images from " + fc.method_name);
        fragments.push_back(generate_fakes(forger, n, derive_seed(seed, "fake." + fc.method_name), root, workers));
    }
    const DatasetManifest manifest = build_splits(fragments, cfg.holdout_methods, seed, ratios);
    write_manifest(manifest, root / "manifest.jsonl");
    return manifest;
}

}  // namespace r2bd
