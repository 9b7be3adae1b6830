#include "r2bd/residual_bias.hpp"

#include <algorithm>
#include <atomic>
#include <thread>

#include "r2bd/array_io.hpp"
#include "r2bd/error.hpp"
#include "r2bd/image_io.hpp"

namespace r2bd {

namespace {

Tensor as_batch(const Tensor& images) {
    require(images.ndim() == 3 || images.ndim() == 4, "expected an image (3, H, W) or a batch (N, 3, H, W)");
    return images.ndim() == 3 ? images.with_leading_one() : images;
}

struct BatchFeatures {
    Tensor recon;
    TrajectoryRecord trajectory;
};

BatchFeatures reconstruct(const Tensor& batch, const ModelBundle& bundle, int t_steps) {
    const NoiseSchedule sched = bundle.schedule();
    const Tensor z0 = bundle.vae.encode_batch(batch);
    BatchFeatures f;
    f.trajectory = run_inversion_reconstruction(z0, t_steps, bundle.noise_fn(), nullptr, sched);
    f.recon = bundle.vae.decode_batch(f.trajectory.final_reconstruction());
    return f;
}

}  // namespace

MeasuredResidual measured_residual(const Tensor& image, const ModelBundle& bundle, int t_steps) {
    const Tensor batch = as_batch(image);
    BatchFeatures f = reconstruct(batch, bundle, t_steps);
    MeasuredResidual out{f.recon, batch - f.recon};
    if (image.ndim() == 3) {
        out.recon = out.recon.squeeze_leading();
        out.delta_hat = out.delta_hat.squeeze_leading();
    }
    return out;
}

std::vector<ResidualBiasPair> compute_residual_bias_batch(const Tensor& images, const ModelBundle& bundle,
                                                          const BiasOptions& opts) {
    const Tensor batch = as_batch(images);
    const NoiseSchedule sched = bundle.schedule();
    BatchFeatures f = reconstruct(batch, bundle, opts.t_steps);
    const Tensor delta0 = theoretical_residual_closed_form(f.trajectory, sched);
    const Tensor measured = batch - f.recon;

    Tensor latent_gap;
    if (opts.latent_form == LatentBiasForm::expanded) {
        latent_gap = f.trajectory.inverted(0) - bundle.vae.encode_batch(f.recon);
    } else {
        latent_gap = bundle.vae.encode_batch(measured);
    }
    const Tensor delta_latent = abs(latent_gap - delta0);
    const Tensor delta_rgb = abs(measured - bundle.vae.decode_batch(delta0));

    std::vector<ResidualBiasPair> out;
    out.reserve(static_cast<std::size_t>(batch.dim(0)));
    for (int n = 0; n < batch.dim(0); ++n)
        out.push_back({delta_rgb.item(n), delta_latent.item(n), opts.t_steps, measured.item(n), delta0.item(n)});
    return out;
}

ResidualBiasPair compute_residual_bias(const Tensor& image, const ModelBundle& bundle, const BiasOptions& opts) {
    require(image.ndim() == 3, "compute_residual_bias expects a single (3, H, W) image");
    return compute_residual_bias_batch(image, bundle, opts).front();
}

void to_json(nlohmann::json& j, const BiasIndexEntry& e) {
    j = {{"id", e.id},
         {"label", e.label},
         {"generator_family", e.generator_family},
         {"method_name", e.method_name},
         {"split", e.split},
         {"bias_rgb_path", e.bias_rgb_path},
         {"bias_latent_path", e.bias_latent_path},
         {"residual_rgb_path", e.residual_rgb_path},
         {"status", e.status}};
    if (!e.error.empty()) j["error"] = e.error;
}

void from_json(const nlohmann::json& j, BiasIndexEntry& e) {
    e.id = j.at("id").get<std::string>();
    e.label = j.at("label").get<std::string>();
    e.generator_family = j.value("generator_family", std::string());
    e.method_name = j.value("method_name", std::string());
    e.split = j.value("split", std::string());
    e.bias_rgb_path = j.value("bias_rgb_path", std::string());
    e.bias_latent_path = j.value("bias_latent_path", std::string());
    e.residual_rgb_path = j.value("residual_rgb_path", std::string());
    e.status = j.value("status", std::string("ok"));
    e.error = j.value("error", std::string());
}

BiasIndex BiasIndex::filter_split(const std::string& split) const {
    BiasIndex out{root, {}};
    for (const auto& e : entries)
        if (e.split == split) out.entries.push_back(e);
    return out;
}

BiasIndex batch_compute_bias(const DatasetManifest& manifest, const std::filesystem::path& image_root,
                             const ModelBundle& bundle, const BiasOptions& opts, const std::filesystem::path& out_dir,
                             int workers) {
    require(workers >= 1, "workers must be at least 1");
    std::filesystem::create_directories(out_dir / "arrays");
    const std::size_t n = manifest.entries.size();
    std::vector<BiasIndexEntry> rows(n);

    constexpr std::size_t kChunk = 32;
    const std::size_t chunks = (n + kChunk - 1) / kChunk;

    auto process_chunk = [&](std::size_t c) {
        const std::size_t begin = c * kChunk;
        const std::size_t end = std::min(n, begin + kChunk);
        std::vector<Tensor> images;
        std::vector<std::size_t> loaded;
        for (std::size_t i = begin; i < end; ++i) {
            const ManifestEntry& e = manifest.entries[i];
            BiasIndexEntry& row = rows[i];
            row.id = e.id;
            row.label = e.label;
            row.generator_family = e.generator_family;
            row.method_name = e.method_name;
            row.split = e.split;
            try {
                images.push_back(read_png(image_root / e.path));
                loaded.push_back(i);
            } catch (const std::exception& ex) {
                row.status = "error";
                row.error = ex.what();
            }
        }
        auto store = [&](std::size_t i, const ResidualBiasPair& pair) {
            BiasIndexEntry& row = rows[i];
            row.bias_rgb_path = "arrays/" + row.id + ".rgb.r2ba";
            row.bias_latent_path = "arrays/" + row.id + ".latent.r2ba";
            row.residual_rgb_path = "arrays/" + row.id + ".residual.r2ba";
            write_array_f32(out_dir / row.bias_rgb_path, pair.delta_rgb);
            write_array_f32(out_dir / row.bias_latent_path, pair.delta_latent);
            write_array_f32(out_dir / row.residual_rgb_path, pair.measured_rgb);
        };
        try {
            if (images.empty()) return;
            const std::vector<ResidualBiasPair> pairs = compute_residual_bias_batch(stack(images), bundle, opts);
            for (std::size_t k = 0; k < loaded.size(); ++k) store(loaded[k], pairs[k]);
        } catch (const std::exception&) {
            // Isolate the failing item(s) by retrying one image at a time.
            for (std::size_t k = 0; k < loaded.size(); ++k) {
                try {
                    store(loaded[k], compute_residual_bias(images[k], bundle, opts));
                } catch (const std::exception& ex) {
                    rows[loaded[k]].status = "error";
                    rows[loaded[k]].error = ex.what();
                }
            }
        }
    };

    if (workers == 1 || chunks <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) process_chunk(c);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t c = next++; c < chunks; c = next++) process_chunk(c);
            });
        }
        for (auto& t : pool) t.join();
    }

    std::vector<nlohmann::json> records;
    records.reserve(n);
    for (const auto& r : rows) records.emplace_back(r);
    write_jsonl(records, out_dir / kBiasIndexFile);
    return BiasIndex{out_dir, std::move(rows)};
}

BiasIndex read_bias_index(const std::filesystem::path& dir) {
    BiasIndex index{dir, {}};
    for (const auto& j : read_jsonl(dir / kBiasIndexFile)) index.entries.push_back(j.get<BiasIndexEntry>());
    return index;
}

}  // namespace r2bd
