#include "r2bd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "r2bd/array_io.hpp"
#include "r2bd/checkpoint.hpp"
#include "r2bd/error.hpp"
#include "r2bd/image_io.hpp"

namespace r2bd {

std::string to_string(DetectorMode m) {
    switch (m) {
        case DetectorMode::two_stream: return "two_stream";
        case DetectorMode::rgb_only: return "rgb_only";
        case DetectorMode::latent_only: return "latent_only";
        case DetectorMode::raw_residual: return "raw_residual";
    }
    return "two_stream";
}

DetectorMode parse_detector_mode(const std::string& s) {
    if (s == "two_stream") return DetectorMode::two_stream;
    if (s == "rgb_only") return DetectorMode::rgb_only;
    if (s == "latent_only") return DetectorMode::latent_only;
    if (s == "raw_residual") return DetectorMode::raw_residual;
    throw ValidationError("unknown detector mode '" + s + "'");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = {{"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"heads", c.heads},
         {"width", c.width},
         {"head_hidden", c.head_hidden},
         {"fusion_blocks", c.fusion_blocks},
         {"kernel", c.kernel},
         {"batch_size", c.batch_size},
         {"threshold", c.threshold},
         {"seed", c.seed},
         {"mode", to_string(c.mode)},
         {"image_channels", c.image_channels},
         {"image_size", c.image_size},
         {"latent_channels", c.latent_channels},
         {"latent_size", c.latent_size}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.heads = j.value("heads", c.heads);
    c.width = j.value("width", c.width);
    c.head_hidden = j.value("head_hidden", c.head_hidden);
    c.fusion_blocks = j.value("fusion_blocks", c.fusion_blocks);
    c.kernel = j.value("kernel", c.kernel);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.threshold = j.value("threshold", c.threshold);
    c.seed = j.value("seed", c.seed);
    c.mode = parse_detector_mode(j.value("mode", to_string(c.mode)));
    c.image_channels = j.value("image_channels", c.image_channels);
    c.image_size = j.value("image_size", c.image_size);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.latent_size = j.value("latent_size", c.latent_size);
}

void validate_detector_config(const DetectorConfig& c) {
    require(c.epochs > 0, "detector epochs must be positive");
    require(c.learning_rate > 0.0, "detector learning rate must be positive");
    require(c.width > 0 && c.head_hidden > 0 && c.batch_size > 0, "detector sizes must be positive");
    require(c.heads > 0 && (2 * c.width) % c.heads == 0, "attention heads must divide the attention width");
    require(c.fusion_blocks >= 0, "fusion_blocks must be nonnegative");
    require(c.kernel > 0 && c.kernel % 2 == 1, "detector kernel must be a positive odd size");
    require(c.threshold >= 0.0 && c.threshold <= 1.0, "threshold must lie in [0, 1]");
    require(c.image_size % 16 == 0 && c.latent_size % 2 == 0, "unsupported detector input geometry");
}

int DetectorBatch::size() const {
    if (!rgb.empty()) return rgb.dim(0);
    if (!latent.empty()) return latent.dim(0);
    return 0;
}

// ---- Standardizer --------------------------------------------------------------------------

Standardizer Standardizer::fit(const Tensor& batch) {
    require(batch.ndim() == 4 && batch.dim(0) > 0, "standardizer needs a nonempty (N, C, H, W) batch");
    const int n = batch.dim(0), c = batch.dim(1);
    const std::size_t plane = static_cast<std::size_t>(batch.dim(2)) * batch.dim(3);
    Standardizer s{Tensor({c}), Tensor({c})};
    for (int ch = 0; ch < c; ++ch) {
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* p = batch.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) sum += p[k];
        }
        const double count = static_cast<double>(n) * plane;
        const double mean = sum / count;
        for (int i = 0; i < n; ++i) {
            const double* p = batch.data() + (static_cast<std::size_t>(i) * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) sq += (p[k] - mean) * (p[k] - mean);
        }
        const double sd = std::sqrt(sq / count);
        s.mean[static_cast<std::size_t>(ch)] = mean;
        s.inv_std[static_cast<std::size_t>(ch)] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
    return s;
}

Standardizer Standardizer::identity(int channels) { return {Tensor({channels}, 0.0), Tensor({channels}, 1.0)}; }

Tensor Standardizer::apply(const Tensor& batch) const {
    require(batch.ndim() == 4 && static_cast<std::size_t>(batch.dim(1)) == mean.size(),
            "standardizer channel count mismatch");
    Tensor out = batch;
    const int c = batch.dim(1);
    const std::size_t plane = static_cast<std::size_t>(batch.dim(2)) * batch.dim(3);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t ch = (i / plane) % static_cast<std::size_t>(c);
        out[i] = (out[i] - mean[ch]) * inv_std[ch];
    }
    return out;
}

// ---- building blocks ------------------------------------------------------------------------

Var CrossAttention::operator()(const Var& query, const Var& context) const {
    require(query.value().ndim() == 3 && context.value().ndim() == 3, "attention expects (N, L, D) tokens");
    const int n = query.dim(0), lq = query.dim(1), lc = context.dim(1), d = query.dim(2);
    require(context.dim(0) == n && context.dim(2) == d, "query and context token shapes disagree");
    const Var q2 = ag::reshape(query, {n * lq, d});
    const Var c2 = ag::reshape(context, {n * lc, d});
    Var merged;
    for (const AttentionHead& h : heads) {
        const int dh = h.q.weight.dim(0);
        Var q = ag::reshape(h.q(q2), {n, lq, dh});
        Var k = ag::reshape(h.k(c2), {n, lc, dh});
        Var v = ag::reshape(h.v(c2), {n, lc, dh});
        Var att = ag::softmax_last(ag::scale(ag::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh))));
        Var o = ag::reshape(ag::bmm(att, v), {n * lq, dh});
        merged = merged.defined() ? ag::concat_channels(merged, o) : o;
    }
    return ag::reshape(out(merged), {n, lq, d});
}

CrossAttention make_cross_attention(nn::ParamSet& ps, const std::string& name, int dim, int heads, Rng* rng) {
    CrossAttention att;
    const int dh = dim / heads;
    for (int h = 0; h < heads; ++h) {
        const std::string p = name + ".head" + std::to_string(h);
        att.heads.push_back({nn::make_linear(ps, p + ".q", dim, dh, rng), nn::make_linear(ps, p + ".k", dim, dh, rng),
                             nn::make_linear(ps, p + ".v", dim, dh, rng)});
    }
    att.out = nn::make_linear(ps, name + ".out", dim, dim, rng);
    return att;
}

Var ResidualBlock::operator()(const Var& x) const {
    Var h = conv2(ag::silu(conv1(x)));
    return ag::silu(ag::add(h, shortcut ? (*shortcut)(x) : x));
}

namespace {

ResidualBlock make_block(nn::ParamSet& ps, const std::string& name, int in, int out, int stride, int k, Rng* rng) {
    ResidualBlock b{nn::make_conv(ps, name + ".conv1", in, out, k, stride, k / 2, rng),
                    nn::make_conv(ps, name + ".conv2", out, out, k, 1, k / 2, rng), std::nullopt};
    if (stride != 1 || in != out) b.shortcut = nn::make_conv(ps, name + ".shortcut", in, out, 1, stride, 0, rng);
    return b;
}

}  // namespace

// ---- Detector -------------------------------------------------------------------------------

Detector::Detector(DetectorConfig cfg, Rng* rng) : cfg_(cfg) { build(rng); }

Detector::Detector(const Detector& other) : cfg_(other.cfg_) {
    build(nullptr);
    params_.copy_values_from(other.params_);
    rgb_norm = other.rgb_norm;
    latent_norm = other.latent_norm;
}

Detector& Detector::operator=(const Detector& other) {
    if (this != &other) {
        Detector copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Detector::build(Rng* rng) {
    validate_detector_config(cfg_);
    const int w = cfg_.width;
    rgb_stem_ = nn::make_conv(params_, "rgb.stem", cfg_.image_channels, w, 3, 1, 1, rng);
    const int rgb_strides[4] = {2, 2, 1, 2};
    const int latent_strides[4] = {1, 1, 1, 2};
    const int ins[4] = {w, w, 2 * w, 2 * w};
    const int outs[4] = {w, 2 * w, 2 * w, 2 * w};
    for (int b = 0; b < 4; ++b)
        rgb_blocks_.push_back(make_block(params_, "rgb.block" + std::to_string(b + 1), ins[b], outs[b], rgb_strides[b], cfg_.kernel, rng));
    latent_stem_ = nn::make_conv(params_, "latent.stem", cfg_.latent_channels, w, 3, 1, 1, rng);
    for (int b = 0; b < 4; ++b)
        latent_blocks_.push_back(
            make_block(params_, "latent.block" + std::to_string(b + 1), ins[b], outs[b], latent_strides[b], cfg_.kernel, rng));
    for (int f = 0; f < cfg_.fusion_blocks; ++f) {
        const std::string p = "fusion" + std::to_string(f);
        rgb_from_latent_.push_back(make_cross_attention(params_, p + ".rgb_from_latent", 2 * w, cfg_.heads, rng));
        latent_from_rgb_.push_back(make_cross_attention(params_, p + ".latent_from_rgb", 2 * w, cfg_.heads, rng));
    }
    head1_ = nn::make_linear(params_, "head.fc1", 4 * w, cfg_.head_hidden, rng);
    head2_ = nn::make_linear(params_, "head.fc2", cfg_.head_hidden, 1, rng);
    rgb_norm = Standardizer::identity(cfg_.image_channels);
    latent_norm = Standardizer::identity(cfg_.latent_channels);
}

void Detector::zero_head() {
    head2_.weight.mutable_value().fill(0.0);
    head2_.bias.mutable_value().fill(0.0);
}

std::vector<std::string> Detector::stream_parameter_names(const std::string& stream) const {
    std::vector<std::string> out;
    for (const auto& [name, var] : params_.entries())
        if (name.rfind(stream + ".", 0) == 0) out.push_back(name);
    return out;
}

Var Detector::stream_front(const Var& x, const nn::Conv2d& stem, const std::vector<ResidualBlock>& blocks) const {
    Var h = ag::silu(stem(x));
    for (int b = 0; b < 3; ++b) h = blocks[static_cast<std::size_t>(b)](h);
    return h;
}

Var Detector::logits(const DetectorBatch& batch) const {
    const int n = batch.size();
    require(n > 0, "empty detector batch");
    const int w = cfg_.width;
    Var rgb, lat;
    if (cfg_.uses_rgb()) {
        require(batch.rgb.shape() == Shape({n, cfg_.image_channels, cfg_.image_size, cfg_.image_size}),
                "rgb input has shape " + shape_string(batch.rgb.shape()));
        rgb = stream_front(ag::constant(rgb_norm.apply(batch.rgb)), rgb_stem_, rgb_blocks_);
    }
    if (cfg_.uses_latent()) {
        require(batch.latent.shape() == Shape({n, cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size}),
                "latent input has shape " + shape_string(batch.latent.shape()));
        lat = stream_front(ag::constant(latent_norm.apply(batch.latent)), latent_stem_, latent_blocks_);
    }
    if (rgb.defined() && lat.defined()) {
        const int rh = rgb.dim(2), rw = rgb.dim(3), lh = lat.dim(2), lw = lat.dim(3);
        Var rt = ag::to_tokens(rgb);
        Var lt = ag::to_tokens(lat);
        for (std::size_t f = 0; f < rgb_from_latent_.size(); ++f) {
            Var r_next = ag::add(rt, rgb_from_latent_[f](rt, lt));
            Var l_next = ag::add(lt, latent_from_rgb_[f](lt, rt));
            rt = r_next;
            lt = l_next;
        }
        rgb = ag::from_tokens(rt, rh, rw);
        lat = ag::from_tokens(lt, lh, lw);
    }
    const Var zeros = ag::constant(Tensor({n, 2 * w}));
    Var rgb_feat = rgb.defined() ? ag::global_avg_pool(rgb_blocks_[3](rgb)) : zeros;
    Var lat_feat = lat.defined() ? ag::global_avg_pool(latent_blocks_[3](lat)) : zeros;
    Var h = ag::silu(head1_(ag::concat_channels(rgb_feat, lat_feat)));
    return head2_(h);
}

std::vector<double> Detector::scores(const DetectorBatch& batch) const {
    ag::NoGradGuard guard;
    const Tensor l = logits(batch).value();
    std::vector<double> out(l.size());
    for (std::size_t i = 0; i < l.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-l[i]));
    return out;
}

void Detector::save(const std::filesystem::path& path, const nlohmann::json& resolved) const {
    Checkpoint ckpt;
    ckpt.kind = "detector";
    ckpt.config = {{"detector", cfg_}, {"resolved", resolved}};
    save_params(params_, ckpt, "detector");
    ckpt.arrays.emplace_back("norm.rgb_mean", rgb_norm.mean);
    ckpt.arrays.emplace_back("norm.rgb_inv_std", rgb_norm.inv_std);
    ckpt.arrays.emplace_back("norm.latent_mean", latent_norm.mean);
    ckpt.arrays.emplace_back("norm.latent_inv_std", latent_norm.inv_std);
    save_checkpoint(ckpt, path);
}

Detector Detector::load(const std::filesystem::path& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    require(ckpt.kind == "detector", "checkpoint " + path.string() + " holds '" + ckpt.kind + "', not a detector");
    Detector det(ckpt.config.at("detector").get<DetectorConfig>(), nullptr);
    load_params(det.params_, ckpt, "detector");
    det.rgb_norm = {ckpt.array("norm.rgb_mean"), ckpt.array("norm.rgb_inv_std")};
    det.latent_norm = {ckpt.array("norm.latent_mean"), ckpt.array("norm.latent_inv_std")};
    return det;
}

DetectionResult make_result(std::string id, double score, double threshold) {
    require(score >= 0.0 && score <= 1.0, "score outside [0, 1]");
    return {std::move(id), score, threshold, score >= threshold, {}};
}

Var bce_with_logits(const Var& logits, const std::vector<int>& labels) {
    require(logits.value().size() == labels.size(), "one label per logit required");
    Tensor y(logits.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] ? 1.0 : 0.0;
    // softplus(x) - y x = -[y log sigmoid(x) + (1 - y) log(1 - sigmoid(x))]
    return ag::mean(ag::sub(ag::softplus(logits), ag::mul_const(logits, y)));
}

// ---- training -------------------------------------------------------------------------------

namespace {

Tensor gather(const Tensor& t, const std::vector<int>& idx) {
    if (t.empty()) return {};
    std::vector<Tensor> rows;
    rows.reserve(idx.size());
    for (int i : idx) rows.push_back(t.item(i));
    return stack(rows);
}

DetectorBatch subset(const DetectorBatch& b, const std::vector<int>& idx) {
    DetectorBatch out{gather(b.rgb, idx), gather(b.latent, idx), {}, {}};
    for (int i : idx) {
        if (!b.labels.empty()) out.labels.push_back(b.labels[static_cast<std::size_t>(i)]);
        if (!b.ids.empty()) out.ids.push_back(b.ids[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace

DetectorTrainResult train_detector(const DetectorBatch& train, const DetectorConfig& cfg, const Detector* init) {
    validate_detector_config(cfg);
    const int n = train.size();
    require(n > 0 && static_cast<int>(train.labels.size()) == n, "training set needs one label per sample");
    const long fakes = std::count(train.labels.begin(), train.labels.end(), 1);
    require(fakes > 0 && fakes < n, "training set must contain both real and fake samples");

    Rng init_rng(cfg.seed, "detector.init");
    DetectorTrainResult result{init ? *init : Detector(cfg, &init_rng), {}};
    Detector& det = result.detector;
    det.mutable_config() = cfg;
    if (cfg.uses_rgb()) det.rgb_norm = Standardizer::fit(train.rgb);
    if (cfg.uses_latent()) det.latent_norm = Standardizer::fit(train.latent);

    nn::Adam opt(det.params(), {.learning_rate = cfg.learning_rate});
    Rng order_rng(cfg.seed, "detector.order");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        int correct = 0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int count = std::min(cfg.batch_size, n - start);
            const std::vector<int> idx(order.begin() + start, order.begin() + start + count);
            const DetectorBatch b = subset(train, idx);
            Var logits = det.logits(b);
            Var loss = bce_with_logits(logits, b.labels);
            if (!std::isfinite(loss.value()[0]))
                throw TrainingError("non-finite detector loss in epoch " + std::to_string(epoch));
            for (int i = 0; i < count; ++i) {
                const bool pred_fake = logits.value()[static_cast<std::size_t>(i)] >= 0.0;
                correct += pred_fake == (b.labels[static_cast<std::size_t>(i)] == 1);
            }
            loss_sum += loss.value()[0] * count;
            ag::backward(loss);
            opt.step(det.params());
        }
        result.log.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n});
    }
    return result;
}

// ---- inputs and prediction ------------------------------------------------------------------

DetectorBatch load_detector_batch(const BiasIndex& index, DetectorMode mode) {
    DetectorConfig probe;
    probe.mode = mode;
    std::vector<Tensor> rgb, lat;
    DetectorBatch b;
    for (const auto& e : index.entries) {
        if (!e.ok()) continue;
        if (mode == DetectorMode::raw_residual) {
            rgb.push_back(read_array_f32(index.root / e.residual_rgb_path));
        } else if (probe.uses_rgb()) {
            rgb.push_back(read_array_f32(index.root / e.bias_rgb_path));
        }
        if (probe.uses_latent()) lat.push_back(read_array_f32(index.root / e.bias_latent_path));
        b.labels.push_back(e.is_fake() ? 1 : 0);
        b.ids.push_back(e.id);
    }
    if (!rgb.empty()) b.rgb = stack(rgb);
    if (!lat.empty()) b.latent = stack(lat);
    return b;
}

DetectorBatch make_detector_batch(const std::vector<ResidualBiasPair>& pairs, DetectorMode mode,
                                  std::vector<std::string> ids, std::vector<int> labels) {
    DetectorConfig probe;
    probe.mode = mode;
    std::vector<Tensor> rgb, lat;
    for (const auto& p : pairs) {
        if (mode == DetectorMode::raw_residual) {
            rgb.push_back(round_to_float(p.measured_rgb));
        } else if (probe.uses_rgb()) {
            rgb.push_back(round_to_float(p.delta_rgb));
        }
        if (probe.uses_latent()) lat.push_back(round_to_float(p.delta_latent));
    }
    DetectorBatch b;
    if (!rgb.empty()) b.rgb = stack(rgb);
    if (!lat.empty()) b.latent = stack(lat);
    b.ids = std::move(ids);
    b.labels = std::move(labels);
    return b;
}

std::vector<DetectionResult> predict_batch(const Detector& det, const BiasIndex& index) {
    std::vector<DetectionResult> out;
    out.reserve(index.entries.size());
    constexpr std::size_t kChunk = 64;
    const double th = det.config().threshold;
    for (std::size_t start = 0; start < index.entries.size(); start += kChunk) {
        BiasIndex chunk{index.root, {}};
        const std::size_t end = std::min(index.entries.size(), start + kChunk);
        for (std::size_t i = start; i < end; ++i) chunk.entries.push_back(index.entries[i]);
        std::vector<double> scores;
        std::string chunk_error;
        try {
            const DetectorBatch b = load_detector_batch(chunk, det.config().mode);
            if (b.size() > 0) scores = det.scores(b);
        } catch (const std::exception& ex) {
            chunk_error = ex.what();
        }
        std::size_t k = 0;
        for (const auto& e : chunk.entries) {
            if (!e.ok()) {
                out.push_back({e.id, 0.0, th, false, e.error.empty() ? "feature extraction failed" : e.error});
            } else if (!chunk_error.empty()) {
                out.push_back({e.id, 0.0, th, false, chunk_error});
            } else {
                out.push_back(make_result(e.id, scores[k++], th));
            }
        }
    }
    return out;
}

std::vector<DetectionResult> predict_batch(const Detector& det, const DatasetManifest& manifest,
                                           const std::filesystem::path& image_root, const ModelBundle& bundle,
                                           const BiasOptions& opts, const ImageTransform& transform) {
    std::vector<DetectionResult> out(manifest.entries.size());
    constexpr std::size_t kChunk = 32;
    const double th = det.config().threshold;
    for (std::size_t start = 0; start < manifest.entries.size(); start += kChunk) {
        const std::size_t end = std::min(manifest.entries.size(), start + kChunk);
        std::vector<Tensor> images;
        std::vector<std::size_t> loaded;
        for (std::size_t i = start; i < end; ++i) {
            const ManifestEntry& e = manifest.entries[i];
            try {
                Tensor img = read_png(image_root / e.path);
                if (transform) img = transform(img, e);
                images.push_back(std::move(img));
                loaded.push_back(i);
            } catch (const std::exception& ex) {
                out[i] = {e.id, 0.0, th, false, ex.what()};
            }
        }
        if (images.empty()) continue;
        const std::vector<ResidualBiasPair> pairs = compute_residual_bias_batch(stack(images), bundle, opts);
        const std::vector<double> scores = det.scores(make_detector_batch(pairs, det.config().mode));
        for (std::size_t k = 0; k < loaded.size(); ++k)
            out[loaded[k]] = make_result(manifest.entries[loaded[k]].id, scores[k], th);
    }
    return out;
}

}  // namespace r2bd
