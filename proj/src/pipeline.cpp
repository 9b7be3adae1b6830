#include "r2bd/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <set>

#include "r2bd/error.hpp"

namespace r2bd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void say(const LogFn& log, const std::string& msg) {
    if (log) log(msg);
}

void write_json_file(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

int stage_index(const std::string& stage) {
    const auto& names = stage_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == stage) return static_cast<int>(i);
    throw ValidationError("unknown stage \"" + stage + "\"");
}

std::vector<int> labels_of(const DatasetManifest& m) {
    std::vector<int> labels;
    labels.reserve(m.size());
    for (const auto& e : m.entries) labels.push_back(e.is_fake() ? 1 : 0);
    return labels;
}

std::vector<std::string> ids_of(const DatasetManifest& m) {
    std::vector<std::string> ids;
    ids.reserve(m.size());
    for (const auto& e : m.entries) ids.push_back(e.id);
    return ids;
}

LatentSet encode_entries(const Vae& vae, const DatasetManifest& m, const fs::path& root) {
    return encode_latent_set(vae, load_images(m, root), ids_of(m), labels_of(m));
}

// First `cap` reals and first `cap` fakes, manifest order preserved.
DatasetManifest cap_per_class(const DatasetManifest& m, int cap) {
    if (cap <= 0) return m;
    int reals = 0, fakes = 0;
    return m.filter([&](const ManifestEntry& e) {
        int& n = e.is_fake() ? fakes : reals;
        return n++ < cap;
    });
}

std::vector<PerturbationSpec> expand_perturbations(const std::vector<std::string>& items, std::uint64_t seed) {
    std::vector<PerturbationSpec> out;
    for (const auto& item : items) {
        if (item == "all") {
            for (PerturbationKind k : kAllPerturbations)
                for (int level = 1; level <= 5; ++level) out.push_back({k, level, seed});
        } else {
            out.push_back(parse_perturbation(item, seed));
        }
    }
    return out;
}

}  // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"synth_data",   "pretrain",       "train_gldm",
                                                "compute_bias", "train_detector", "evaluate"};
    return names;
}

RunLayout layout_for(const RunConfig& cfg) { return RunLayout{output_root(cfg)}; }

json config_echo(const RunConfig& cfg) { return {{"seed", cfg.seed}, {"resolved", cfg.resolved}}; }

json stage_config(const RunConfig& cfg, const std::string& stage) {
    const int idx = stage_index(stage);
    const json& r = cfg.resolved;
    json out = {{"seed", cfg.seed}, {"corpus", r.at("corpus")}};
    if (idx >= 1) {
        out["pretrain"] = r.at("pretrain");
        const json& g = r.at("gldm");
        out["schedule"] = {{"T", g.at("T")}, {"beta_start", g.at("beta_start")}, {"beta_end", g.at("beta_end")}};
    }
    if (idx >= 2) out["gldm"] = r.at("gldm");
    if (idx >= 3) out["bias"] = r.at("bias");
    if (idx >= 4) out["detector"] = r.at("detector");
    if (idx >= 5) out["evaluate"] = r.at("evaluate");
    return out;
}

std::string stage_hash(const RunConfig& cfg, const std::string& stage) { return json_hash(stage_config(cfg, stage)); }

std::vector<fs::path> stage_outputs(const RunLayout& l, const std::string& stage) {
    switch (stage_index(stage)) {
        case 0: return {l.manifest()};
        case 1: return {l.base_bundle(), l.pretrain_log()};
        case 2: return {l.gldm_bundle(), l.gldm_log()};
        case 3: return {l.bias_dir() / kBiasIndexFile};
        case 4: return {l.detector(), l.detector_log()};
        default: return {l.reports_dir() / "in_test.json", l.reports_dir() / "cross_test.json"};
    }
}

StageStatus StageStatus::load(const fs::path& path) {
    StageStatus s;
    if (!fs::exists(path)) return s;
    std::ifstream in(path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("stages"))
        throw ValidationError(path.string() + " is not a stage status file");
    s.doc_ = std::move(j);
    return s;
}

void StageStatus::save(const fs::path& path) const { write_json_file(doc_, path); }

std::string StageStatus::hash(const std::string& stage) const {
    const json& st = doc_.at("stages");
    if (!st.contains(stage) || st.at(stage).value("status", "") != "done") return {};
    return st.at(stage).value("config_hash", "");
}

void StageStatus::mark_done(const std::string& stage, const std::string& hash, double seconds) {
    doc_["stages"][stage] = {{"status", "done"}, {"config_hash", hash}, {"seconds", seconds}};
}

void StageStatus::mark_failed(const std::string& stage, const std::string& hash, const std::string& error) {
    doc_["stages"][stage] = {{"status", "failed"}, {"config_hash", hash}, {"error", error}};
}

void StageStatus::invalidate_from(const std::string& stage) {
    const int from = stage_index(stage);
    const auto& names = stage_names();
    for (std::size_t i = static_cast<std::size_t>(from); i < names.size(); ++i) doc_["stages"].erase(names[i]);
}

DatasetManifest run_synth_data(const RunConfig& cfg, const LogFn& log) {
    const RunLayout l = layout_for(cfg);
    fs::create_directories(l.data_dir());
    const DatasetManifest m = synthesize_corpus(cfg.corpus, derive_seed(cfg.seed, "stage.synth_data"), l.data_dir(),
                                                cfg.workers, [&](const std::string& s) { say(log, s); });
    write_json_file(config_echo(cfg), l.data_dir() / "config.json");
    return m;
}

void run_pretrain(const RunConfig& cfg, const LogFn& log) {
    const RunLayout l = layout_for(cfg);
    const DatasetManifest train = read_manifest(l.manifest()).filter_split("train");
    require(train.size() > 0, "the manifest has no training entries");
    const Tensor images = load_images(train, l.data_dir());

    say(log, "training autoencoder on " + std::to_string(train.size()) + " images");
    Rng vae_init(cfg.seed, "stage.pretrain.vae_init");
    Vae vae(cfg.pretrain.vae, &vae_init);
    const std::vector<double> vae_losses = train_vae(vae, images, cfg.pretrain.vae_train);
    const int n_check = std::min(images.dim(0), 512);
    const double recon = vae_reconstruction_error(vae, images.rows(0, n_check));
    say(log, "autoencoder reconstruction error " + std::to_string(recon));
    if (!(recon <= cfg.pretrain.max_reconstruction_error))
        throw TrainingError("autoencoder reconstruction error " + std::to_string(recon) + " exceeds " +
                            std::to_string(cfg.pretrain.max_reconstruction_error));

    say(log, "pretraining noise predictor");
    const LatentSet latents = encode_latent_set(vae, images, ids_of(train), labels_of(train));
    Rng pred_init(cfg.seed, "stage.pretrain.predictor_init");
    NoisePredictor pred(cfg.pretrain.predictor, &pred_init);
    const NoiseSchedule sched = build_linear_schedule(cfg.gldm.T, cfg.gldm.beta_start, cfg.gldm.beta_end);
    const std::vector<double> diff_losses = train_diffusion(pred, latents, cfg.pretrain.diffusion, sched);

    ModelBundle bundle{.vae = std::move(vae),
                       .predictor = std::move(pred),
                       .discriminator = std::nullopt,
                       .T = cfg.gldm.T,
                       .beta_start = cfg.gldm.beta_start,
                       .beta_end = cfg.gldm.beta_end,
                       .config = config_echo(cfg)};
    fs::create_directories(l.base_bundle().parent_path());
    save_bundle(bundle, l.base_bundle());
    json vae_curve = json::array();
    const std::size_t stride = std::max<std::size_t>(1, vae_losses.size() / 100);
    for (std::size_t i = 0; i < vae_losses.size(); i += stride) vae_curve.push_back({{"step", i}, {"loss", vae_losses[i]}});
    write_json_file({{"vae_loss", vae_curve},
                     {"reconstruction_error", recon},
                     {"latent_scale", bundle.vae.latent_scale},
                     {"diffusion_epoch_loss", diff_losses},
                     {"config", config_echo(cfg)}},
                    l.pretrain_log());
}

ModelBundle run_train_gldm(const RunConfig& cfg, const LogFn& log) {
    const RunLayout l = layout_for(cfg);
    const DatasetManifest train = read_manifest(l.manifest()).filter_split("train");
    const ModelBundle base = load_bundle(l.base_bundle());
    const DatasetManifest fakes = train.filter([](const ManifestEntry& e) { return e.is_fake(); });
    const DatasetManifest reals = train.filter([](const ManifestEntry& e) { return !e.is_fake(); });
    require(fakes.size() > 0 && reals.size() > 0, "G-LDM training needs both real and fake training images");

    say(log, "encoding " + std::to_string(fakes.size()) + " fake and " + std::to_string(reals.size()) +
                 " real training images");
    const LatentSet fake_set = encode_entries(base.vae, fakes, l.data_dir());
    const LatentSet real_set = encode_entries(base.vae, reals, l.data_dir());
    say(log, "fine-tuning noise predictor");
    GldmResult result = train_gldm(fake_set, real_set, base.predictor, cfg.gldm);

    ModelBundle bundle{.vae = base.vae,
                       .predictor = std::move(result.predictor),
                       .discriminator = std::move(result.discriminator),
                       .T = cfg.gldm.T,
                       .beta_start = cfg.gldm.beta_start,
                       .beta_end = cfg.gldm.beta_end,
                       .config = config_echo(cfg)};
    save_bundle(bundle, l.gldm_bundle());
    write_gldm_log(result.log, l.gldm_log().string());
    return bundle;
}

BiasIndex run_compute_bias(const RunConfig& cfg, const fs::path& manifest_path, const fs::path& bundle_path,
                           const fs::path& out_dir, const std::string& split, const LogFn& log) {
    DatasetManifest m = read_manifest(manifest_path);
    if (!split.empty()) m = m.filter_split(split);
    const ModelBundle bundle = load_bundle(bundle_path);
    say(log, "computing residual bias for " + std::to_string(m.size()) + " images");
    BiasIndex index = batch_compute_bias(m, manifest_path.parent_path(), bundle, cfg.bias, out_dir, cfg.workers);
    write_json_file(config_echo(cfg), out_dir / "config.json");
    return index;
}

Detector run_train_detector(const RunConfig& cfg, const fs::path& bias_dir, const fs::path& out_path,
                            const LogFn& log) {
    const BiasIndex index = read_bias_index(bias_dir).filter_split("train");
    const DetectorBatch batch = load_detector_batch(index, cfg.detector.mode);
    require(batch.size() > 0, "no usable training features in " + bias_dir.string());
    say(log, "training " + to_string(cfg.detector.mode) + " detector on " + std::to_string(batch.size()) + " items");
    DetectorTrainResult result = train_detector(batch, cfg.detector);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    result.detector.save(out_path, config_echo(cfg));
    std::ofstream out(out_path.parent_path() / "train_log.jsonl");
    for (const auto& e : result.log)
        out << json{{"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}}.dump() << '\n';
    return std::move(result.detector);
}

EvaluateInputs default_evaluate_inputs(const RunConfig& cfg) {
    const RunLayout l = layout_for(cfg);
    EvaluateInputs in;
    in.detector = l.detector();
    in.bundle = l.gldm_bundle();
    in.manifest = l.manifest();
    in.out_dir = l.reports_dir();
    return in;
}

std::vector<fs::path> run_evaluate(const RunConfig& cfg, const EvaluateInputs& in, const LogFn& log) {
    const Detector det = Detector::load(in.detector);
    const ModelBundle bundle = load_bundle(in.bundle);
    const DatasetManifest manifest = read_manifest(in.manifest);
    const fs::path image_root = in.manifest.parent_path();
    fs::create_directories(in.out_dir);
    std::vector<fs::path> written;

    EvaluateOptions base;
    base.threshold = cfg.evaluate.threshold;
    base.levels = cfg.evaluate.levels;
    base.bias = cfg.bias;
    auto emit = [&](MetricsReport report, const fs::path& path) {
        report.config = config_echo(cfg);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        write_report(report, path.string());
        written.push_back(path);
    };

    for (const auto& split : in.splits) {
        const DatasetManifest part = manifest.filter_split(split);
        if (part.size() == 0) continue;
        EvaluateOptions opts = base;
        opts.base_rate = split == "cross_test" ? cfg.evaluate.cross_test_base_rate : cfg.evaluate.in_test_base_rate;
        say(log, "scoring " + split + " (" + std::to_string(part.size()) + " images)");
        emit(evaluate(det, bundle, part, image_root, opts), in.out_dir / (split + ".json"));
        if (split != "cross_test") continue;
        std::set<std::string> methods;
        for (const auto& e : part.entries)
            if (e.is_fake()) methods.insert(e.method_name);
        for (const auto& method : methods) {
            const DatasetManifest sub =
                part.filter([&](const ManifestEntry& e) { return !e.is_fake() || e.method_name == method; });
            emit(evaluate(det, bundle, sub, image_root, opts), in.out_dir / ("cross_test_" + method + ".json"));
        }
    }

    const auto cells =
        expand_perturbations(cfg.evaluate.perturbations, derive_seed(cfg.seed, "stage.evaluate.perturb"));
    if (!cells.empty()) {
        const DatasetManifest part = cap_per_class(manifest.filter_split("in_test"), cfg.evaluate.perturb_max_per_class);
        require(part.size() > 0, "perturbation cells need in_test entries");
        json summary = json::object();
        for (const auto& spec : cells) {
            EvaluateOptions opts = base;
            opts.perturbation = spec;
            say(log, "scoring in_test under " + to_string(spec));
            MetricsReport r = evaluate(det, bundle, part, image_root, opts);
            summary[to_string(spec.kind)][std::to_string(spec.level)] = r.auroc;
            emit(r, in.out_dir / "perturb" / (to_string(spec.kind) + "_" + std::to_string(spec.level) + ".json"));
        }
        const fs::path p = in.out_dir / "robustness_summary.json";
        write_json_file({{"auroc", summary}, {"items", part.size()}, {"config", config_echo(cfg)}}, p);
        written.push_back(p);
    }
    return written;
}

void run_single_stage(const RunConfig& cfg, const std::string& stage, const std::function<void()>& body,
                      const LogFn& log) {
    const RunLayout l = layout_for(cfg);
    fs::create_directories(l.root);
    StageStatus status = StageStatus::load(l.status_file());
    const std::string hash = stage_hash(cfg, stage);
    status.invalidate_from(stage);
    status.save(l.status_file());
    say(log, "[" + stage + "] start");
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body();
    } catch (const std::exception& ex) {
        status.mark_failed(stage, hash, ex.what());
        status.save(l.status_file());
        throw;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    status.mark_done(stage, hash, secs);
    status.save(l.status_file());
    say(log, "[" + stage + "] done in " + std::to_string(secs) + " s");
}

PipelineOutcome run_pipeline(const RunConfig& cfg, const LogFn& log) {
    const RunLayout l = layout_for(cfg);
    fs::create_directories(l.root);
    PipelineOutcome outcome;
    bool upstream_ran = false;
    for (const auto& stage : stage_names()) {
        const StageStatus status = StageStatus::load(l.status_file());
        const std::string want = stage_hash(cfg, stage);
        const std::string have = status.hash(stage);
        if (!have.empty() && have != want)
            throw ValidationError("output root " + l.root.string() + " holds " + stage +
                                  " artifacts from a different configuration (hash " + have + ", expected " + want +
                                  "); use a fresh output root");
        bool complete = !upstream_ran && have == want;
        for (const auto& p : stage_outputs(l, stage)) complete = complete && fs::exists(p);
        if (complete) {
            say(log, "[" + stage + "] up to date, skipping");
            outcome.skipped.push_back(stage);
            continue;
        }
        std::function<void()> body;
        switch (stage_index(stage)) {
            case 0: body = [&] { run_synth_data(cfg, log); }; break;
            case 1: body = [&] { run_pretrain(cfg, log); }; break;
            case 2: body = [&] { run_train_gldm(cfg, log); }; break;
            case 3:
                body = [&] { run_compute_bias(cfg, l.manifest(), l.gldm_bundle(), l.bias_dir(), "train", log); };
                break;
            case 4: body = [&] { run_train_detector(cfg, l.bias_dir(), l.detector(), log); }; break;
            default: body = [&] { run_evaluate(cfg, default_evaluate_inputs(cfg), log); }; break;
        }
        run_single_stage(cfg, stage, body, log);
        outcome.ran.push_back(stage);
        upstream_ran = true;
    }
    return outcome;
}

}  // namespace r2bd
